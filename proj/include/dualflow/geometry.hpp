#pragma once

// Camera math: pointmaps from depth via inverse perspective projection,
// world-frame transforms, z-buffered reprojection into novel views, and
// action normalization.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualflow::geom {

[[noreturn]] inline void geom_fail(const std::string& msg) {
    throw std::invalid_argument("geometry: " + msg);
}

struct Vec3 {
    double x = 0, y = 0, z = 0;
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        return {x / n, y / n, z / n};
    }
};

struct Mat3 {
    // row-major
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return {}; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += m[i * 3 + k] * o.m[k * 3 + j];
                r.m[i * 3 + j] = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
        return r;
    }

    Vec3 transposed_mul(const Vec3& v) const {
        return {m[0] * v.x + m[3] * v.y + m[6] * v.z, m[1] * v.x + m[4] * v.y + m[7] * v.z,
                m[2] * v.x + m[5] * v.y + m[8] * v.z};
    }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

/// Rotation about Z (yaw) for planar scene objects.
inline Mat3 rotation_z(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    Mat3 r;
    r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
    return r;
}

inline Mat3 rotation_y(double pitch) {
    const double c = std::cos(pitch), s = std::sin(pitch);
    Mat3 r;
    r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
    return r;
}

inline Mat3 rotation_x(double roll) {
    const double c = std::cos(roll), s = std::sin(roll);
    Mat3 r;
    r.m = {1, 0, 0, 0, c, -s, 0, s, c};
    return r;
}

/// Euler composition for (roll, pitch, yaw) increments: intrinsic Z-Y-X,
/// i.e. R = Rz(yaw) * Ry(pitch) * Rx(roll). The convention is a repo-level
/// choice and is pinned here and in the run-config docs.
inline Mat3 rotation_zyx(double roll, double pitch, double yaw) {
    return rotation_z(yaw) * rotation_y(pitch) * rotation_x(roll);
}

struct CameraIntrinsics {
    double fx = 1, fy = 1, cx = 0, cy = 0;

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) geom_fail("intrinsics: focal lengths must be positive");
    }
};

/// World-to-camera map p_cam = R * p_world + t. R must be a proper rotation.
struct CameraExtrinsics {
    Mat3 R;
    Vec3 t;

    void validate(double tol = 1e-9) const {
        const Mat3 rtr = R.transposed() * R;
        const Mat3 eye = Mat3::identity();
        for (int i = 0; i < 9; ++i)
            if (std::abs(rtr.m[i] - eye.m[i]) > tol)
                geom_fail("extrinsics: R is not orthonormal");
        if (std::abs(R.det() - 1.0) > tol) geom_fail("extrinsics: det(R) must be +1");
    }
};

struct Camera {
    CameraIntrinsics k;
    CameraExtrinsics ext;
};

/// Camera at `eye` looking at `target`. Camera axes: x right, y down,
/// z forward, matching the pixel convention used throughout.
inline Camera lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                            const CameraIntrinsics& k) {
    const Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up);
    if (right.norm() < 1e-12) geom_fail("lookat_camera: view direction parallel to up");
    right = right.normalized();
    const Vec3 down = fwd.cross(right);
    Camera cam;
    cam.k = k;
    cam.ext.R.m = {right.x, right.y, right.z, down.x, down.y, down.z, fwd.x, fwd.y, fwd.z};
    const Vec3 rc = cam.ext.R * eye;
    cam.ext.t = {-rc.x, -rc.y, -rc.z};
    return cam;
}

inline Vec3 camera_center(const CameraExtrinsics& ext) {
    // p_cam = R p + t = 0  =>  center = -R^T t
    const Vec3 c = ext.R.transposed_mul(ext.t);
    return {-c.x, -c.y, -c.z};
}

/// Inverse perspective projection: d * K^-1 [u, v, 1]^T.
inline Vec3 unproject_pixel(double u, double v, double d, const CameraIntrinsics& k) {
    k.validate();
    if (!(d > 0)) geom_fail("unproject_pixel: depth must be positive, got " + std::to_string(d));
    return {d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d};
}

/// Extrinsic inversion using R^-1 = R^T: p_world = R^T (p_cam - t).
inline Vec3 cam_to_world(const Vec3& p_cam, const CameraExtrinsics& ext) {
    return ext.R.transposed_mul(p_cam - ext.t);
}

inline Vec3 world_to_cam(const Vec3& p_world, const CameraExtrinsics& ext) {
    return ext.R * p_world + ext.t;
}

/// Forward projection to pixel coordinates. Caller checks p_cam.z > 0.
inline void project_pixel(const Vec3& p_cam, const CameraIntrinsics& k, double& u, double& v) {
    u = k.fx * p_cam.x / p_cam.z + k.cx;
    v = k.fy * p_cam.y / p_cam.z + k.cy;
}

/// Per-pixel world-space XYZ, pixel-aligned with its RGB frame.
struct Pointmap {
    int height = 0, width = 0;
    std::vector<double> xyz;  // H*W*3 row-major, channel order XYZ

    Vec3 at(int v, int u) const {
        const size_t i = (static_cast<size_t>(v) * width + u) * 3;
        return {xyz[i], xyz[i + 1], xyz[i + 2]};
    }
    void set(int v, int u, const Vec3& p) {
        const size_t i = (static_cast<size_t>(v) * width + u) * 3;
        xyz[i] = p.x;
        xyz[i + 1] = p.y;
        xyz[i + 2] = p.z;
    }
};

struct Image {
    int height = 0, width = 0;
    std::vector<double> rgb;  // H*W*3 in [0,1]

    static Image filled(int h, int w, double r, double g, double b) {
        Image im;
        im.height = h;
        im.width = w;
        im.rgb.resize(static_cast<size_t>(h) * w * 3);
        for (size_t i = 0; i < im.rgb.size(); i += 3) {
            im.rgb[i] = r;
            im.rgb[i + 1] = g;
            im.rgb[i + 2] = b;
        }
        return im;
    }

    double* px(int v, int u) { return rgb.data() + (static_cast<size_t>(v) * width + u) * 3; }
    const double* px(int v, int u) const {
        return rgb.data() + (static_cast<size_t>(v) * width + u) * 3;
    }
};

inline Pointmap build_pointmap(const std::vector<double>& depth, int height, int width,
                               const CameraIntrinsics& k, const CameraExtrinsics& ext) {
    if (static_cast<int64_t>(depth.size()) != static_cast<int64_t>(height) * width)
        geom_fail("build_pointmap: depth buffer size does not match " + std::to_string(height) +
                  "x" + std::to_string(width));
    Pointmap pm;
    pm.height = height;
    pm.width = width;
    pm.xyz.resize(depth.size() * 3);
    for (int v = 0; v < height; ++v)
        for (int u = 0; u < width; ++u) {
            const double d = depth[static_cast<size_t>(v) * width + u];
            if (!(d > 0))
                geom_fail("build_pointmap: nonpositive depth " + std::to_string(d) + " at pixel (" +
                          std::to_string(u) + ", " + std::to_string(v) + ")");
            pm.set(v, u, cam_to_world(unproject_pixel(u, v, d, k), ext));
        }
    return pm;
}

struct ProjectedView {
    Image image;
    std::vector<uint8_t> valid;  // per target pixel
};

/// Splats every source point into the target camera with a 1-pixel footprint
/// and a z-buffer. Uncovered pixels carry `background` and valid = 0. Depth
/// ties keep the lowest source row-major index (first writer wins).
inline ProjectedView project_to_view(const Pointmap& pm, const Image& rgb,
                                     const CameraIntrinsics& k, const CameraExtrinsics& ext,
                                     double background = 0.5) {
    if (pm.height != rgb.height || pm.width != rgb.width)
        geom_fail("project_to_view: pointmap " + std::to_string(pm.width) + "x" +
                  std::to_string(pm.height) + " does not match image " + std::to_string(rgb.width) +
                  "x" + std::to_string(rgb.height));
    k.validate();
    ext.validate();
    ProjectedView out;
    out.image = Image::filled(pm.height, pm.width, background, background, background);
    out.valid.assign(static_cast<size_t>(pm.height) * pm.width, 0);
    std::vector<double> zbuf(out.valid.size(), std::numeric_limits<double>::infinity());
    for (int v = 0; v < pm.height; ++v)
        for (int u = 0; u < pm.width; ++u) {
            const Vec3 p_cam = world_to_cam(pm.at(v, u), ext);
            if (!(p_cam.z > 0)) continue;
            double tu, tv;
            project_pixel(p_cam, k, tu, tv);
            const int iu = static_cast<int>(std::lround(tu));
            const int iv = static_cast<int>(std::lround(tv));
            if (iu < 0 || iu >= pm.width || iv < 0 || iv >= pm.height) continue;
            const size_t ti = static_cast<size_t>(iv) * pm.width + iu;
            if (p_cam.z < zbuf[ti]) {
                zbuf[ti] = p_cam.z;
                out.valid[ti] = 1;
                const double* src = rgb.px(v, u);
                double* dst = out.image.px(iv, iu);
                dst[0] = src[0];
                dst[1] = src[1];
                dst[2] = src[2];
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// actions

/// 7-D gripper-frame command: translation deltas (m), Euler increments (rad),
/// gripper width (m).
struct ActionVector {
    double dx = 0, dy = 0, dz = 0;
    double droll = 0, dpitch = 0, dyaw = 0;
    double gripper_width = 0;

    std::array<double, 7> to_array() const {
        return {dx, dy, dz, droll, dpitch, dyaw, gripper_width};
    }
    static ActionVector from_array(const std::array<double, 7>& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
    }
};

struct ActionStats {
    std::array<double, 7> lo{};
    std::array<double, 7> hi{};

    void validate() const {
        for (int i = 0; i < 7; ++i)
            if (hi[i] < lo[i]) geom_fail("action stats: max < min at component " + std::to_string(i));
    }
};

/// Componentwise affine map onto [-1, 1]; components with max == min map to 0.
inline ActionVector normalize_action(const ActionVector& a, const ActionStats& s) {
    s.validate();
    auto in = a.to_array();
    std::array<double, 7> out{};
    for (int i = 0; i < 7; ++i) {
        const double range = s.hi[i] - s.lo[i];
        out[i] = range > 0 ? 2.0 * (in[i] - s.lo[i]) / range - 1.0 : 0.0;
    }
    return ActionVector::from_array(out);
}

inline ActionVector denormalize_action(const ActionVector& a, const ActionStats& s) {
    s.validate();
    auto in = a.to_array();
    std::array<double, 7> out{};
    for (int i = 0; i < 7; ++i) {
        const double range = s.hi[i] - s.lo[i];
        out[i] = range > 0 ? s.lo[i] + 0.5 * (in[i] + 1.0) * range : s.lo[i];
    }
    return ActionVector::from_array(out);
}

}  // namespace dualflow::geom
