#pragma once

// Parameter checkpoints: a text manifest (name, shape, byte offset per
// tensor) followed by one flat blob of little-endian 64-bit floats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dualflow/optim.hpp"
#include "dualflow/tensor.hpp"

namespace dualflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

inline void save_checkpoint(const std::string& path, const ParamMap& params) {
    std::ostringstream manifest;
    manifest << "dualflow-ckpt v1\n";
    int64_t offset = 0;
    for (const auto& [name, t] : params) {
        manifest << "tensor " << name << " " << t.shape().size();
        for (int d : t.shape()) manifest << " " << d;
        manifest << " @" << offset << "\n";
        offset += t.numel() * 8;
    }
    manifest << "data " << offset << "\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) tensor_fail("save_checkpoint: cannot open " + path);
    const std::string header = manifest.str();
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : params)
        f.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.numel() * 8));
    if (!f) tensor_fail("save_checkpoint: write failed for " + path);
}

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) tensor_fail("load_checkpoint: cannot open " + path);
    std::string line;
    std::getline(f, line);
    if (line != "dualflow-ckpt v1") tensor_fail("load_checkpoint: bad magic in " + path);
    struct Pending {
        std::string name;
        Shape shape;
        int64_t offset;
    };
    std::vector<Pending> pending;
    int64_t blob_size = -1;
    while (std::getline(f, line)) {
        std::istringstream is(line);
        std::string kind;
        is >> kind;
        if (kind == "tensor") {
            Pending p;
            size_t rank = 0;
            is >> p.name >> rank;
            p.shape.resize(rank);
            for (auto& d : p.shape) is >> d;
            std::string off;
            is >> off;
            if (off.empty() || off[0] != '@') tensor_fail("load_checkpoint: bad offset in " + path);
            p.offset = std::stoll(off.substr(1));
            pending.push_back(std::move(p));
        } else if (kind == "data") {
            is >> blob_size;
            break;
        } else {
            tensor_fail("load_checkpoint: unexpected manifest line '" + line + "'");
        }
    }
    if (blob_size < 0) tensor_fail("load_checkpoint: missing data section in " + path);
    const std::streampos blob_start = f.tellg();
    std::vector<CheckpointEntry> out;
    out.reserve(pending.size());
    for (const auto& p : pending) {
        CheckpointEntry e;
        e.name = p.name;
        e.shape = p.shape;
        e.values.resize(static_cast<size_t>(numel_of(p.shape)));
        f.seekg(blob_start + static_cast<std::streamoff>(p.offset));
        f.read(reinterpret_cast<char*>(e.values.data()),
               static_cast<std::streamsize>(e.values.size() * 8));
        if (!f) tensor_fail("load_checkpoint: truncated blob in " + path);
        out.push_back(std::move(e));
    }
    return out;
}

/// Copies checkpoint values into an existing parameter map, matching by name.
/// Every parameter must be present with the right shape.
inline void restore_params(const std::vector<CheckpointEntry>& entries, const ParamMap& params) {
    for (const auto& [name, param] : params) {
        Tensor p = param;
        bool found = false;
        for (const auto& e : entries) {
            if (e.name != name) continue;
            if (e.shape != p.shape())
                tensor_fail("restore_params: shape mismatch for " + name + ": checkpoint " +
                            shape_str(e.shape) + " vs model " + shape_str(p.shape()));
            p.mutable_data() = e.values;
            found = true;
            break;
        }
        if (!found) tensor_fail("restore_params: checkpoint is missing parameter " + name);
    }
}

}  // namespace dualflow
