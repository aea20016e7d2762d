// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rank1lab/errors.hpp"
#include "rank1lab/linalg.hpp"

namespace rank1lab::ckpt {

enum class Dtype { F32, F64 };

inline size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

// Named tensor: 1-D or 2-D, held as doubles in memory regardless of the
// stored dtype (the dtype tag keeps save/load round trips byte exact).
struct Tensor {
    std::vector<int64_t> shape;
    Dtype dtype = Dtype::F64;
    std::vector<double> data;

    int64_t numel() const;
    bool is_matrix() const { return shape.size() == 2; }
    linalg::Matrix to_matrix() const; // 2-D only

    static Tensor matrix(const linalg::Matrix& m, Dtype dt = Dtype::F64);
    static Tensor vector(std::vector<double> v, Dtype dt = Dtype::F64);
};

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

// Container format: 8-byte little-endian header length N, then N bytes of
// JSON mapping tensor name -> {dtype, shape, data_offsets}, plus an optional
// "__metadata__" string map, then the contiguous little-endian payload.
// This is the safetensors layout, so public checkpoints open with this tool.
void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);

// Per-layer differences tuned - base, computed in 64-bit. Shape mismatches
// and single-sided names never abort; they land in skipped_names.
struct DeltaSet {
    std::map<std::string, Tensor> entries;
    std::vector<std::string> skipped_names;
};

DeltaSet delta(const Checkpoint& base, const Checkpoint& tuned);

// Keeps 2-D entries whose name matches any glob pattern.
DeltaSet select_linear(const DeltaSet& ds, const std::vector<std::string>& patterns);

// Attention q/k/v/o projections plus MLP gate/up/down projections; embeddings
// and the output head are excluded unless asked for.
std::vector<std::string> default_linear_patterns(bool include_embeddings = false);

// '*' and '?' wildcards
bool glob_match(const std::string& pattern, const std::string& name);
bool matches_any(const std::vector<std::string>& patterns, const std::string& name);

} // namespace rank1lab::ckpt
