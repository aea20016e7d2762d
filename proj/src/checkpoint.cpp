// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace rank1lab::ckpt {

using nlohmann::json;

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

linalg::Matrix Tensor::to_matrix() const {
    if (!is_matrix()) throw ShapeMismatch("tensor is not 2-D");
    return linalg::Matrix(static_cast<int>(shape[0]), static_cast<int>(shape[1]), data);
}

Tensor Tensor::matrix(const linalg::Matrix& m, Dtype dt) {
    return Tensor{{m.rows(), m.cols()}, dt, m.data()};
}

Tensor Tensor::vector(std::vector<double> v, Dtype dt) {
    const int64_t n = static_cast<int64_t>(v.size());
    return Tensor{{n}, dt, std::move(v)};
}

namespace {

const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "F32" : "F64"; }

Dtype dtype_from_name(const std::string& s) {
    if (s == "F32") return Dtype::F32;
    if (s == "F64") return Dtype::F64;
    throw MalformedHeader("unsupported dtype: " + s);
}

void append_payload(std::string& out, const Tensor& t) {
    if (t.dtype == Dtype::F32) {
        for (double v : t.data) {
            const float f = static_cast<float>(v);
            out.append(reinterpret_cast<const char*>(&f), 4);
        }
    } else {
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
    }
}

// top-level duplicate-key scan; the header is machine-written JSON, so a
// small depth-tracking pass over the raw text is enough
void check_duplicate_names(const std::string& header) {
    std::vector<std::string> keys;
    int depth = 0;
    bool in_string = false, escape = false, key_position = true;
    std::string current;
    for (char c : header) {
        if (in_string) {
            if (escape) {
                escape = false;
                current.push_back(c);
            } else if (c == '\\') {
                escape = true;
            } else if (c == '"') {
                in_string = false;
                if (depth == 1 && key_position) keys.push_back(current);
            } else {
                current.push_back(c);
            }
            continue;
        }
        switch (c) {
            case '"': in_string = true; current.clear(); break;
            case '{': case '[': ++depth; key_position = (c == '{'); break;
            case '}': case ']': --depth; break;
            case ':': if (depth == 1) key_position = false; break;
            case ',': if (depth == 1) key_position = true; break;
            default: break;
        }
    }
    std::sort(keys.begin(), keys.end());
    auto dup = std::adjacent_find(keys.begin(), keys.end());
    if (dup != keys.end()) throw DuplicateName("duplicate tensor name: " + *dup);
}

} // namespace

void save(const Checkpoint& c, const std::string& path) {
    json header = json::object();
    size_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        if (t.numel() != static_cast<int64_t>(t.data.size()))
            throw ShapeMismatch("tensor '" + name + "' shape does not match data length");
        for (double v : t.data)
            if (!std::isfinite(v)) throw Error("tensor '" + name + "' has non-finite entries");
        const size_t nbytes = t.data.size() * dtype_size(t.dtype);
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }
    if (!c.metadata.empty()) header["__metadata__"] = c.metadata;

    const std::string header_str = header.dump();
    const uint64_t n = header_str.size();

    std::string payload;
    payload.reserve(offset);
    for (const auto& [name, t] : c.tensors) append_payload(payload, t);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed: " + path);
}

Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);

    if (bytes.size() < 8) throw MalformedHeader("file shorter than length prefix");
    uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (bytes.size() < 8 + n) throw TruncatedPayload("header extends past end of file");
    const std::string header_str = bytes.substr(8, n);
    check_duplicate_names(header_str);

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw MalformedHeader(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw MalformedHeader("header is not a JSON object");

    const size_t payload_size = bytes.size() - 8 - n;
    const char* payload = bytes.data() + 8 + n;

    Checkpoint c;
    std::vector<std::pair<size_t, size_t>> ranges;
    for (auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (!entry.is_object()) throw MalformedHeader("__metadata__ is not an object");
            for (auto& [k, v] : entry.items()) {
                if (!v.is_string()) throw MalformedHeader("metadata value is not a string");
                c.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        try {
            Tensor t;
            t.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
            t.shape = entry.at("shape").get<std::vector<int64_t>>();
            const auto offs = entry.at("data_offsets").get<std::vector<uint64_t>>();
            if (offs.size() != 2 || offs[1] < offs[0])
                throw MalformedHeader("bad data_offsets for " + name);
            if (t.shape.empty() || t.shape.size() > 2)
                throw MalformedHeader("tensor '" + name + "' is not 1-D or 2-D");
            for (int64_t d : t.shape)
                if (d < 0) throw MalformedHeader("negative dimension in " + name);
            const size_t nbytes = offs[1] - offs[0];
            if (nbytes != static_cast<size_t>(t.numel()) * dtype_size(t.dtype))
                throw MalformedHeader("payload size mismatch for " + name);
            if (offs[1] > payload_size)
                throw TruncatedPayload("payload range past end of file for " + name);
            ranges.emplace_back(offs[0], offs[1]);

            t.data.resize(static_cast<size_t>(t.numel()));
            const char* src = payload + offs[0];
            if (t.dtype == Dtype::F32) {
                for (size_t i = 0; i < t.data.size(); ++i) {
                    float f;
                    std::memcpy(&f, src + i * 4, 4);
                    t.data[i] = static_cast<double>(f);
                }
            } else {
                std::memcpy(t.data.data(), src, t.data.size() * 8);
            }
            for (double v : t.data)
                if (!std::isfinite(v)) throw MalformedHeader("non-finite value in " + name);
            c.tensors.emplace(name, std::move(t));
        } catch (const json::exception& e) {
            throw MalformedHeader("bad header entry for '" + name + "': " + e.what());
        }
    }

    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second)
            throw MalformedHeader("overlapping payload ranges");
    }
    return c;
}

DeltaSet delta(const Checkpoint& base, const Checkpoint& tuned) {
    DeltaSet ds;
    bool any_shared = false;
    for (const auto& [name, bt] : base.tensors) {
        auto it = tuned.tensors.find(name);
        if (it == tuned.tensors.end()) {
            ds.skipped_names.push_back(name);
            continue;
        }
        any_shared = true;
        const Tensor& tt = it->second;
        if (tt.shape != bt.shape) {
            ds.skipped_names.push_back(name);
            continue;
        }
        Tensor d;
        d.shape = bt.shape;
        d.dtype = Dtype::F64;
        d.data.resize(bt.data.size());
        for (size_t i = 0; i < bt.data.size(); ++i) d.data[i] = tt.data[i] - bt.data[i];
        ds.entries.emplace(name, std::move(d));
    }
    for (const auto& [name, tt] : tuned.tensors) {
        if (!base.tensors.count(name)) ds.skipped_names.push_back(name);
    }
    if (!any_shared) throw EmptyIntersection("checkpoints share no tensor names");
    std::sort(ds.skipped_names.begin(), ds.skipped_names.end());
    return ds;
}

DeltaSet select_linear(const DeltaSet& ds, const std::vector<std::string>& patterns) {
    DeltaSet out;
    out.skipped_names = ds.skipped_names;
    for (const auto& [name, t] : ds.entries) {
        if (t.is_matrix() && matches_any(patterns, name)) out.entries.emplace(name, t);
    }
    return out;
}

std::vector<std::string> default_linear_patterns(bool include_embeddings) {
    std::vector<std::string> p = {
        "*.self_attn.q_proj", "*.self_attn.k_proj", "*.self_attn.v_proj",
        "*.self_attn.o_proj", "*.mlp.gate_proj",    "*.mlp.up_proj",
        "*.mlp.down_proj",
    };
    if (include_embeddings) {
        p.push_back("embed_tokens");
        p.push_back("*embed_tokens");
        p.push_back("lm_head");
    }
    return p;
}

bool glob_match(const std::string& pattern, const std::string& name) {
    size_t p = 0, s = 0, mark = 0;
    size_t star = std::string::npos;
    while (s < name.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[s])) {
            ++p;
            ++s;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = s;
        } else if (star != std::string::npos) {
            p = star + 1;
            s = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') ++p;
    return p == pattern.size();
}

bool matches_any(const std::vector<std::string>& patterns, const std::string& name) {
    for (const auto& p : patterns)
        if (glob_match(p, name)) return true;
    return false;
}

} // namespace rank1lab::ckpt
