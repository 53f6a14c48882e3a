#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "photodoodle/errors.hpp"
#include "photodoodle/model.hpp"
#include "photodoodle/rng.hpp"
#include "photodoodle/tensor.hpp"

namespace photodoodle {

/// Low-rank adapter over a set of named base weights.
/// Effective weight: W_eff = W0 + (alpha/r) * B·A, with B zero at creation so a
/// fresh adapter is an exact no-op.
template <typename T = float>
struct LoraAdapter {
    int rank = 0;
    T alpha = T(0);
    std::string stage;             // "omni" | "edit"
    uint64_t base_fingerprint = 0; // FNV-1a of the base checkpoint file
    LoraDeltas<T> entries;         // keyed by weight name, e.g. "block0.attn.q.w"

    T scale() const { return alpha / static_cast<T>(rank); }
};

/// every attention projection and MLP matrix in every block
inline std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> t;
    for (int b = 0; b < cfg.depth; ++b) {
        std::string p = "block" + std::to_string(b) + ".";
        for (const char* proj : {"q", "k", "v", "o"}) t.push_back(p + "attn." + proj + ".w");
        t.push_back(p + "mlp.fc1.w");
        t.push_back(p + "mlp.fc2.w");
    }
    return t;
}

/// A ~ Gaussian(0, 1/r), B = 0; requires r < min(out, in) for every target
template <typename T>
LoraAdapter<T> create_adapter(const ParamMap<T>& params, const std::vector<std::string>& targets,
                              int r, T alpha, uint64_t seed, const std::string& stage = "",
                              uint64_t base_fingerprint = 0) {
    if (targets.empty()) throw config_error("adapter needs at least one target layer");
    if (r < 1) throw config_error("adapter rank must be >= 1");
    LoraAdapter<T> adapter;
    adapter.rank = r;
    adapter.alpha = alpha;
    adapter.stage = stage;
    adapter.base_fingerprint = base_fingerprint;
    Rng rng(seed);
    for (const auto& name : targets) {
        auto it = params.find(name);
        if (it == params.end()) throw config_error("adapter target not in model: " + name);
        const Tensor<T>& w = it->second;
        if (w.rank() != 2) throw config_error("adapter target is not a matrix: " + name);
        int out = w.rows(), in = w.cols();
        if (r >= std::min(out, in))
            throw config_error("adapter rank " + std::to_string(r) + " not below min(" +
                               std::to_string(out) + "," + std::to_string(in) + ") for " + name);
        LoraDelta<T> d;
        d.A = Tensor<T>::gaussian({r, in}, rng, T(1) / static_cast<T>(r));
        d.B = Tensor<T>::zeros({out, r});
        d.scale = adapter.scale();
        adapter.entries.emplace(name, std::move(d));
    }
    return adapter;
}

/// y = x·W0^T + scale · (x·A^T)·B^T for row-major inputs x [n×in]
template <typename T>
Tensor<T> lora_forward(const LoraDelta<T>& d, const Tensor<T>& w0, const Tensor<T>& x) {
    if (x.rank() != 2 || w0.rank() != 2 || x.cols() != w0.cols())
        throw shape_error("lora_forward: x " + Tensor<T>::shape_str(x.shape) + " vs W0 " +
                          Tensor<T>::shape_str(w0.shape));
    if (d.A.cols() != w0.cols() || d.B.rows() != w0.rows() || d.A.rows() != d.B.cols())
        throw shape_error("lora_forward: adapter shapes do not match W0");
    int n = x.rows(), out = w0.rows(), in = w0.cols(), r = d.A.rows();
    Tensor<T> y({n, out});
    std::vector<T> ax(r);
    for (int i = 0; i < n; ++i) {
        const T* xi = &x.data[static_cast<size_t>(i) * in];
        for (int k = 0; k < r; ++k) {
            T s = T(0);
            for (int c = 0; c < in; ++c) s += d.A.at(k, c) * xi[c];
            ax[k] = s;
        }
        for (int o = 0; o < out; ++o) {
            T s = T(0);
            for (int c = 0; c < in; ++c) s += w0.at(o, c) * xi[c];
            T lr = T(0);
            for (int k = 0; k < r; ++k) lr += d.B.at(o, k) * ax[k];
            y.at(i, o) = s + d.scale * lr;
        }
    }
    return y;
}

/// check every entry against the base weights it claims to target
template <typename T>
void validate_adapter(const ParamMap<T>& params, const LoraAdapter<T>& adapter) {
    if (adapter.rank < 1) throw config_error("adapter rank must be >= 1");
    for (const auto& [name, d] : adapter.entries) {
        auto it = params.find(name);
        if (it == params.end()) throw config_error("adapter target not in model: " + name);
        const Tensor<T>& w = it->second;
        if (d.A.rank() != 2 || d.B.rank() != 2 || d.A.rows() != adapter.rank ||
            d.B.cols() != adapter.rank || d.A.cols() != w.cols() || d.B.rows() != w.rows())
            throw config_error("adapter shapes inconsistent for target " + name);
        if (adapter.rank >= std::min(w.rows(), w.cols()))
            throw config_error("adapter rank " + std::to_string(adapter.rank) +
                               " not below min dims of " + name);
    }
}

/// W0 += scale·B·A on every target; all other parameters untouched
template <typename T>
ParamMap<T> merge(const ParamMap<T>& params, const LoraAdapter<T>& adapter) {
    validate_adapter(params, adapter);
    ParamMap<T> out = params;
    for (const auto& [name, d] : adapter.entries) {
        Tensor<T>& w = out.at(name);
        int rows = w.rows(), cols = w.cols(), r = d.A.rows();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                T s = T(0);
                for (int k = 0; k < r; ++k) s += d.B.at(i, k) * d.A.at(k, j);
                w.at(i, j) += d.scale * s;
            }
    }
    return out;
}

/// merge that first checks the adapter was trained against this exact base file
template <typename T>
ParamMap<T> merge(const ParamMap<T>& params, const LoraAdapter<T>& adapter,
                  uint64_t base_fingerprint) {
    if (adapter.base_fingerprint != base_fingerprint)
        throw config_error("adapter was trained against a different base checkpoint "
                           "(fingerprint mismatch)");
    return merge(params, adapter);
}

// ---- adapter container ----

constexpr char kAdapterMagic[8] = {'E', 'D', 'L', 'O', 'R', 'A', '1', '\0'};
constexpr uint32_t kAdapterVersion = 1;

inline void save_adapter(const std::string& path, const LoraAdapter<float>& adapter) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw data_error("cannot write adapter: " + tmp);
        os.write(kAdapterMagic, 8);
        detail::put_u32(os, kAdapterVersion);
        char fp[17];
        std::snprintf(fp, sizeof(fp), "%016llx",
                      static_cast<unsigned long long>(adapter.base_fingerprint));
        nlohmann::json j{{"stage", adapter.stage},
                         {"rank", adapter.rank},
                         {"alpha", static_cast<double>(adapter.alpha)},
                         {"fingerprint", std::string(fp)}};
        std::string js = j.dump();
        detail::put_u32(os, static_cast<uint32_t>(js.size()));
        os.write(js.data(), static_cast<std::streamsize>(js.size()));
        detail::put_u32(os, static_cast<uint32_t>(adapter.entries.size()));
        for (const auto& [name, d] : adapter.entries) {
            detail::put_u16(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_tensor(os, d.A);
            write_tensor(os, d.B);
        }
        if (!os) throw data_error("adapter write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline LoraAdapter<float> load_adapter(const std::string& path) {
    using T = float;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open adapter: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kAdapterMagic, 8) != 0)
        throw data_error(path + ": bad adapter magic");
    uint32_t version = detail::get_u32(is);
    if (version != kAdapterVersion)
        throw data_error(path + ": unsupported adapter version " + std::to_string(version));
    uint32_t jlen = detail::get_u32(is);
    std::string js(jlen, '\0');
    if (!is.read(js.data(), jlen)) throw data_error(path + ": truncated adapter metadata");
    nlohmann::json j = nlohmann::json::parse(js, nullptr, false);
    if (j.is_discarded()) throw data_error(path + ": malformed adapter metadata");
    LoraAdapter<T> adapter;
    adapter.stage = j.at("stage").get<std::string>();
    adapter.rank = j.at("rank").get<int>();
    adapter.alpha = static_cast<T>(j.at("alpha").get<double>());
    adapter.base_fingerprint =
        std::stoull(j.at("fingerprint").get<std::string>(), nullptr, 16);
    if (adapter.rank < 1) throw data_error(path + ": bad adapter rank");
    uint32_t count = detail::get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = detail::get_u16(is);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw data_error(path + ": truncated target name");
        LoraDelta<T> d;
        d.A = read_tensor(is);
        d.B = read_tensor(is);
        d.scale = adapter.scale();
        if (d.A.rank() != 2 || d.B.rank() != 2 || d.A.rows() != adapter.rank ||
            d.B.cols() != adapter.rank)
            throw data_error(path + ": adapter tensors inconsistent with rank for " + name);
        adapter.entries.emplace(std::move(name), std::move(d));
    }
    return adapter;
}

}  // namespace photodoodle
