#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <type_traits>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "photodoodle/errors.hpp"
#include "photodoodle/rng.hpp"
#include "photodoodle/rope.hpp"
#include "photodoodle/tape.hpp"
#include "photodoodle/tensor.hpp"
#include "photodoodle/tokenseq.hpp"

namespace photodoodle {

struct ModelConfig {
    int d = 64;
    int heads = 4;
    int depth = 2;
    int mlp_ratio = 4;
    int vocab_size = 2;
    int max_text_len = 8;
    int patch = 4;
    int channels = 3;
    double theta0 = 10000.0;
    uint64_t codec_seed = 0;
    std::string stage_tag;  // "", "omni-merged"

    int head_dim() const { return heads > 0 ? d / heads : 0; }

    void validate() const {
        if (d <= 0 || heads <= 0 || d % heads != 0)
            throw config_error("model dim " + std::to_string(d) + " not divisible by heads " +
                               std::to_string(heads));
        if (head_dim() % 4 != 0)
            throw config_error("head_dim " + std::to_string(head_dim()) +
                               " must be divisible by 4 for 2D rope");
        if (depth < 1) throw config_error("depth must be >= 1");
        if (mlp_ratio < 1) throw config_error("mlp_ratio must be >= 1");
        if (vocab_size < 2) throw config_error("vocab_size must be >= 2");
        if (max_text_len < 1) throw config_error("max_text_len must be >= 1");
        if (patch < 1 || channels < 1) throw config_error("bad patch geometry");
        if (d < patch * patch * channels)
            throw config_error("model dim " + std::to_string(d) +
                               " smaller than patch vector " +
                               std::to_string(patch * patch * channels));
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d", c.d},
                       {"heads", c.heads},
                       {"depth", c.depth},
                       {"mlp_ratio", c.mlp_ratio},
                       {"vocab_size", c.vocab_size},
                       {"max_text_len", c.max_text_len},
                       {"patch", c.patch},
                       {"channels", c.channels},
                       {"theta0", c.theta0},
                       {"codec_seed", c.codec_seed},
                       {"stage_tag", c.stage_tag}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, bool strict = true) {
    static const std::vector<std::string> known = {
        "d",       "heads",        "depth",      "mlp_ratio", "vocab_size", "max_text_len",
        "patch",   "channels",     "theta0",     "codec_seed", "stage_tag"};
    if (strict)
        for (auto it = j.begin(); it != j.end(); ++it)
            if (std::find(known.begin(), known.end(), it.key()) == known.end())
                throw config_error("unknown model config key: " + it.key());
    ModelConfig c;
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.depth = j.value("depth", c.depth);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_text_len = j.value("max_text_len", c.max_text_len);
    c.patch = j.value("patch", c.patch);
    c.channels = j.value("channels", c.channels);
    c.theta0 = j.value("theta0", c.theta0);
    c.codec_seed = j.value("codec_seed", c.codec_seed);
    c.stage_tag = j.value("stage_tag", c.stage_tag);
    return c;
}

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

/// low-rank residual attached to one named weight: W_eff = W + scale * B·A
template <typename T>
struct LoraDelta {
    Tensor<T> A;  // [r × in]
    Tensor<T> B;  // [out × r]
    T scale;
};

template <typename T>
using LoraDeltas = std::map<std::string, LoraDelta<T>>;

namespace detail {

/// expected parameter name -> shape for a config
inline std::map<std::string, std::vector<int>> param_shapes(const ModelConfig& cfg) {
    int d = cfg.d, hidden = cfg.d * cfg.mlp_ratio;
    std::map<std::string, std::vector<int>> s;
    s["embed"] = {cfg.vocab_size, d};
    s["temb.fc1.w"] = {d, d};
    s["temb.fc1.b"] = {1, d};
    s["temb.fc2.w"] = {d, d};
    s["temb.fc2.b"] = {1, d};
    for (int b = 0; b < cfg.depth; ++b) {
        std::string p = "block" + std::to_string(b) + ".";
        s[p + "ln1.g"] = {1, d};
        s[p + "ln1.b"] = {1, d};
        s[p + "ln2.g"] = {1, d};
        s[p + "ln2.b"] = {1, d};
        for (const char* proj : {"q", "k", "v", "o"}) {
            s[p + "attn." + proj + ".w"] = {d, d};
            s[p + "attn." + proj + ".b"] = {1, d};
        }
        s[p + "mlp.fc1.w"] = {hidden, d};
        s[p + "mlp.fc1.b"] = {1, hidden};
        s[p + "mlp.fc2.w"] = {d, hidden};
        s[p + "mlp.fc2.b"] = {1, d};
        s[p + "mod.w"] = {6 * d, d};
        s[p + "mod.b"] = {1, 6 * d};
    }
    s["final.ln.g"] = {1, d};
    s["final.ln.b"] = {1, d};
    s["final.mod.w"] = {2 * d, d};
    s["final.mod.b"] = {1, 2 * d};
    s["final.proj.w"] = {d, d};
    s["final.proj.b"] = {1, d};
    return s;
}

}  // namespace detail

/// Gaussian std 0.02 for projections; zeros for gates, modulation heads, final
/// projection and all biases, so a fresh model is exactly the zero map.
template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamMap<T> params;
    for (const auto& [name, shape] : detail::param_shapes(cfg)) {
        bool gaussian = name == "embed" || name.find(".w") != std::string::npos;
        bool zero = name.find("mod.") != std::string::npos ||
                    name.find("final.proj") != std::string::npos ||
                    name.ends_with(".b");
        bool ln_gamma = name.ends_with("ln.g") || name.ends_with("ln1.g") ||
                        name.ends_with("ln2.g");
        if (ln_gamma)
            params[name] = Tensor<T>::full(shape, T(1));
        else if (zero || !gaussian)
            params[name] = Tensor<T>::zeros(shape);
        else
            params[name] = Tensor<T>::gaussian(shape, rng, T(0.02));
    }
    return params;
}

/// verify every parameter exists with the exact shape the config dictates
template <typename T>
void audit_params(const ModelConfig& cfg, const ParamMap<T>& params) {
    auto expected = detail::param_shapes(cfg);
    for (const auto& [name, shape] : expected) {
        auto it = params.find(name);
        if (it == params.end()) throw config_error("missing parameter: " + name);
        if (it->second.shape != shape)
            throw config_error("parameter " + name + " has shape " +
                               Tensor<T>::shape_str(it->second.shape) + ", expected " +
                               Tensor<T>::shape_str(shape));
    }
    for (const auto& [name, t] : params)
        if (!expected.count(name)) throw config_error("unexpected parameter: " + name);
}

/// sinusoidal timestep features over t*1000: first d/2 sines, then d/2 cosines
template <typename T>
Tensor<T> timestep_features(T t, int d) {
    if (!(t >= T(0) && t <= T(1)))
        throw config_error("timestep t must lie in [0,1]");
    if (d % 2 != 0) throw config_error("timestep feature dim must be even");
    int half = d / 2;
    Tensor<T> out({1, d});
    for (int k = 0; k < half; ++k) {
        double freq = std::pow(10000.0, -static_cast<double>(k) / half);
        double a = static_cast<double>(t) * 1000.0 * freq;
        out.data[k] = static_cast<T>(std::sin(a));
        out.data[half + k] = static_cast<T>(std::cos(a));
    }
    return out;
}

template <typename T>
struct VelocityInputs {
    Tensor<T> z;                  // [N×d] noised latent tokens
    std::vector<Pos> z_pos;
    Tensor<T> cond;               // [N×d] noise-free condition tokens
    std::vector<Pos> cond_pos;
    std::vector<int> text_ids;    // gathered from the embedding table if set
    Tensor<T> text_tokens;        // used only when text_ids is empty
    T t = T(0);
};

/// Builds the full v_Theta graph on the tape and returns the latent-segment
/// output ref [N×d]. `trainable(name)` selects which tensors become tape
/// params (empty function = pure inference). `lora`, if given, adds low-rank
/// residuals on its target weights; lora_trainable registers A/B as
/// "lora:<target>:A|B" tape params.
template <typename T>
typename Tape<T>::Ref build_velocity(Tape<T>& tape, const ModelConfig& cfg,
                                     const ParamMap<T>& params,
                                     std::type_identity_t<const LoraDeltas<T>*> lora,
                                     const std::function<bool(const std::string&)>& trainable,
                                     bool lora_trainable, const VelocityInputs<T>& in,
                                     bool require_cloned_positions = true) {
    using Ref = typename Tape<T>::Ref;
    int d = cfg.d, heads = cfg.heads;
    int N = in.z.rows();
    if (in.cond.rows() != N)
        throw config_error("PE cloning violation: latent has " + std::to_string(N) +
                           " tokens, condition has " + std::to_string(in.cond.rows()));
    if (require_cloned_positions && in.z_pos != in.cond_pos)
        throw config_error("PE cloning violation: latent and condition position lists differ");
    if (in.z.cols() != d || in.cond.cols() != d)
        throw shape_error("token dim does not match model dim");

    auto P = [&](const std::string& name) -> Ref {
        auto it = params.find(name);
        if (it == params.end()) throw config_error("missing parameter: " + name);
        if (trainable && trainable(name)) return tape.param(name, it->second);
        return tape.leaf(it->second);
    };

    auto linear = [&](Ref x, const std::string& base) -> Ref {
        Ref y = tape.add_rowvec(tape.matmul_nt(x, P(base + ".w")), P(base + ".b"));
        if (lora) {
            auto it = lora->find(base + ".w");
            if (it != lora->end()) {
                Ref A = lora_trainable ? tape.param("lora:" + base + ".w:A", it->second.A)
                                       : tape.leaf(it->second.A);
                Ref B = lora_trainable ? tape.param("lora:" + base + ".w:B", it->second.B)
                                       : tape.leaf(it->second.B);
                Ref delta = tape.matmul_nt(tape.matmul_nt(x, A), B);
                y = tape.add(y, tape.scale(delta, it->second.scale));
            }
        }
        return y;
    };

    // timestep embedding: sinusoid -> 2-layer MLP
    Ref temb = tape.leaf(timestep_features(in.t, d));
    temb = linear(tape.silu(linear(temb, "temb.fc1")), "temb.fc2");
    Ref temb_act = tape.silu(temb);

    // joint sequence [z; c_I; c_T] with combined position list
    int M;
    Ref text;
    if (!in.text_ids.empty()) {
        M = static_cast<int>(in.text_ids.size());
        text = tape.gather_rows(P("embed"), in.text_ids);
    } else {
        M = in.text_tokens.rows();
        text = tape.leaf(in.text_tokens);
    }
    Ref x = tape.concat_rows({tape.leaf(in.z), tape.leaf(in.cond), text});
    std::vector<Pos> positions = in.z_pos;
    positions.insert(positions.end(), in.cond_pos.begin(), in.cond_pos.end());
    positions.insert(positions.end(), M, Pos{0, 0});

    RopeTable rope(cfg.head_dim(), cfg.theta0);
    auto [cos_t, sin_t] = rope_tables<T>(rope, positions, d, heads);

    const T eps = T(1e-6);
    int hd = cfg.head_dim();
    T att_scale = T(1) / std::sqrt(static_cast<T>(hd));

    auto modulate = [&](Ref h, Ref shift, Ref scl) {
        return tape.add_rowvec(tape.mul_rowvec(h, tape.add_const(scl, T(1))), shift);
    };

    for (int b = 0; b < cfg.depth; ++b) {
        std::string p = "block" + std::to_string(b) + ".";
        Ref mod = linear(temb_act, p + "mod");
        Ref shift1 = tape.slice_cols(mod, 0, d);
        Ref scale1 = tape.slice_cols(mod, d, d);
        Ref gate1 = tape.slice_cols(mod, 2 * d, d);
        Ref shift2 = tape.slice_cols(mod, 3 * d, d);
        Ref scale2 = tape.slice_cols(mod, 4 * d, d);
        Ref gate2 = tape.slice_cols(mod, 5 * d, d);

        // attention branch
        Ref h = modulate(tape.layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"), eps), shift1, scale1);
        Ref q = tape.rotate_pairs(linear(h, p + "attn.q"), cos_t, sin_t);
        Ref k = tape.rotate_pairs(linear(h, p + "attn.k"), cos_t, sin_t);
        Ref v = linear(h, p + "attn.v");
        std::vector<Ref> head_outs;
        for (int hh = 0; hh < heads; ++hh) {
            Ref qh = tape.slice_cols(q, hh * hd, hd);
            Ref kh = tape.slice_cols(k, hh * hd, hd);
            Ref vh = tape.slice_cols(v, hh * hd, hd);
            Ref att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), att_scale));
            head_outs.push_back(tape.matmul(att, vh));
        }
        Ref attn_out = linear(tape.concat_cols(head_outs), p + "attn.o");
        x = tape.add(x, tape.mul_rowvec(attn_out, gate1));

        // MLP branch
        Ref h2 = modulate(tape.layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b"), eps), shift2, scale2);
        Ref m = linear(tape.gelu(linear(h2, p + "mlp.fc1")), p + "mlp.fc2");
        x = tape.add(x, tape.mul_rowvec(m, gate2));
    }

    Ref fmod = linear(temb_act, "final.mod");
    Ref fshift = tape.slice_cols(fmod, 0, d);
    Ref fscale = tape.slice_cols(fmod, d, d);
    Ref h = modulate(tape.layer_norm(x, P("final.ln.g"), P("final.ln.b"), eps), fshift, fscale);
    Ref out = linear(h, "final.proj");

    // only the latent segment carries the velocity prediction
    return tape.slice_rows(out, 0, N);
}

/// inference-path velocity: v_Theta(z, t, c_I, c_T), shape [N×d]
template <typename T>
Tensor<T> forward_velocity(const ModelConfig& cfg, const ParamMap<T>& params,
                           std::type_identity_t<const LoraDeltas<T>*> lora, const TokenSeq<T>& z, T t,
                           const TokenSeq<T>& c_img, const TokenSeq<T>& c_text) {
    z.validate();
    c_img.validate();
    c_text.validate();
    VelocityInputs<T> in;
    in.z = z.tokens;
    in.z_pos = z.positions;
    in.cond = c_img.tokens;
    in.cond_pos = c_img.positions;
    in.text_ids = c_text.ids;
    in.text_tokens = c_text.tokens;
    in.t = t;
    Tape<T> tape;
    auto out = build_velocity(tape, cfg, params, lora, nullptr, false, in);
    return tape.value(out);
}

// ---- checkpoint container ----

constexpr char kCheckpointMagic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '1', '\0'};
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> vocab;
    ParamMap<float> params;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw data_error("cannot write checkpoint: " + tmp);
        os.write(kCheckpointMagic, 8);
        detail::put_u32(os, kCheckpointVersion);
        nlohmann::json j;
        j["config"] = ckpt.config;
        j["vocab"] = ckpt.vocab;
        std::string js = j.dump();
        detail::put_u32(os, static_cast<uint32_t>(js.size()));
        os.write(js.data(), static_cast<std::streamsize>(js.size()));
        detail::put_u32(os, static_cast<uint32_t>(ckpt.params.size()));
        for (const auto& [name, tensor] : ckpt.params) {
            detail::put_u16(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_tensor(os, tensor);
        }
        if (!os) throw data_error("checkpoint write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open checkpoint: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw data_error(path + ": bad checkpoint magic");
    uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw data_error(path + ": unsupported checkpoint version " + std::to_string(version));
    uint32_t jlen = detail::get_u32(is);
    std::string js(jlen, '\0');
    if (!is.read(js.data(), jlen)) throw data_error(path + ": truncated config block");
    nlohmann::json j = nlohmann::json::parse(js, nullptr, false);
    if (j.is_discarded()) throw data_error(path + ": malformed config JSON");
    Checkpoint ckpt;
    ckpt.config = model_config_from_json(j.at("config"), /*strict=*/false);
    ckpt.vocab = j.at("vocab").get<std::vector<std::string>>();
    uint32_t count = detail::get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = detail::get_u16(is);
        std::string name(nlen, '\0');
        if (!is.read(name.data(), nlen)) throw data_error(path + ": truncated tensor name");
        ckpt.params[name] = read_tensor(is);
    }
    ckpt.config.validate();
    audit_params(ckpt.config, ckpt.params);
    return ckpt;
}

inline uint64_t fingerprint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open for fingerprint: " + path);
    uint64_t h = 0xCBF29CE484222325ULL;
    char buf[65536];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
        if (is.eof()) break;
    }
    return h;
}

}  // namespace photodoodle
