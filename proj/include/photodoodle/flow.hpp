#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "photodoodle/codec.hpp"
#include "photodoodle/errors.hpp"
#include "photodoodle/image.hpp"
#include "photodoodle/model.hpp"
#include "photodoodle/rng.hpp"
#include "photodoodle/tape.hpp"
#include "photodoodle/tensor.hpp"
#include "photodoodle/tokenseq.hpp"

namespace photodoodle {

/// z_t = (1-t)·x + t·ε along the rectified-flow path
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, T t) {
    if (!x.same_shape(eps))
        throw shape_error("interpolate: x " + Tensor<T>::shape_str(x.shape) + " vs eps " +
                          Tensor<T>::shape_str(eps.shape));
    if (!(t >= T(0) && t <= T(1))) throw config_error("interpolate: t must lie in [0,1]");
    Tensor<T> z(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) z.data[i] = (T(1) - t) * x.data[i] + t * eps.data[i];
    return z;
}

/// dz_t/dt = ε − x, constant along the linear path
template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x, const Tensor<T>& eps) {
    if (!x.same_shape(eps))
        throw shape_error("target_velocity: x " + Tensor<T>::shape_str(x.shape) + " vs eps " +
                          Tensor<T>::shape_str(eps.shape));
    Tensor<T> u(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) u.data[i] = eps.data[i] - x.data[i];
    return u;
}

/// one training example: clean target latents plus noise-free conditions
template <typename T>
struct FlowSample {
    Tensor<T> x;              // [N×d] clean target latents
    std::vector<Pos> pos;     // latent grid positions (cloned onto z)
    TokenSeq<T> c_img;        // never noised
    TokenSeq<T> c_text;
    Tensor<T> eps;            // [N×d] per-step Gaussian noise
    T t = T(0);
};

template <typename T>
using FlowBatch = std::vector<FlowSample<T>>;

/// draw ε and t for one example from the run's generator
template <typename T>
FlowSample<T> make_flow_sample(const TokenSeq<T>& target, const TokenSeq<T>& c_img,
                               const TokenSeq<T>& c_text, Rng& rng) {
    target.validate();
    c_img.validate();
    FlowSample<T> s;
    s.x = target.tokens;
    s.pos = target.positions;
    s.c_img = c_img;
    s.c_text = c_text;
    s.eps = Tensor<T>::gaussian(target.tokens.shape, rng);
    s.t = static_cast<T>(rng.next_double());
    return s;
}

/// builds ‖v_Θ(z_t, t, c_I, c_T) − u‖² (mean over coordinates) on the tape
template <typename T>
typename Tape<T>::Ref cfm_sample_loss(Tape<T>& tape, const ModelConfig& cfg,
                                      const ParamMap<T>& params,
                                      std::type_identity_t<const LoraDeltas<T>*> lora,
                                      const std::function<bool(const std::string&)>& trainable,
                                      bool lora_trainable, const FlowSample<T>& s,
                                      int pos_row_offset = 0) {
    VelocityInputs<T> in;
    in.z = interpolate(s.x, s.eps, s.t);
    in.z_pos = s.pos;
    if (pos_row_offset != 0)
        for (auto& p : in.z_pos) p.first += pos_row_offset;
    in.cond = s.c_img.tokens;
    in.cond_pos = s.c_img.positions;
    in.text_ids = s.c_text.ids;
    in.text_tokens = s.c_text.tokens;
    in.t = s.t;
    auto v = build_velocity(tape, cfg, params, lora, trainable, lora_trainable, in,
                            /*require_cloned_positions=*/pos_row_offset == 0);
    return tape.mean_sq_diff(v, tape.leaf(target_velocity(s.x, s.eps)));
}

/// inference-path loss: mean over the batch, no gradients kept
template <typename T>
T cfm_loss(const ModelConfig& cfg, const ParamMap<T>& params,
           std::type_identity_t<const LoraDeltas<T>*> lora, const FlowBatch<T>& batch) {
    if (batch.empty()) throw config_error("cfm_loss: empty batch");
    double sum = 0;
    for (const auto& s : batch) {
        Tape<T> tape;
        auto loss = cfm_sample_loss<T>(tape, cfg, params, lora, nullptr, false, s);
        sum += static_cast<double>(tape.value(loss).data[0]);
    }
    return static_cast<T>(sum / batch.size());
}

struct SamplerConfig {
    int steps = 20;
    uint64_t seed = 0;
    bool record_trajectory = false;
    int pos_row_offset = 0;  // nonzero shifts latent rows off the condition grid
};

/// velocity as a function of (z, positions, t); lets tests stub the model
template <typename T>
using VelocityFn =
    std::function<Tensor<T>(const Tensor<T>& z, const std::vector<Pos>& pos, T t)>;

/// Euler integration from t=1 down to 0 on the grid t_k = 1 − k/K.
/// z starts as seeded Gaussian with positions cloned from c_img; c_img is
/// checksummed every step and must never change.
template <typename T>
TokenSeq<T> euler_sample(const VelocityFn<T>& vel, const TokenSeq<T>& c_img,
                         const SamplerConfig& cfg,
                         std::vector<Tensor<T>>* trajectory = nullptr) {
    c_img.validate();
    if (cfg.steps < 1) throw config_error("sampler needs at least one step");
    int K = cfg.steps;
    Rng rng(cfg.seed);
    TokenSeq<T> z;
    z.role = TokenRole::Latent;
    z.tokens = Tensor<T>::gaussian({c_img.count(), c_img.dim()}, rng);
    z.positions = c_img.positions;  // PE cloning: identical position list
    if (cfg.pos_row_offset != 0)
        for (auto& p : z.positions) p.first += cfg.pos_row_offset;

    auto checksum = [&]() {
        return fnv1a64(c_img.tokens.data.data(), c_img.tokens.data.size() * sizeof(T));
    };
    uint64_t cond_sum = checksum();
    if (trajectory) {
        trajectory->clear();
        trajectory->push_back(z.tokens);
    }
    for (int k = 0; k < K; ++k) {
        T t = T(1) - static_cast<T>(k) / static_cast<T>(K);
        Tensor<T> v = vel(z.tokens, z.positions, t);
        if (!v.same_shape(z.tokens)) throw shape_error("sampler: velocity shape mismatch");
        for (size_t i = 0; i < z.tokens.data.size(); ++i)
            z.tokens.data[i] -= v.data[i] / static_cast<T>(K);
        if (checksum() != cond_sum)
            throw numeric_error("sampler invariant violated: condition tokens changed");
        if (trajectory) trajectory->push_back(z.tokens);
    }
    for (T v : z.tokens.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw numeric_error("sampler produced non-finite latents");
    return z;
}

/// model-backed sampler: v = v_Θ(z, t, c_I, c_T)
template <typename T>
TokenSeq<T> euler_sample(const ModelConfig& mcfg, const ParamMap<T>& params,
                         std::type_identity_t<const LoraDeltas<T>*> lora,
                         const TokenSeq<T>& c_img, const TokenSeq<T>& c_text,
                         const SamplerConfig& scfg,
                         std::vector<Tensor<T>>* trajectory = nullptr) {
    bool cloned = scfg.pos_row_offset == 0;
    VelocityFn<T> vel = [&](const Tensor<T>& zt, const std::vector<Pos>& pos, T t) {
        VelocityInputs<T> in;
        in.z = zt;
        in.z_pos = pos;
        in.cond = c_img.tokens;
        in.cond_pos = c_img.positions;
        in.text_ids = c_text.ids;
        in.text_tokens = c_text.tokens;
        in.t = t;
        Tape<T> tape;
        auto out = build_velocity(tape, mcfg, params, lora, nullptr, false, in, cloned);
        return tape.value(out);
    };
    return euler_sample(vel, c_img, scfg, trajectory);
}

/// decode each recorded state and write step_000.ppm … step_K.ppm
template <typename T>
void dump_trajectory(const PatchCodec<T>& codec, const std::vector<Pos>& positions,
                     const std::vector<Tensor<T>>& trajectory, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (size_t k = 0; k < trajectory.size(); ++k) {
        TokenSeq<T> seq;
        seq.role = TokenRole::Latent;
        seq.tokens = trajectory[k];
        seq.positions = positions;
        Tensor<T> img = codec.decode_tokens(seq);
        char name[32];
        std::snprintf(name, sizeof(name), "step_%03zu.ppm", k);
        write_ppm(dir + "/" + name, img.template cast<float>());
    }
}

}  // namespace photodoodle
