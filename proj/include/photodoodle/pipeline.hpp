#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "photodoodle/codec.hpp"
#include "photodoodle/dataset.hpp"
#include "photodoodle/errors.hpp"
#include "photodoodle/flow.hpp"
#include "photodoodle/lora.hpp"
#include "photodoodle/model.hpp"
#include "photodoodle/rng.hpp"

#ifdef PHOTODOODLE_OPENMP
#include <omp.h>
#endif

namespace photodoodle {

// Two-stage training: a general-purpose base is trained jointly with a
// high-rank adapter on the mixed corpus and merged ("omni"), then a low-rank
// adapter is fine-tuned on one style with the base frozen ("edit").

struct TrainConfig {
    std::string stage;  // "omni" | "edit"
    int steps = 0;
    int batch = 0;
    double lr = 1e-4;
    int rank = 0;
    double alpha = 0;  // defaults to rank (scale 1)
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    uint64_t seed = 0;
    int checkpoint_every = 0;  // 0 = final only
    bool allow_unmerged_base = false;

    void validate() const {
        if (stage != "omni" && stage != "edit")
            throw config_error("train stage must be 'omni' or 'edit', got '" + stage + "'");
        if (steps < 0) throw config_error("steps must be >= 0");
        if (batch < 1) throw config_error("batch must be >= 1");
        if (lr <= 0) throw config_error("learning rate must be positive");
        if (rank < 1) throw config_error("adapter rank must be >= 1");
    }
};

inline TrainConfig default_train_config(const std::string& stage) {
    TrainConfig tc;
    tc.stage = stage;
    if (stage == "omni") {
        tc.steps = 5000;
        tc.batch = 8;
        tc.rank = 16;
        tc.alpha = 16;
    } else {
        tc.steps = 2000;
        tc.batch = 2;
        tc.rank = 4;
        tc.alpha = 4;
    }
    return tc;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& stage) {
    static const std::vector<std::string> known = {
        "stage", "steps", "batch",  "lr", "rank", "alpha", "beta1",
        "beta2", "eps",   "seed",   "checkpoint_every", "allow_unmerged_base"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw config_error("unknown train config key: " + it.key());
    TrainConfig tc = default_train_config(j.value("stage", stage));
    tc.steps = j.value("steps", tc.steps);
    tc.batch = j.value("batch", tc.batch);
    tc.lr = j.value("lr", tc.lr);
    tc.rank = j.value("rank", tc.rank);
    tc.alpha = j.value("alpha", static_cast<double>(tc.rank));
    tc.beta1 = j.value("beta1", tc.beta1);
    tc.beta2 = j.value("beta2", tc.beta2);
    tc.eps = j.value("eps", tc.eps);
    tc.seed = j.value("seed", tc.seed);
    tc.checkpoint_every = j.value("checkpoint_every", tc.checkpoint_every);
    tc.allow_unmerged_base = j.value("allow_unmerged_base", tc.allow_unmerged_base);
    tc.validate();
    return tc;
}

/// Adam with constant learning rate and bias correction
class Adam {
  public:
    Adam(double lr, double beta1, double beta2, double eps)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void begin_step() { ++t_; }

    void update(const std::string& name, Tensor<float>& p, const Tensor<float>& g) {
        if (!p.same_shape(g)) throw shape_error("adam: gradient shape mismatch for " + name);
        auto [it, fresh] = state_.try_emplace(name, Tensor<float>::zeros(p.shape),
                                              Tensor<float>::zeros(p.shape));
        auto& [m, v] = it->second;
        double bc1 = 1.0 - std::pow(b1_, t_), bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t i = 0; i < p.data.size(); ++i) {
            double gi = g.data[i];
            double mi = b1_ * m.data[i] + (1.0 - b1_) * gi;
            double vi = b2_ * v.data[i] + (1.0 - b2_) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            p.data[i] -= static_cast<float>(lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
        }
    }

  private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::map<std::string, std::pair<Tensor<float>, Tensor<float>>> state_;
};

/// one corpus pair pre-encoded to token sequences
struct EncodedPair {
    TokenSeq<float> target;  // encode(tgt): the clean latents x
    TokenSeq<float> cond;    // encode(src): c_I, never noised
    TokenSeq<float> text;    // ids + padded (0,0) positions
};

inline TokenSeq<float> encode_instruction_ids(const Vocab& vocab, const std::string& text, int d) {
    TokenSeq<float> seq;
    seq.role = TokenRole::Text;
    seq.ids = vocab.tokenize(text);
    seq.tokens = Tensor<float>::zeros({static_cast<int>(seq.ids.size()), d});
    seq.positions.assign(seq.ids.size(), Pos{0, 0});
    return seq;
}

inline std::vector<EncodedPair> encode_corpus(const ModelConfig& cfg, const Vocab& vocab,
                                              const std::vector<EditPair>& pairs) {
    PatchCodec<float> codec(cfg.patch, cfg.channels, cfg.codec_seed, cfg.d);
    std::vector<EncodedPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        EncodedPair e;
        e.target = codec.encode_image(p.tgt);
        e.target.role = TokenRole::Latent;
        e.cond = codec.encode_image(p.src);
        e.text = encode_instruction_ids(vocab, p.instruction, cfg.d);
        out.push_back(std::move(e));
    }
    return out;
}

/// fresh random-init base with the dataset vocabulary baked in
inline Checkpoint make_fresh_checkpoint(ModelConfig cfg, const Vocab& vocab, uint64_t seed) {
    cfg.vocab_size = vocab.size();
    cfg.max_text_len = vocab.max_len();
    cfg.validate();
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.vocab = vocab.words();
    ckpt.params = init_params<float>(cfg, seed);
    return ckpt;
}

struct TrainResult {
    Checkpoint checkpoint;       // omni: merged weights, stage_tag set; edit: base untouched
    LoraAdapter<float> adapter;  // the trained adapter (pre-merge copy for omni)
    std::vector<double> loss_log;
};

using StepCallback = std::function<void(int step, double loss)>;

/// Omni: trains base weights jointly with a rank-`tc.rank` adapter, then
/// merges. Edit: freezes the base and trains only the adapter.
inline TrainResult train_stage(const TrainConfig& tc, const Checkpoint& base,
                               const std::vector<EditPair>& corpus,
                               uint64_t base_fingerprint = 0, int pos_row_offset = 0,
                               const StepCallback& on_step = nullptr) {
    tc.validate();
    if (corpus.empty()) throw data_error("training corpus is empty");
    bool omni = tc.stage == "omni";
    if (!omni) {
        if (base.config.stage_tag != "omni-merged" && !tc.allow_unmerged_base)
            throw config_error(
                "edit stage requires an omni-merged base checkpoint "
                "(set allow_unmerged_base to override)");
        std::set<int> styles;
        for (const auto& p : corpus) styles.insert(p.style);
        if (styles.size() != 1)
            throw config_error("edit stage expects a single-style corpus, found " +
                               std::to_string(styles.size()) + " styles");
    }

    ModelConfig cfg = base.config;
    Vocab vocab(base.vocab, cfg.max_text_len);
    auto encoded = encode_corpus(cfg, vocab, corpus);
    ParamMap<float> params = base.params;
    LoraAdapter<float> adapter =
        create_adapter<float>(params, default_lora_targets(cfg), tc.rank,
                              static_cast<float>(tc.alpha > 0 ? tc.alpha : tc.rank),
                              mix_seed(tc.seed, 0xADA9), omni ? "omni" : "edit",
                              base_fingerprint);

    std::function<bool(const std::string&)> trainable;
    if (omni)
        trainable = [](const std::string&) { return true; };
    else
        trainable = [](const std::string&) { return false; };

    Adam opt(tc.lr, tc.beta1, tc.beta2, tc.eps);
    Rng run_rng(mix_seed(tc.seed, 0x7A17));
    std::vector<double> loss_log;
    loss_log.reserve(tc.steps);

    int N = encoded.empty() ? 0 : encoded[0].target.count();
    for (int step = 0; step < tc.steps; ++step) {
        // draw the whole batch from the run generator up front (determinism
        // does not depend on thread count)
        struct Draw {
            int idx;
            Tensor<float> eps;
            float t;
        };
        std::vector<Draw> draws(tc.batch);
        for (auto& d : draws) {
            d.idx = static_cast<int>(run_rng.next_below(encoded.size()));
            d.eps = Tensor<float>::gaussian({N, cfg.d}, run_rng);
            d.t = static_cast<float>(run_rng.next_double());
        }

        std::vector<std::map<std::string, Tensor<float>>> grads(tc.batch);
        std::vector<double> losses(tc.batch);
#ifdef PHOTODOODLE_OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int b = 0; b < tc.batch; ++b) {
            const auto& e = encoded[draws[b].idx];
            FlowSample<float> s;
            s.x = e.target.tokens;
            s.pos = e.target.positions;
            s.c_img = e.cond;
            s.c_text = e.text;
            s.eps = draws[b].eps;
            s.t = draws[b].t;
            Tape<float> tape;
            auto loss = cfm_sample_loss<float>(tape, cfg, params, &adapter.entries, trainable,
                                               /*lora_trainable=*/true, s, pos_row_offset);
            losses[b] = tape.value(loss).data[0];
            tape.backward(loss);
            grads[b] = tape.grads();
        }

        double mean_loss = 0;
        std::map<std::string, Tensor<float>> total;
        for (int b = 0; b < tc.batch; ++b) {
            mean_loss += losses[b];
            for (auto& [name, g] : grads[b]) {
                auto [it, fresh] = total.try_emplace(name, std::move(g));
                if (!fresh)
                    for (size_t i = 0; i < it->second.data.size(); ++i)
                        it->second.data[i] += g.data[i];
            }
        }
        mean_loss /= tc.batch;
        if (!std::isfinite(mean_loss))
            throw numeric_error("non-finite loss at step " + std::to_string(step));

        opt.begin_step();
        for (auto& [name, g] : total) {
            for (auto& v : g.data) v /= static_cast<float>(tc.batch);
            if (name.rfind("lora:", 0) == 0) {
                // "lora:<target>:A" / ":B"
                std::string rest = name.substr(5);
                char which = rest.back();
                std::string target = rest.substr(0, rest.size() - 2);
                auto& entry = adapter.entries.at(target);
                opt.update(name, which == 'A' ? entry.A : entry.B, g);
            } else {
                opt.update(name, params.at(name), g);
            }
        }
        loss_log.push_back(mean_loss);
        if (on_step) on_step(step, mean_loss);
    }

    TrainResult res;
    res.adapter = adapter;
    res.loss_log = std::move(loss_log);
    res.checkpoint.vocab = base.vocab;
    if (omni) {
        res.checkpoint.config = cfg;
        res.checkpoint.config.stage_tag = "omni-merged";
        res.checkpoint.params = merge(params, adapter);
    } else {
        res.checkpoint.config = base.config;
        res.checkpoint.params = base.params;  // frozen contract: bit-identical
    }
    return res;
}

/// encode -> sample -> decode -> clamp
inline Image edit_image(const Checkpoint& ckpt, const LoraAdapter<float>* adapter,
                        const Image& src, const std::string& instruction,
                        const SamplerConfig& scfg) {
    const ModelConfig& cfg = ckpt.config;
    if (src.rank() != 3 || src.shape[2] != cfg.channels)
        throw shape_error("edit_image expects [HxWx" + std::to_string(cfg.channels) + "]");
    if (src.shape[0] % cfg.patch != 0 || src.shape[1] % cfg.patch != 0)
        throw config_error("image size not divisible by the checkpoint's patch size " +
                           std::to_string(cfg.patch));
    PatchCodec<float> codec(cfg.patch, cfg.channels, cfg.codec_seed, cfg.d);
    Vocab vocab(ckpt.vocab, cfg.max_text_len);
    TokenSeq<float> c_img = codec.encode_image(src);
    TokenSeq<float> c_text = encode_instruction_ids(vocab, instruction, cfg.d);
    TokenSeq<float> z = euler_sample<float>(cfg, ckpt.params,
                                            adapter ? &adapter->entries : nullptr, c_img,
                                            c_text, scfg);
    if (scfg.pos_row_offset != 0) z.positions = c_img.positions;  // restore the grid for decode
    Image out = codec.decode_tokens(z);
    for (auto& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

struct PairMetrics {
    std::string id;
    bool ok = false;
    std::string error;
    double bg_mse = 0, edit_mse = 0, bg_psnr = 0;
};

namespace detail {

inline double psnr_of(double mse) { return mse > 0 ? 10.0 * std::log10(1.0 / mse) : 99.0; }

inline PairMetrics score_pair(const EditPair& p, const Image& out) {
    PairMetrics m;
    m.id = p.id;
    int H = p.src.shape[0], W = p.src.shape[1];
    double bg = 0, ed = 0;
    long bg_n = 0, ed_n = 0;
    for (int i = 0; i < H * W; ++i) {
        bool edited = p.mask.data[static_cast<size_t>(i)] > 0.0f;
        for (int c = 0; c < 3; ++c) {
            size_t at = static_cast<size_t>(i) * 3 + c;
            if (edited) {
                double d = out.data[at] - p.tgt.data[at];
                ed += d * d;
                ++ed_n;
            } else {
                double d = out.data[at] - p.src.data[at];
                bg += d * d;
                ++bg_n;
            }
        }
    }
    m.bg_mse = bg_n ? bg / bg_n : 0.0;
    m.edit_mse = ed_n ? ed / ed_n : 0.0;
    m.bg_psnr = psnr_of(m.bg_mse);
    m.ok = true;
    return m;
}

}  // namespace detail

/// per-pair and aggregate background/edit metrics, plus the identity baseline
inline nlohmann::json evaluate(const Checkpoint& ckpt, const LoraAdapter<float>* adapter,
                               const std::vector<EditPair>& pairs, const SamplerConfig& scfg) {
    if (pairs.empty()) throw data_error("evaluation corpus is empty");
    std::vector<PairMetrics> metrics(pairs.size());
#ifdef PHOTODOODLE_OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < static_cast<int>(pairs.size()); ++i) {
        SamplerConfig pc = scfg;
        pc.seed = mix_seed(scfg.seed, static_cast<uint64_t>(i));
        try {
            Image out = edit_image(ckpt, adapter, pairs[i].src, pairs[i].instruction, pc);
            metrics[i] = detail::score_pair(pairs[i], out);
        } catch (const error& e) {
            metrics[i].id = pairs[i].id;
            metrics[i].ok = false;
            metrics[i].error = e.what();
        }
    }

    nlohmann::json report;
    report["sampler"] = {{"steps", scfg.steps},
                         {"seed", scfg.seed},
                         {"pos_row_offset", scfg.pos_row_offset}};
    report["model_stage"] = ckpt.config.stage_tag;
    report["adapter"] =
        adapter ? nlohmann::json{{"stage", adapter->stage}, {"rank", adapter->rank}}
                : nlohmann::json(nullptr);

    double bg = 0, ed = 0, ps = 0, id_ed = 0;
    int ok = 0;
    nlohmann::json rows = nlohmann::json::array();
    for (size_t i = 0; i < metrics.size(); ++i) {
        const auto& m = metrics[i];
        nlohmann::json row{{"id", m.id}, {"ok", m.ok}};
        if (m.ok) {
            row["bg_mse"] = m.bg_mse;
            row["edit_mse"] = m.edit_mse;
            row["bg_psnr"] = m.bg_psnr;
            bg += m.bg_mse;
            ed += m.edit_mse;
            ps += m.bg_psnr;
            ++ok;
        } else {
            row["error"] = m.error;
        }
        // identity editor: output = src
        auto idm = detail::score_pair(pairs[i], pairs[i].src);
        id_ed += idm.edit_mse;
        rows.push_back(std::move(row));
    }
    report["pairs"] = std::move(rows);
    if (ok == 0) throw data_error("every evaluation pair failed");
    report["aggregate"] = {{"bg_mse", bg / ok},
                           {"edit_mse", ed / ok},
                           {"bg_psnr", ps / ok},
                           {"pairs_ok", ok},
                           {"pairs_total", static_cast<int>(pairs.size())}};
    report["identity_baseline"] = {{"bg_mse", 0.0},
                                   {"edit_mse", id_ed / static_cast<double>(pairs.size())},
                                   {"bg_psnr", 99.0}};
    return report;
}

/// Modes: no-pe-clone (offset latent positions in training and sampling),
/// no-pretrain (EditLoRA from a random base), no-editlora (merged base only).
/// Both arms share the corpus and seeds; returns both reports plus deltas.
inline nlohmann::json ablate(const std::string& mode, const ModelConfig& mcfg,
                             const TrainConfig& omni_tc, const TrainConfig& edit_tc,
                             const std::vector<EditPair>& general_corpus,
                             const std::vector<EditPair>& style_corpus,
                             const std::vector<EditPair>& eval_corpus,
                             const SamplerConfig& scfg) {
    if (mode != "no-pe-clone" && mode != "no-pretrain" && mode != "no-editlora")
        throw config_error("unknown ablation mode: " + mode);
    Vocab vocab = dataset_vocab();
    Checkpoint fresh = make_fresh_checkpoint(mcfg, vocab, omni_tc.seed);
    TrainResult omni = train_stage(omni_tc, fresh, general_corpus);
    TrainResult full_edit = train_stage(edit_tc, omni.checkpoint, style_corpus);
    nlohmann::json full = evaluate(omni.checkpoint, &full_edit.adapter, eval_corpus, scfg);

    nlohmann::json ablated;
    if (mode == "no-pe-clone") {
        int offset = eval_corpus[0].src.shape[0] / mcfg.patch;  // disjoint grid rows
        TrainResult ab = train_stage(edit_tc, omni.checkpoint, style_corpus, 0, offset);
        SamplerConfig ab_scfg = scfg;
        ab_scfg.pos_row_offset = offset;
        ablated = evaluate(omni.checkpoint, &ab.adapter, eval_corpus, ab_scfg);
    } else if (mode == "no-pretrain") {
        TrainConfig tc = edit_tc;
        tc.allow_unmerged_base = true;
        TrainResult ab = train_stage(tc, fresh, style_corpus);
        ablated = evaluate(fresh, &ab.adapter, eval_corpus, scfg);
    } else {  // no-editlora
        ablated = evaluate(omni.checkpoint, nullptr, eval_corpus, scfg);
    }

    nlohmann::json out;
    out["mode"] = mode;
    out["full"] = full;
    out["ablated"] = ablated;
    out["delta"] = {
        {"bg_mse", ablated["aggregate"]["bg_mse"].get<double>() -
                       full["aggregate"]["bg_mse"].get<double>()},
        {"edit_mse", ablated["aggregate"]["edit_mse"].get<double>() -
                         full["aggregate"]["edit_mse"].get<double>()},
    };
    return out;
}

}  // namespace photodoodle
