#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "photodoodle/pipeline.hpp"

using namespace photodoodle;
namespace fs = std::filesystem;

namespace {

// small-but-real geometry: 8x8 images, patch 2 -> 16 latent tokens of dim 16
ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.mlp_ratio = 2;
    cfg.patch = 2;
    cfg.channels = 3;
    cfg.codec_seed = 7;
    return cfg;
}

std::vector<EditPair> mini_corpus(int style, int count, uint64_t seed) {
    std::vector<EditPair> pairs;
    for (int i = 0; i < count; ++i) {
        auto p = gen_pair(style, mix_seed(seed, static_cast<uint64_t>(i)), 8, 8);
        p.id = "m" + std::to_string(i);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

TrainConfig mini_train(const std::string& stage, int steps, int batch, int rank) {
    TrainConfig tc = default_train_config(stage);
    tc.steps = steps;
    tc.batch = batch;
    tc.rank = rank;
    tc.alpha = rank;
    tc.seed = 5;
    return tc;
}

uint64_t params_checksum(const ParamMap<float>& params) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : params) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return h;
}

}  // namespace

TEST_CASE("train config parsing: defaults per stage, unknown keys rejected") {
    auto omni = train_config_from_json(nlohmann::json::object(), "omni");
    CHECK(omni.steps == 5000);
    CHECK(omni.batch == 8);
    CHECK(omni.rank == 16);
    CHECK(omni.lr == 1e-4);
    auto edit = train_config_from_json(nlohmann::json::object(), "edit");
    CHECK(edit.steps == 2000);
    CHECK(edit.batch == 2);
    CHECK(edit.rank == 4);

    CHECK_THROWS_AS(train_config_from_json({{"leraning_rate", 1e-3}}, "omni"), config_error);
    CHECK_THROWS_AS(train_config_from_json({{"stage", "warmup"}}, "omni"), config_error);
    CHECK_THROWS_AS(train_config_from_json({{"batch", 0}}, "omni"), config_error);
}

TEST_CASE("adam single-step oracle") {
    Adam opt(0.1, 0.9, 0.999, 1e-8);
    Tensor<float> p = Tensor<float>::zeros({1, 1});
    Tensor<float> g = Tensor<float>::full({1, 1}, 1.0f);
    opt.begin_step();
    opt.update("p", p, g);
    // bias-corrected m_hat = v_hat = 1, so the step is -lr/(1 + eps)
    CHECK(p.data[0] == doctest::Approx(-0.1).epsilon(1e-6));

    // second identical step keeps moving the same way
    opt.begin_step();
    opt.update("p", p, g);
    CHECK(p.data[0] < -0.19f);
}

TEST_CASE("zero training steps leave weights unchanged") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    auto corpus = mini_corpus(2, 4, 21);
    auto res = train_stage(mini_train("omni", 0, 2, 4), base, corpus);
    CHECK(res.checkpoint.config.stage_tag == "omni-merged");
    CHECK(params_checksum(res.checkpoint.params) == params_checksum(base.params));
    CHECK(res.loss_log.empty());
}

TEST_CASE("edit stage demands an omni-merged base unless overridden") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    auto corpus = mini_corpus(2, 4, 22);
    CHECK_THROWS_AS(train_stage(mini_train("edit", 1, 1, 2), base, corpus), config_error);
    auto tc = mini_train("edit", 1, 1, 2);
    tc.allow_unmerged_base = true;
    CHECK_NOTHROW(train_stage(tc, base, corpus));
}

TEST_CASE("edit stage freezes the base bit-for-bit and trains only the adapter") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    auto omni = train_stage(mini_train("omni", 10, 2, 4), base, mini_corpus(1, 4, 23));
    uint64_t before = params_checksum(omni.checkpoint.params);

    auto res = train_stage(mini_train("edit", 10, 2, 2), omni.checkpoint, mini_corpus(2, 4, 24));
    CHECK(params_checksum(res.checkpoint.params) == before);
    CHECK(res.adapter.stage == "edit");
    double bsum = 0;
    for (const auto& [name, d] : res.adapter.entries)
        for (float v : d.B.data) bsum += std::abs(v);
    CHECK(bsum > 0.0);  // the adapter actually moved
}

TEST_CASE("edit stage rejects mixed-style corpora") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    base.config.stage_tag = "omni-merged";
    auto mixed = mini_corpus(1, 2, 25);
    auto more = mini_corpus(2, 2, 26);
    mixed.insert(mixed.end(), more.begin(), more.end());
    CHECK_THROWS_AS(train_stage(mini_train("edit", 1, 1, 2), base, mixed), config_error);
}

TEST_CASE("short training run reduces the loss") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    auto tc = mini_train("omni", 400, 4, 4);
    tc.lr = 1e-3;  // the mini model needs a hotter rate to move in 400 steps
    auto res = train_stage(tc, base, mini_corpus(2, 4, 27));
    REQUIRE(res.loss_log.size() == 400);
    double head = std::accumulate(res.loss_log.begin(), res.loss_log.begin() + 20, 0.0) / 20;
    double tail = std::accumulate(res.loss_log.end() - 20, res.loss_log.end(), 0.0) / 20;
    CHECK(tail < head);
    CHECK(tail < 0.6 * head);
}

TEST_CASE("training is deterministic") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    auto corpus = mini_corpus(2, 4, 28);
    auto a = train_stage(mini_train("omni", 12, 2, 4), base, corpus);
    auto b = train_stage(mini_train("omni", 12, 2, 4), base, corpus);
    CHECK(a.loss_log == b.loss_log);
    CHECK(params_checksum(a.checkpoint.params) == params_checksum(b.checkpoint.params));
}

TEST_CASE("non-finite loss aborts with the step number") {
    auto cfg = mini_config();
    auto base = make_fresh_checkpoint(cfg, dataset_vocab(), 3);
    base.params.at("embed").data[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        train_stage(mini_train("omni", 3, 1, 2), base, mini_corpus(2, 2, 29));
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("zero-init model edits to the decoded noise draw") {
    auto cfg = mini_config();
    auto ckpt = make_fresh_checkpoint(cfg, dataset_vocab(), 4);  // exact zero map
    auto pair = gen_pair(2, 31, 8, 8);
    SamplerConfig scfg;
    scfg.steps = 5;
    scfg.seed = 77;
    Image out = edit_image(ckpt, nullptr, pair.src, pair.instruction, scfg);

    // v == 0 everywhere, so the sampler returns its initial noise untouched
    PatchCodec<float> codec(cfg.patch, cfg.channels, cfg.codec_seed, cfg.d);
    auto c_img = codec.encode_image(pair.src);
    Rng probe(scfg.seed);
    TokenSeq<float> z;
    z.tokens = Tensor<float>::gaussian({c_img.count(), c_img.dim()}, probe);
    z.positions = c_img.positions;
    Image expect = codec.decode_tokens(z);
    for (auto& v : expect.data) v = std::clamp(v, 0.0f, 1.0f);
    CHECK(out.data == expect.data);
}

TEST_CASE("edit_image is deterministic and validates geometry") {
    auto cfg = mini_config();
    auto ckpt = make_fresh_checkpoint(cfg, dataset_vocab(), 4);
    auto pair = gen_pair(3, 32, 8, 8);
    SamplerConfig scfg;
    scfg.steps = 3;
    scfg.seed = 11;
    auto a = edit_image(ckpt, nullptr, pair.src, pair.instruction, scfg);
    auto b = edit_image(ckpt, nullptr, pair.src, pair.instruction, scfg);
    CHECK(a.data == b.data);

    Image odd({9, 9, 3});
    CHECK_THROWS_AS(edit_image(ckpt, nullptr, odd, "x", scfg), config_error);
}

TEST_CASE("evaluate: aggregates are means; identity baseline matches a direct oracle") {
    auto cfg = mini_config();
    auto ckpt = make_fresh_checkpoint(cfg, dataset_vocab(), 4);
    auto pairs = mini_corpus(2, 3, 33);
    SamplerConfig scfg;
    scfg.steps = 3;
    scfg.seed = 55;
    auto report = evaluate(ckpt, nullptr, pairs, scfg);

    double bg = 0, ed = 0;
    for (const auto& row : report["pairs"]) {
        REQUIRE(row["ok"].get<bool>());
        bg += row["bg_mse"].get<double>();
        ed += row["edit_mse"].get<double>();
    }
    CHECK(report["aggregate"]["bg_mse"].get<double>() == doctest::Approx(bg / 3).epsilon(1e-12));
    CHECK(report["aggregate"]["edit_mse"].get<double>() == doctest::Approx(ed / 3).epsilon(1e-12));
    // noise output is far from the clean source
    CHECK(report["aggregate"]["bg_mse"].get<double>() > 0.05);

    // identity editor: bg 0, edit = masked mse(src, tgt)
    double id_ed = 0;
    for (const auto& p : pairs) {
        double s = 0;
        long n = 0;
        for (size_t i = 0; i < p.mask.data.size(); ++i)
            if (p.mask.data[i] > 0)
                for (int c = 0; c < 3; ++c) {
                    double d = p.src.data[i * 3 + c] - p.tgt.data[i * 3 + c];
                    s += d * d;
                    ++n;
                }
        id_ed += n ? s / n : 0;
    }
    CHECK(report["identity_baseline"]["bg_mse"].get<double>() == 0.0);
    CHECK(report["identity_baseline"]["edit_mse"].get<double>() ==
          doctest::Approx(id_ed / 3).epsilon(1e-9));

    // byte-identical reports on rerun
    auto again = evaluate(ckpt, nullptr, pairs, scfg);
    CHECK(report.dump() == again.dump());
}

TEST_CASE("mini two-stage pipeline plus ablation harness runs end to end") {
    auto cfg = mini_config();
    auto general = mini_corpus(1, 3, 40);
    {
        auto extra = mini_corpus(2, 3, 41);
        general.insert(general.end(), extra.begin(), extra.end());
    }
    auto style = mini_corpus(2, 4, 42);
    auto eval_pairs = mini_corpus(2, 2, 43);

    SamplerConfig scfg;
    scfg.steps = 4;
    scfg.seed = 3;
    auto rep = ablate("no-editlora", cfg, mini_train("omni", 8, 2, 4), mini_train("edit", 8, 2, 2),
                      general, style, eval_pairs, scfg);
    CHECK(rep["mode"] == "no-editlora");
    CHECK(rep["full"]["aggregate"].contains("bg_mse"));
    CHECK(rep["ablated"]["adapter"].is_null());
    CHECK(rep["delta"].contains("edit_mse"));

    CHECK_THROWS_AS(ablate("no-such-mode", cfg, mini_train("omni", 1, 1, 2),
                           mini_train("edit", 1, 1, 2), general, style, eval_pairs, scfg),
                    config_error);
}
