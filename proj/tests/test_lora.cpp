#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "photodoodle/lora.hpp"
#include "photodoodle/rng.hpp"

using namespace photodoodle;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.mlp_ratio = 4;
    cfg.vocab_size = 4;
    cfg.max_text_len = 2;
    cfg.patch = 1;
    cfg.channels = 3;
    return cfg;
}

template <typename T>
VelocityInputs<T> tiny_inputs(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    VelocityInputs<T> in;
    in.z = Tensor<T>::gaussian({2, cfg.d}, rng);
    in.cond = Tensor<T>::gaussian({2, cfg.d}, rng);
    in.z_pos = {{0, 0}, {0, 1}};
    in.cond_pos = in.z_pos;
    in.text_ids = {2, 3};
    in.t = T(0.5);
    return in;
}

// give the adapter something to say: random B entries
template <typename T>
void randomize_b(LoraAdapter<T>& adapter, uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, d] : adapter.entries)
        for (auto& v : d.B.data) v = static_cast<T>(rng.next_gaussian()) * T(0.1);
}

// make a fresh model non-degenerate
template <typename T>
void perturb(ParamMap<T>& params, uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params)
        if (name.find("mod.") != std::string::npos || name.find("final.proj") != std::string::npos)
            for (auto& v : t.data) v = static_cast<T>(rng.next_gaussian()) * T(0.5);
}

}  // namespace

TEST_CASE("fresh adapter: B zero, A seeded, shapes follow the rank rule") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 1);
    auto targets = default_lora_targets(cfg);
    CHECK(targets.size() == 6);

    auto a1 = create_adapter(params, targets, 2, 2.0f, 42, "omni", 7);
    CHECK(a1.rank == 2);
    CHECK(a1.scale() == 1.0f);
    CHECK(a1.stage == "omni");
    CHECK(a1.base_fingerprint == 7);
    for (const auto& [name, d] : a1.entries) {
        const auto& w = params.at(name);
        CHECK(d.A.shape == std::vector<int>{2, w.cols()});
        CHECK(d.B.shape == std::vector<int>{w.rows(), 2});
        for (float v : d.B.data) CHECK(v == 0.0f);
    }

    auto a2 = create_adapter(params, targets, 2, 2.0f, 42, "omni", 7);
    for (const auto& [name, d] : a1.entries) CHECK(d.A.data == a2.entries.at(name).A.data);
}

TEST_CASE("rank and target validation") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 1);
    // r must stay strictly below min(out, in) = 8 for the q projection
    CHECK_THROWS_AS(create_adapter(params, {"block0.attn.q.w"}, 8, 8.0f, 1), config_error);
    CHECK_NOTHROW(create_adapter(params, {"block0.attn.q.w"}, 7, 7.0f, 1));
    CHECK_THROWS_AS(create_adapter(params, {"no.such.layer"}, 2, 2.0f, 1), config_error);
    CHECK_THROWS_AS(create_adapter(params, {}, 2, 2.0f, 1), config_error);

    // r=1 on a 2x2 layer: A is 1x2, B is 2x1
    ParamMap<float> toy;
    toy["w"] = Tensor<float>::matrix({{1, 0}, {0, 1}});
    auto a = create_adapter(toy, {"w"}, 1, 1.0f, 3);
    CHECK(a.entries.at("w").A.shape == std::vector<int>{1, 2});
    CHECK(a.entries.at("w").B.shape == std::vector<int>{2, 1});
}

TEST_CASE("lora_forward hand oracle") {
    Tensor<double> w0 = Tensor<double>::matrix({{1, 0}, {0, 1}});
    Tensor<double> x = Tensor<double>::row({3, 4});

    LoraDelta<double> d;
    d.A = Tensor<double>::matrix({{1, 0}});
    d.B = Tensor<double>::matrix({{2}, {0}});
    d.scale = 1.0;
    // W0 x = (3,4); B A x = (2*3, 0) -> (9, 4)
    auto y = lora_forward(d, w0, x);
    CHECK(y.data[0] == doctest::Approx(9.0));
    CHECK(y.data[1] == doctest::Approx(4.0));

    d.B = Tensor<double>::zeros({2, 1});
    auto y0 = lora_forward(d, w0, x);
    CHECK(y0.data[0] == 3.0);
    CHECK(y0.data[1] == 4.0);

    d.B = Tensor<double>::matrix({{5}, {5}});
    d.scale = 0.0;
    auto ys = lora_forward(d, w0, x);
    CHECK(ys.data[0] == 3.0);
    CHECK(ys.data[1] == 4.0);

    Tensor<double> bad = Tensor<double>::row({1, 2, 3});
    CHECK_THROWS_AS(lora_forward(d, w0, bad), shape_error);
}

TEST_CASE("zero-init adapter leaves the full model output bitwise unchanged") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 5);
    perturb(params, 6);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 9);
    auto in = tiny_inputs<float>(cfg, 10);

    TokenSeq<float> z{in.z, in.z_pos, TokenRole::Latent, {}};
    TokenSeq<float> ci{in.cond, in.cond_pos, TokenRole::ImageCond, {}};
    TokenSeq<float> ct;
    ct.role = TokenRole::Text;
    ct.ids = in.text_ids;
    ct.tokens = Tensor<float>({2, cfg.d});
    ct.positions.assign(2, Pos{0, 0});

    auto base = forward_velocity<float>(cfg, params, nullptr, z, 0.5f, ci, ct);
    auto with = forward_velocity<float>(cfg, params, &adapter.entries, z, 0.5f, ci, ct);
    CHECK(base.data == with.data);
}

TEST_CASE("merging a fresh adapter leaves params bitwise unchanged") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 5);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 9);
    auto merged = merge(params, adapter);
    for (const auto& [name, t] : params) CHECK(merged.at(name).data == t.data);
}

TEST_CASE("adapter-active forward equals merged-weights forward") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 11);
    perturb(params, 12);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 13);
    randomize_b(adapter, 14);
    auto merged = merge(params, adapter);

    // layer level, 100 random inputs
    Rng rng(15);
    const auto& name = "block0.attn.q.w";
    const auto& d = adapter.entries.at(name);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<float> x = Tensor<float>::gaussian({1, cfg.d}, rng);
        auto active = lora_forward(d, params.at(name), x);
        // merged weight applied plainly
        const auto& wm = merged.at(name);
        for (int o = 0; o < wm.rows(); ++o) {
            float s = 0;
            for (int c = 0; c < wm.cols(); ++c) s += wm.at(o, c) * x.data[c];
            float denom = std::abs(active.data[o]) + std::abs(s) + 1e-6f;
            CHECK(std::abs(active.data[o] - s) / denom < 1e-5f);
        }
    }

    // full model
    for (uint64_t seed = 20; seed < 25; ++seed) {
        auto in = tiny_inputs<float>(cfg, seed);
        TokenSeq<float> z{in.z, in.z_pos, TokenRole::Latent, {}};
        TokenSeq<float> ci{in.cond, in.cond_pos, TokenRole::ImageCond, {}};
        TokenSeq<float> ct;
        ct.role = TokenRole::Text;
        ct.ids = in.text_ids;
        ct.tokens = Tensor<float>({2, cfg.d});
        ct.positions.assign(2, Pos{0, 0});
        auto active = forward_velocity<float>(cfg, params, &adapter.entries, z, 0.5f, ci, ct);
        auto plain = forward_velocity<float>(cfg, merged, nullptr, z, 0.5f, ci, ct);
        for (size_t i = 0; i < active.data.size(); ++i) {
            float denom = std::abs(active.data[i]) + std::abs(plain.data[i]) + 1e-6f;
            CHECK(std::abs(active.data[i] - plain.data[i]) / denom < 1e-5f);
        }
    }
}

TEST_CASE("merge then subtract scale*B*A recovers the original weight") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 31);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 4.0, 32);
    randomize_b(adapter, 33);
    auto merged = merge(params, adapter);
    for (const auto& [name, d] : adapter.entries) {
        const auto& w0 = params.at(name);
        const auto& wm = merged.at(name);
        for (int i = 0; i < w0.rows(); ++i)
            for (int j = 0; j < w0.cols(); ++j) {
                double s = 0;
                for (int k = 0; k < adapter.rank; ++k) s += d.B.at(i, k) * d.A.at(k, j);
                CHECK(std::abs(wm.at(i, j) - d.scale * s - w0.at(i, j)) < 1e-6);
            }
    }
}

TEST_CASE("merge order does not change the final weights") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 41);
    auto a1 = create_adapter(params, default_lora_targets(cfg), 2, 2.0, 42);
    auto a2 = create_adapter(params, default_lora_targets(cfg), 3, 3.0, 43);
    randomize_b(a1, 44);
    randomize_b(a2, 45);
    auto m12 = merge(merge(params, a1), a2);
    auto m21 = merge(merge(params, a2), a1);
    for (const auto& [name, t] : m12)
        for (size_t i = 0; i < t.data.size(); ++i)
            CHECK(std::abs(t.data[i] - m21.at(name).data[i]) < 1e-12);
}

TEST_CASE("frozen base: only adapter matrices receive gradients") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 51);
    perturb(params, 52);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0, 53);
    randomize_b(adapter, 54);
    auto in = tiny_inputs<double>(cfg, 55);

    Tape<double> tape;
    auto out = build_velocity<double>(tape, cfg, params, &adapter.entries,
                                      [](const std::string&) { return false; },
                                      /*lora_trainable=*/true, in);
    Rng rng(56);
    Tensor<double> target = Tensor<double>::gaussian({2, cfg.d}, rng);
    auto loss = tape.mean_sq_diff(out, tape.leaf(target));
    tape.backward(loss);
    auto grads = tape.grads();

    double total = 0;
    for (const auto& [name, g] : grads) {
        CHECK(name.rfind("lora:", 0) == 0);  // no base parameter appears
        for (double v : g.data) total += std::abs(v);
    }
    CHECK(grads.size() == 12);  // A and B for each of the 6 targets
    CHECK(total > 0.0);
    // with nonzero B both A and B see gradient on at least one target
    CHECK(grads.at("lora:block0.attn.q.w:A").data != Tensor<double>::zeros({2, 8}).data);
    CHECK(grads.at("lora:block0.attn.q.w:B").data != Tensor<double>::zeros({8, 2}).data);
}

TEST_CASE("adapter gradients match finite differences through the full model") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 61);
    perturb(params, 62);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0, 63);
    randomize_b(adapter, 64);
    auto in = tiny_inputs<double>(cfg, 65);
    Rng rng(66);
    Tensor<double> target = Tensor<double>::gaussian({2, cfg.d}, rng);

    auto eval = [&](const LoraDeltas<double>& deltas) {
        Tape<double> tape;
        auto out = build_velocity<double>(tape, cfg, params, &deltas,
                                          [](const std::string&) { return false; }, true, in);
        auto loss = tape.mean_sq_diff(out, tape.leaf(target));
        return tape.value(loss).data[0];
    };

    Tape<double> tape;
    auto out = build_velocity<double>(tape, cfg, params, &adapter.entries,
                                      [](const std::string&) { return false; }, true, in);
    auto loss = tape.mean_sq_diff(out, tape.leaf(target));
    tape.backward(loss);
    auto grads = tape.grads();

    const double h = 3e-4;
    for (const auto& which : {'A', 'B'}) {
        std::string key = std::string("lora:block0.mlp.fc1.w:") + which;
        const auto& g = grads.at(key);
        // spot-check a handful of coordinates
        for (size_t i = 0; i < g.data.size(); i += g.data.size() / 7 + 1) {
            auto d1 = adapter.entries, d2 = adapter.entries;
            auto& t1 = which == 'A' ? d1.at("block0.mlp.fc1.w").A : d1.at("block0.mlp.fc1.w").B;
            auto& t2 = which == 'A' ? d2.at("block0.mlp.fc1.w").A : d2.at("block0.mlp.fc1.w").B;
            t1.data[i] += h;
            t2.data[i] -= h;
            double fd = (eval(d1) - eval(d2)) / (2 * h);
            double denom = std::abs(fd) + std::abs(g.data[i]) + 1e-9;
            CHECK(std::abs(fd - g.data[i]) / denom < 1e-3);
        }
    }
}

TEST_CASE("adapter container round trip is lossless") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 71);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 72, "edit", 0xDEADBEEFCAFEF00DULL);
    randomize_b(adapter, 73);
    save_adapter("adapter_test.bin", adapter);
    auto back = load_adapter("adapter_test.bin");
    CHECK(back.rank == adapter.rank);
    CHECK(back.alpha == adapter.alpha);
    CHECK(back.stage == "edit");
    CHECK(back.base_fingerprint == adapter.base_fingerprint);
    REQUIRE(back.entries.size() == adapter.entries.size());
    for (const auto& [name, d] : adapter.entries) {
        CHECK(back.entries.at(name).A.data == d.A.data);
        CHECK(back.entries.at(name).B.data == d.B.data);
        CHECK(back.entries.at(name).scale == d.scale);
    }
}

TEST_CASE("malformed adapter files are rejected") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 81);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 82);
    save_adapter("adapter_trunc.bin", adapter);

    // truncate
    {
        std::ifstream is("adapter_trunc.bin", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os("adapter_trunc.bin", std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(load_adapter("adapter_trunc.bin"), data_error);

    std::ofstream("adapter_bad.bin", std::ios::binary) << "NOTLORA!rest";
    CHECK_THROWS_AS(load_adapter("adapter_bad.bin"), data_error);
    CHECK_THROWS_AS(load_adapter("no_such_adapter.bin"), data_error);
}

TEST_CASE("fingerprint mismatch blocks the merge") {
    auto cfg = tiny_config();
    auto params = init_params<float>(cfg, 91);
    auto adapter = create_adapter(params, default_lora_targets(cfg), 2, 2.0f, 92, "omni", 111);
    CHECK_NOTHROW(merge(params, adapter, 111));
    CHECK_THROWS_AS(merge(params, adapter, 222), config_error);
}
