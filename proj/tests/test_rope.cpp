#include <cmath>

#include "doctest.h"
#include "photodoodle/rng.hpp"
#include "photodoodle/rope.hpp"

using namespace photodoodle;

namespace {
Tensor<double> random_vec(int n, Rng& rng) {
    Tensor<double> t({1, n});
    for (auto& v : t.data) v = rng.next_double() * 2.0 - 1.0;
    return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double norm(const Tensor<double>& a) { return std::sqrt(dot(a, a)); }
}  // namespace

TEST_CASE("head_dim must be a positive multiple of 4") {
    CHECK_THROWS_AS(RopeTable(6), config_error);
    CHECK_THROWS_AS(RopeTable(0), config_error);
    CHECK_NOTHROW(RopeTable(8));
}

TEST_CASE("position (0,0) is the identity map") {
    RopeTable table(8);
    Rng rng(1);
    auto v = random_vec(8, rng);
    auto out = rope_rotate(table, v, {0, 0});
    for (size_t i = 0; i < v.data.size(); ++i)
        CHECK(std::abs(out.data[i] - v.data[i]) < 1e-12);
}

TEST_CASE("rotation preserves norm") {
    RopeTable table(8);
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        auto v = random_vec(8, rng);
        Pos pos{static_cast<int>(rng.next_below(32)), static_cast<int>(rng.next_below(32))};
        auto out = rope_rotate(table, v, pos);
        CHECK(std::abs(norm(out) - norm(v)) < 1e-6);
    }
}

TEST_CASE("head_dim=4 axis split against direct 2x2 rotation oracle") {
    RopeTable table(4, 10000.0);
    Tensor<double> v = Tensor<double>::row({1, 0, 1, 0});
    auto out = rope_rotate(table, v, {1, 0});
    // pair 0 encodes i with omega_0 = 1: rotation by 1 rad
    CHECK(out.data[0] == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(out.data[1] == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
    // pair 1 encodes j = 0: unchanged
    CHECK(out.data[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.data[3] == doctest::Approx(0.0));

    auto out2 = rope_rotate(table, v, {0, 3});
    CHECK(out2.data[0] == doctest::Approx(1.0));
    CHECK(out2.data[2] == doctest::Approx(std::cos(3.0)).epsilon(1e-12));
    CHECK(out2.data[3] == doctest::Approx(std::sin(3.0)).epsilon(1e-12));
}

TEST_CASE("relative-position identity per axis") {
    RopeTable table(8);
    Rng rng(3);
    for (int t = 0; t < 1000; ++t) {
        auto q = random_vec(8, rng);
        auto k = random_vec(8, rng);
        int a = static_cast<int>(rng.next_below(16));
        int b = static_cast<int>(rng.next_below(16));
        bool axis_i = (t % 2) == 0;
        Pos pa = axis_i ? Pos{a, 0} : Pos{0, a};
        Pos pb = axis_i ? Pos{b, 0} : Pos{0, b};
        Pos rel = axis_i ? Pos{b - a, 0} : Pos{0, b - a};
        double lhs = dot(rope_rotate(table, q, pa), rope_rotate(table, k, pb));
        double rhs = dot(q, rope_rotate(table, k, rel));
        CHECK(std::abs(lhs - rhs) < 1e-10);
    }
}

TEST_CASE("co-located tokens: rotary phases cancel in the dot product") {
    RopeTable table(8);
    Rng rng(4);
    for (int t = 0; t < 1000; ++t) {
        auto q = random_vec(8, rng);
        auto k = random_vec(8, rng);
        Pos pos{static_cast<int>(rng.next_below(16)), static_cast<int>(rng.next_below(16))};
        double rotated = dot(rope_rotate(table, q, pos), rope_rotate(table, k, pos));
        CHECK(std::abs(rotated - dot(q, k)) < 1e-10);
    }
}

TEST_CASE("apply_rope leaves text sequences (all positions (0,0)) unchanged") {
    RopeTable table(4);
    Rng rng(5);
    TokenSeq<double> seq;
    seq.role = TokenRole::Text;
    seq.tokens = Tensor<double>::gaussian({3, 8}, rng);
    seq.positions.assign(3, Pos{0, 0});
    auto out = apply_rope(table, seq, 2);
    CHECK(out.tokens.data == seq.tokens.data);
    CHECK(out.positions == seq.positions);
}

TEST_CASE("co-located equal tokens rotate to equal values") {
    RopeTable table(4);
    Rng rng(6);
    Tensor<double> row = Tensor<double>::gaussian({1, 8}, rng);
    TokenSeq<double> seq;
    seq.tokens = Tensor<double>({2, 8});
    for (int j = 0; j < 8; ++j) {
        seq.tokens.at(0, j) = row.data[j];
        seq.tokens.at(1, j) = row.data[j];
    }
    seq.positions = {{2, 3}, {2, 3}};
    auto out = apply_rope(table, seq, 2);
    for (int j = 0; j < 8; ++j) CHECK(out.tokens.at(0, j) == out.tokens.at(1, j));
}

TEST_CASE("clone_positions enumerates the grid row-major for both sequences") {
    auto [lat1, cond1] = clone_positions(1, 1);
    CHECK(lat1 == std::vector<Pos>{{0, 0}});
    CHECK(cond1 == lat1);

    auto [lat2, cond2] = clone_positions(2, 2);
    CHECK(lat2 == std::vector<Pos>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    CHECK(cond2 == lat2);

    auto [lat3, cond3] = clone_positions(3, 5);
    CHECK(lat3.size() == 15);
    CHECK(lat3 == cond3);

    CHECK_THROWS_AS(clone_positions(0, 3), shape_error);
}
