#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "photodoodle/errors.hpp"
#include "photodoodle/tensor.hpp"
#include "photodoodle/tokenseq.hpp"

namespace photodoodle {

/// 2D axial rotary embedding: half of each head's rotary pairs encode the row
/// coordinate i, the other half the column coordinate j.
struct RopeTable {
    int head_dim;
    double theta0;
    std::vector<double> freqs;  // per-axis frequencies, head_dim/4 entries

    RopeTable(int head_dim_, double theta0_ = 10000.0) : head_dim(head_dim_), theta0(theta0_) {
        if (head_dim <= 0 || head_dim % 4 != 0)
            throw config_error("rope head_dim must be a positive multiple of 4, got " +
                               std::to_string(head_dim));
        int axis_pairs = head_dim / 4;
        freqs.resize(axis_pairs);
        for (int k = 0; k < axis_pairs; ++k)
            freqs[k] = std::pow(theta0, -2.0 * k / (head_dim / 2.0));
    }

    /// rotation angle of pair slot p (0..head_dim/2-1) for a token at (i,j)
    double angle(int p, Pos pos) const {
        int axis_pairs = head_dim / 4;
        return p < axis_pairs ? pos.first * freqs[p] : pos.second * freqs[p - axis_pairs];
    }
};

/// rotate one head_dim vector in place-free fashion; pairs are consecutive slots
template <typename T>
Tensor<T> rope_rotate(const RopeTable& table, const Tensor<T>& vec, Pos pos) {
    if (static_cast<int>(vec.data.size()) != table.head_dim)
        throw shape_error("rope_rotate: vector length " + std::to_string(vec.data.size()) +
                          " != head_dim " + std::to_string(table.head_dim));
    Tensor<T> out = vec;
    for (int p = 0; p < table.head_dim / 2; ++p) {
        double a = table.angle(p, pos);
        T c = static_cast<T>(std::cos(a)), s = static_cast<T>(std::sin(a));
        T x0 = vec.data[2 * p], x1 = vec.data[2 * p + 1];
        out.data[2 * p] = c * x0 - s * x1;
        out.data[2 * p + 1] = s * x0 + c * x1;
    }
    return out;
}

/// per-pair cos/sin tables for a whole [L×d] sequence with `heads` heads,
/// consumable by Tape::rotate_pairs
template <typename T>
std::pair<std::shared_ptr<std::vector<T>>, std::shared_ptr<std::vector<T>>> rope_tables(
    const RopeTable& table, const std::vector<Pos>& positions, int d, int heads) {
    if (heads <= 0 || d % heads != 0)
        throw config_error("token dim " + std::to_string(d) + " not divisible by heads " +
                           std::to_string(heads));
    int hd = d / heads;
    if (hd != table.head_dim) throw config_error("rope table head_dim mismatch");
    size_t pairs_per_tok = static_cast<size_t>(d) / 2;
    auto cos_t = std::make_shared<std::vector<T>>(positions.size() * pairs_per_tok);
    auto sin_t = std::make_shared<std::vector<T>>(positions.size() * pairs_per_tok);
    for (size_t i = 0; i < positions.size(); ++i) {
        for (int h = 0; h < heads; ++h)
            for (int p = 0; p < hd / 2; ++p) {
                double a = table.angle(p, positions[i]);
                size_t idx = i * pairs_per_tok + static_cast<size_t>(h) * (hd / 2) + p;
                (*cos_t)[idx] = static_cast<T>(std::cos(a));
                (*sin_t)[idx] = static_cast<T>(std::sin(a));
            }
    }
    return {cos_t, sin_t};
}

/// rotate every token of a sequence per its stored position; positions unchanged
template <typename T>
TokenSeq<T> apply_rope(const RopeTable& table, const TokenSeq<T>& seq, int heads) {
    seq.validate();
    int d = seq.dim();
    auto [cos_t, sin_t] = rope_tables<T>(table, seq.positions, d, heads);
    TokenSeq<T> out = seq;
    size_t pairs = seq.tokens.data.size() / 2;
    for (size_t p = 0; p < pairs; ++p) {
        T c = (*cos_t)[p], s = (*sin_t)[p];
        T x0 = seq.tokens.data[2 * p], x1 = seq.tokens.data[2 * p + 1];
        out.tokens.data[2 * p] = c * x0 - s * x1;
        out.tokens.data[2 * p + 1] = s * x0 + c * x1;
    }
    return out;
}

/// PE Cloning: latent tokens take the exact positions of the condition grid
inline std::pair<std::vector<Pos>, std::vector<Pos>> clone_positions(int rows, int cols) {
    if (rows < 1 || cols < 1) throw shape_error("clone_positions: zero-sized grid");
    std::vector<Pos> grid;
    grid.reserve(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) grid.emplace_back(i, j);
    return {grid, grid};
}

}  // namespace photodoodle
