#pragma once

#include <utility>
#include <vector>

#include "photodoodle/errors.hpp"
#include "photodoodle/tensor.hpp"

namespace photodoodle {

/// integer grid coordinate (row, col)
using Pos = std::pair<int, int>;

enum class TokenRole { Latent, ImageCond, Text };

/// A sequence of d-dim tokens with their 2D positions. Text tokens keep their
/// vocab ids around so training can differentiate through the embedding table.
template <typename T>
struct TokenSeq {
    Tensor<T> tokens;            // [L×d]
    std::vector<Pos> positions;  // length L
    TokenRole role = TokenRole::Latent;
    std::vector<int> ids;        // text only; empty otherwise

    int count() const { return tokens.rank() == 2 ? tokens.rows() : 0; }
    int dim() const { return tokens.rank() == 2 ? tokens.cols() : 0; }

    void validate() const {
        if (tokens.rank() != 2)
            throw shape_error("TokenSeq tokens must be [Lxd]");
        if (static_cast<int>(positions.size()) != tokens.rows())
            throw shape_error("TokenSeq position list length " +
                              std::to_string(positions.size()) + " != token count " +
                              std::to_string(tokens.rows()));
    }
};

}  // namespace photodoodle
