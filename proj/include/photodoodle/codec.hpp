#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "photodoodle/errors.hpp"
#include "photodoodle/image.hpp"
#include "photodoodle/rng.hpp"
#include "photodoodle/tensor.hpp"
#include "photodoodle/tokenseq.hpp"

namespace photodoodle {

/// Exactly invertible linear patch codec: tokens are orthonormal projections of
/// flattened p×p×C patches, so decode(encode(img)) == img up to fp rounding.
template <typename T = float>
class PatchCodec {
  public:
    /// token_dim defaults to the patch vector length p*p*C; a larger token_dim
    /// lifts patches into the model dimension via orthonormal columns, which
    /// keeps the round trip exact (P^T P = I).
    PatchCodec(int patch, int channels, uint64_t seed, int token_dim = 0)
        : patch_(patch), channels_(channels), seed_(seed),
          patch_dim_(patch * patch * channels), dim_(token_dim > 0 ? token_dim : patch_dim_) {
        if (patch <= 0 || channels <= 0) throw config_error("patch codec needs positive dims");
        if (dim_ < patch_dim_)
            throw config_error("codec token_dim " + std::to_string(dim_) +
                               " smaller than patch vector " + std::to_string(patch_dim_));
        proj_ = orthonormal_cols(dim_, patch_dim_, seed).template cast<T>();
    }

    int patch_size() const { return patch_; }
    int channels() const { return channels_; }
    int dim() const { return dim_; }
    int patch_dim() const { return patch_dim_; }
    uint64_t seed() const { return seed_; }
    const Tensor<T>& projection() const { return proj_; }

    TokenSeq<T> encode_image(const Tensor<T>& img) const {
        if (img.rank() != 3 || img.shape[2] != channels_)
            throw shape_error("encode_image expects [HxWxC], got " +
                              Tensor<T>::shape_str(img.shape));
        int h = img.shape[0], w = img.shape[1];
        if (h % patch_ != 0 || w % patch_ != 0)
            throw shape_error("image " + std::to_string(h) + "x" + std::to_string(w) +
                              " not divisible by patch size " + std::to_string(patch_));
        int gr = h / patch_, gc = w / patch_;
        TokenSeq<T> seq;
        seq.role = TokenRole::ImageCond;
        seq.tokens = Tensor<T>({gr * gc, dim_});
        std::vector<T> flat(patch_dim_);
        for (int gi = 0; gi < gr; ++gi)
            for (int gj = 0; gj < gc; ++gj) {
                int k = 0;
                for (int pi = 0; pi < patch_; ++pi)
                    for (int pj = 0; pj < patch_; ++pj)
                        for (int c = 0; c < channels_; ++c)
                            flat[k++] = img.data[((static_cast<size_t>(gi * patch_ + pi) * w) +
                                                  (gj * patch_ + pj)) * channels_ + c];
                T* tok = &seq.tokens.data[static_cast<size_t>(gi * gc + gj) * dim_];
                for (int r = 0; r < dim_; ++r) {
                    T s = T(0);
                    for (int cc = 0; cc < patch_dim_; ++cc)
                        s += proj_.data[static_cast<size_t>(r) * patch_dim_ + cc] * flat[cc];
                    tok[r] = s;
                }
                seq.positions.emplace_back(gi, gj);
            }
        return seq;
    }

    /// inverse of encode_image; token positions must form a full rectangular grid
    Tensor<T> decode_tokens(const TokenSeq<T>& seq) const {
        seq.validate();
        if (seq.dim() != dim_) throw shape_error("decode_tokens: token dim mismatch");
        int gr = 0, gc = 0;
        for (const Pos& p : seq.positions) {
            gr = std::max(gr, p.first + 1);
            gc = std::max(gc, p.second + 1);
        }
        std::vector<int> seen(static_cast<size_t>(gr) * gc, -1);
        for (size_t k = 0; k < seq.positions.size(); ++k) {
            const Pos& p = seq.positions[k];
            if (p.first < 0 || p.second < 0) throw data_error("negative token position");
            seen[static_cast<size_t>(p.first) * gc + p.second] = static_cast<int>(k);
        }
        for (int i = 0; i < gr; ++i)
            for (int j = 0; j < gc; ++j)
                if (seen[static_cast<size_t>(i) * gc + j] < 0)
                    throw data_error("token grid missing position (" + std::to_string(i) + "," +
                                     std::to_string(j) + ")");
        Tensor<T> img({gr * patch_, gc * patch_, channels_});
        int w = gc * patch_;
        std::vector<T> flat(patch_dim_);
        for (int gi = 0; gi < gr; ++gi)
            for (int gj = 0; gj < gc; ++gj) {
                const T* tok = &seq.tokens.data[
                    static_cast<size_t>(seen[static_cast<size_t>(gi) * gc + gj]) * dim_];
                // P^T · token
                for (int cc = 0; cc < patch_dim_; ++cc) {
                    T s = T(0);
                    for (int r = 0; r < dim_; ++r)
                        s += proj_.data[static_cast<size_t>(r) * patch_dim_ + cc] * tok[r];
                    flat[cc] = s;
                }
                int k = 0;
                for (int pi = 0; pi < patch_; ++pi)
                    for (int pj = 0; pj < patch_; ++pj)
                        for (int c = 0; c < channels_; ++c)
                            img.data[((static_cast<size_t>(gi * patch_ + pi) * w) +
                                      (gj * patch_ + pj)) * channels_ + c] = flat[k++];
            }
        return img;
    }

  private:
    int patch_, channels_;
    uint64_t seed_;
    int patch_dim_, dim_;
    Tensor<T> proj_;

    // P[m×k] with orthonormal columns: QR (modified Gram-Schmidt) of a seeded
    // Gaussian, computed in f64
    static Tensor<double> orthonormal_cols(int m, int k, uint64_t seed) {
        Rng rng(seed);
        Tensor<double> g = Tensor<double>::gaussian({k, m}, rng);
        for (int i = 0; i < k; ++i) {
            double* ri = &g.data[static_cast<size_t>(i) * m];
            for (int j = 0; j < i; ++j) {
                const double* rj = &g.data[static_cast<size_t>(j) * m];
                double dot = 0;
                for (int c = 0; c < m; ++c) dot += ri[c] * rj[c];
                for (int c = 0; c < m; ++c) ri[c] -= dot * rj[c];
            }
            double nrm = 0;
            for (int c = 0; c < m; ++c) nrm += ri[c] * ri[c];
            nrm = std::sqrt(nrm);
            if (nrm < 1e-8) throw numeric_error("degenerate row during orthonormalization");
            for (int c = 0; c < m; ++c) ri[c] /= nrm;
        }
        Tensor<double> p({m, k});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < k; ++j) p.at(i, j) = g.at(j, i);
        return p;
    }
};

/// whitespace-token vocabulary; PAD is always id 0, UNK id 1
class Vocab {
  public:
    Vocab(std::vector<std::string> words, int max_len) : words_(std::move(words)), max_len_(max_len) {
        if (words_.size() < 2 || words_[0] != "<pad>" || words_[1] != "<unk>")
            throw config_error("vocab must start with <pad>, <unk>");
        if (words_.size() > 256) throw config_error("vocab larger than 256 entries");
        if (max_len_ < 1) throw config_error("vocab max instruction length must be >= 1");
        for (size_t i = 0; i < words_.size(); ++i) {
            if (!index_.emplace(words_[i], static_cast<int>(i)).second)
                throw config_error("duplicate vocab word: " + words_[i]);
        }
    }

    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    int size() const { return static_cast<int>(words_.size()); }
    int max_len() const { return max_len_; }
    const std::vector<std::string>& words() const { return words_; }

    int id_of(const std::string& w) const {
        auto it = index_.find(w);
        return it == index_.end() ? kUnk : it->second;
    }

    /// whitespace split, map to ids, pad/truncate to max_len
    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        std::istringstream is(text);
        std::string w;
        while (is >> w && static_cast<int>(ids.size()) < max_len_) ids.push_back(id_of(w));
        while (static_cast<int>(ids.size()) < max_len_) ids.push_back(kPad);
        return ids;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw data_error("cannot write vocab: " + path);
        for (const auto& w : words_) os << w << "\n";
    }

    static Vocab load(const std::string& path, int max_len) {
        std::ifstream is(path);
        if (!is) throw data_error("cannot read vocab: " + path);
        std::vector<std::string> words;
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) words.push_back(line);
        return Vocab(std::move(words), max_len);
    }

  private:
    std::vector<std::string> words_;
    int max_len_;
    std::map<std::string, int> index_;
};

/// Toy instruction encoder: M embedding-table rows, every token at position (0,0)
template <typename T = float>
class InstructionEncoder {
  public:
    InstructionEncoder(Vocab vocab) : vocab_(std::move(vocab)) {}

    const Vocab& vocab() const { return vocab_; }

    /// `table` is the (possibly trainable) embedding matrix [|vocab|×d]
    TokenSeq<T> encode(const std::string& text, const Tensor<T>& table) const {
        if (table.rank() != 2 || table.rows() != vocab_.size())
            throw shape_error("embedding table rows != vocab size");
        std::vector<int> ids = vocab_.tokenize(text);
        TokenSeq<T> seq;
        seq.role = TokenRole::Text;
        seq.ids = ids;
        int d = table.cols();
        seq.tokens = Tensor<T>({static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy(table.data.begin() + static_cast<size_t>(ids[i]) * d,
                      table.data.begin() + static_cast<size_t>(ids[i] + 1) * d,
                      seq.tokens.data.begin() + i * d);
        seq.positions.assign(ids.size(), Pos{0, 0});
        return seq;
    }

  private:
    Vocab vocab_;
};

}  // namespace photodoodle
