#pragma once

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "photodoodle/errors.hpp"
#include "photodoodle/rng.hpp"

namespace photodoodle {

/// Dense row-major tensor. Plain value type: copyable, immutable by
/// convention once handed to the tape.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(check_shape(shape), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != check_shape(shape))
            throw shape_error("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor gaussian(std::vector<int> s, Rng& rng, T std_dev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<T>(rng.next_gaussian()) * std_dev;
        return t;
    }

    static Tensor row(std::vector<T> d) {
        int n = static_cast<int>(d.size());
        return Tensor({1, n}, std::move(d));
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows_init) {
        int r = static_cast<int>(rows_init.size());
        int c = r ? static_cast<int>(rows_init.begin()->size()) : 0;
        Tensor t({r, c});
        int i = 0;
        for (const auto& row : rows_init) {
            if (static_cast<int>(row.size()) != c)
                throw shape_error("ragged matrix initializer");
            for (T v : row) t.data[i++] = v;
        }
        return t;
    }

    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = T(1);
        return t;
    }

    size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const {
        require_2d();
        return shape[0];
    }
    int cols() const {
        require_2d();
        return shape[1];
    }

    T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    T at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << ']';
        return os.str();
    }

  private:
    void require_2d() const {
        if (shape.size() != 2) throw shape_error("expected 2D tensor, got " + shape_str(shape));
    }

    static size_t check_shape(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw shape_error("non-positive dimension in shape " + shape_str(s));
            n *= static_cast<size_t>(d);
        }
        return n;
    }
};

// ---- binary serialization: u32 rank, u32 dims..., little-endian f32 data ----

namespace detail {

inline void put_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw data_error("truncated stream reading u16");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw data_error("truncated stream reading u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

inline uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw data_error("truncated stream reading u64");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor<float>& t) {
    detail::put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(os, static_cast<uint32_t>(d));
    for (float v : t.data) detail::put_f32(os, v);
}

inline Tensor<float> read_tensor(std::istream& is) {
    uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw data_error("implausible tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t d = detail::get_u32(is);
        if (d == 0 || d > (1u << 28)) throw data_error("bad tensor dimension " + std::to_string(d));
        shape[i] = static_cast<int>(d);
        n *= d;
    }
    Tensor<float> t;
    t.shape = std::move(shape);
    t.data.resize(n);
    for (size_t i = 0; i < n; ++i) t.data[i] = detail::get_f32(is);
    return t;
}

}  // namespace photodoodle
