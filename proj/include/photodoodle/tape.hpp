#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "photodoodle/errors.hpp"
#include "photodoodle/tensor.hpp"

namespace photodoodle {

/// Reverse-mode tape over dense tensors. Single-owner: build a fresh tape per
/// loss evaluation, call backward once, read gradients, discard.
template <typename T>
class Tape {
  public:
    using Ref = int;

    Ref leaf(Tensor<T> v, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(v), {}, nullptr, requires_grad});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    /// Trainable leaf registered under a name; gradients retrievable by name
    /// after backward.
    Ref param(const std::string& name, const Tensor<T>& v) {
        Ref r = leaf(v, true);
        params_[name] = r;
        return r;
    }

    const Tensor<T>& value(Ref r) const { return nodes_[r].value; }

    const Tensor<T>& grad(Ref r) const {
        if (!ran_backward_) throw config_error("grad() before backward()");
        return nodes_[r].grad;
    }

    // ---- elementwise ----

    Ref add(Ref a, Ref b) {
        check_same(a, b, "add");
        Tensor<T> out = nodes_[a].value;
        const auto& bd = nodes_[b].value.data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
        return record({a, b}, std::move(out), [this, a, b](const Tensor<T>& g) {
            accum(a, g.data.data(), g.data.size());
            accum(b, g.data.data(), g.data.size());
        });
    }

    Ref sub(Ref a, Ref b) {
        check_same(a, b, "sub");
        Tensor<T> out = nodes_[a].value;
        const auto& bd = nodes_[b].value.data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
        return record({a, b}, std::move(out), [this, a, b](const Tensor<T>& g) {
            accum(a, g.data.data(), g.data.size());
            auto& gb = grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) gb[i] -= g.data[i];
        });
    }

    Ref mul(Ref a, Ref b) {
        check_same(a, b, "mul");
        Tensor<T> out = nodes_[a].value;
        const auto& bd = nodes_[b].value.data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
        return record({a, b}, std::move(out), [this, a, b](const Tensor<T>& g) {
            const auto& av = nodes_[a].value.data;
            const auto& bv = nodes_[b].value.data;
            auto& ga = grad_buf(a);
            auto& gb = grad_buf(b);
            for (size_t i = 0; i < g.data.size(); ++i) {
                ga[i] += g.data[i] * bv[i];
                gb[i] += g.data[i] * av[i];
            }
        });
    }

    Ref scale(Ref a, T s) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.data) x *= s;
        return record({a}, std::move(out), [this, a, s](const Tensor<T>& g) {
            auto& ga = grad_buf(a);
            for (size_t i = 0; i < g.data.size(); ++i) ga[i] += g.data[i] * s;
        });
    }

    Ref add_const(Ref a, T c) {
        Tensor<T> out = nodes_[a].value;
        for (auto& x : out.data) x += c;
        return record({a}, std::move(out), [this, a](const Tensor<T>& g) {
            accum(a, g.data.data(), g.data.size());
        });
    }

    // ---- matrix products (2D only) ----

    /// C[m×n] = A[m×k] · B[k×n]
    Ref matmul(Ref a, Ref b) {
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
            throw shape_error("matmul shape mismatch " + Tensor<T>::shape_str(A.shape) + " x " +
                              Tensor<T>::shape_str(B.shape));
        int m = A.rows(), k = A.cols(), n = B.cols();
        Tensor<T> out({m, n});
        mm_nn(A.data.data(), B.data.data(), out.data.data(), m, k, n);
        return record({a, b}, std::move(out), [this, a, b, m, k, n](const Tensor<T>& g) {
            // dA += G·B^T, dB += A^T·G
            mm_nt_into(g.data.data(), nodes_[b].value.data.data(), grad_buf(a).data(), m, n, k);
            mm_tn_into(nodes_[a].value.data.data(), g.data.data(), grad_buf(b).data(), k, m, n);
        });
    }

    /// C[m×n] = A[m×k] · B[n×k]^T
    Ref matmul_nt(Ref a, Ref b) {
        const auto& A = nodes_[a].value;
        const auto& B = nodes_[b].value;
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols())
            throw shape_error("matmul_nt shape mismatch " + Tensor<T>::shape_str(A.shape) +
                              " x " + Tensor<T>::shape_str(B.shape) + "^T");
        int m = A.rows(), k = A.cols(), n = B.rows();
        Tensor<T> out({m, n});
        mm_nt_into(A.data.data(), B.data.data(), out.data.data(), m, k, n, /*zero=*/false,
                   /*direct=*/true);
        return record({a, b}, std::move(out), [this, a, b, m, k, n](const Tensor<T>& g) {
            // C = A·B^T  =>  dA += G·B, dB += G^T·A
            mm_nn_accum(g.data.data(), nodes_[b].value.data.data(), grad_buf(a).data(), m, n, k);
            mm_tn_into(g.data.data(), nodes_[a].value.data.data(), grad_buf(b).data(), n, m, k);
        });
    }

    // ---- row-vector broadcasts (v is [1×n], x is [m×n]) ----

    Ref add_rowvec(Ref x, Ref v) {
        const auto& X = nodes_[x].value;
        const auto& V = nodes_[v].value;
        check_rowvec(X, V, "add_rowvec");
        int m = X.rows(), n = X.cols();
        Tensor<T> out = X;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += V.data[j];
        return record({x, v}, std::move(out), [this, x, v, m, n](const Tensor<T>& g) {
            accum(x, g.data.data(), g.data.size());
            auto& gv = grad_buf(v);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gv[j] += g.data[static_cast<size_t>(i) * n + j];
        });
    }

    Ref mul_rowvec(Ref x, Ref v) {
        const auto& X = nodes_[x].value;
        const auto& V = nodes_[v].value;
        check_rowvec(X, V, "mul_rowvec");
        int m = X.rows(), n = X.cols();
        Tensor<T> out = X;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] *= V.data[j];
        return record({x, v}, std::move(out), [this, x, v, m, n](const Tensor<T>& g) {
            const auto& xv = nodes_[x].value.data;
            const auto& vv = nodes_[v].value.data;
            auto& gx = grad_buf(x);
            auto& gv = grad_buf(v);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    size_t idx = static_cast<size_t>(i) * n + j;
                    gx[idx] += g.data[idx] * vv[j];
                    gv[j] += g.data[idx] * xv[idx];
                }
        });
    }

    // ---- nonlinearities ----

    /// numerically stable row softmax over the last dimension of a 2D tensor
    Ref softmax_rows(Ref x) {
        const auto& X = nodes_[x].value;
        if (X.rank() != 2 || X.cols() < 1)
            throw shape_error("softmax_rows needs a 2D tensor with non-empty rows");
        int m = X.rows(), n = X.cols();
        Tensor<T> out({m, n});
        for (int i = 0; i < m; ++i) {
            const T* xi = &X.data[static_cast<size_t>(i) * n];
            T* yi = &out.data[static_cast<size_t>(i) * n];
            T mx = xi[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
            T s = T(0);
            for (int j = 0; j < n; ++j) {
                yi[j] = std::exp(xi[j] - mx);
                s += yi[j];
            }
            for (int j = 0; j < n; ++j) yi[j] /= s;
        }
        Ref r = record({x}, std::move(out), nullptr);
        nodes_[r].back = [this, x, r, m, n](const Tensor<T>& g) {
            const auto& y = nodes_[r].value.data;
            auto& gx = grad_buf(x);
            for (int i = 0; i < m; ++i) {
                size_t off = static_cast<size_t>(i) * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += g.data[off + j] * y[off + j];
                for (int j = 0; j < n; ++j) gx[off + j] += y[off + j] * (g.data[off + j] - dot);
            }
        };
        return r;
    }

    /// per-row normalization with affine: y = (x-mean)/sqrt(var+eps)*gamma + beta
    Ref layer_norm(Ref x, Ref gamma, Ref beta, T eps) {
        if (eps <= T(0)) throw config_error("layer_norm eps must be positive");
        const auto& X = nodes_[x].value;
        const auto& G = nodes_[gamma].value;
        check_rowvec(X, G, "layer_norm gamma");
        check_rowvec(X, nodes_[beta].value, "layer_norm beta");
        int m = X.rows(), n = X.cols();
        Tensor<T> out({m, n});
        auto xhat = std::make_shared<std::vector<T>>(X.data.size());
        auto inv_sigma = std::make_shared<std::vector<T>>(m);
        for (int i = 0; i < m; ++i) {
            size_t off = static_cast<size_t>(i) * n;
            T mean = T(0);
            for (int j = 0; j < n; ++j) mean += X.data[off + j];
            mean /= T(n);
            T var = T(0);
            for (int j = 0; j < n; ++j) {
                T d = X.data[off + j] - mean;
                var += d * d;
            }
            var /= T(n);
            T is = T(1) / std::sqrt(var + eps);
            (*inv_sigma)[i] = is;
            for (int j = 0; j < n; ++j) {
                T h = (X.data[off + j] - mean) * is;
                (*xhat)[off + j] = h;
                out.data[off + j] = h * G.data[j] + nodes_[beta].value.data[j];
            }
        }
        return record({x, gamma, beta}, std::move(out),
                      [this, x, gamma, beta, m, n, xhat, inv_sigma](const Tensor<T>& g) {
            const auto& gm = nodes_[gamma].value.data;
            auto& gx = grad_buf(x);
            auto& gg = grad_buf(gamma);
            auto& gb = grad_buf(beta);
            for (int i = 0; i < m; ++i) {
                size_t off = static_cast<size_t>(i) * n;
                T sum_dh = T(0), sum_dh_h = T(0);
                for (int j = 0; j < n; ++j) {
                    T dh = g.data[off + j] * gm[j];
                    sum_dh += dh;
                    sum_dh_h += dh * (*xhat)[off + j];
                    gg[j] += g.data[off + j] * (*xhat)[off + j];
                    gb[j] += g.data[off + j];
                }
                T inv_n = T(1) / T(n);
                for (int j = 0; j < n; ++j) {
                    T dh = g.data[off + j] * gm[j];
                    gx[off + j] += (*inv_sigma)[i] *
                                   (dh - inv_n * sum_dh - (*xhat)[off + j] * inv_n * sum_dh_h);
                }
            }
        });
    }

    /// tanh-approximation GELU
    Ref gelu(Ref x) {
        const T k = T(0.7978845608028654);  // sqrt(2/pi)
        const T c = T(0.044715);
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) {
            T u = k * (v + c * v * v * v);
            v = T(0.5) * v * (T(1) + std::tanh(u));
        }
        return record({x}, std::move(out), [this, x, k, c](const Tensor<T>& g) {
            const auto& xv = nodes_[x].value.data;
            auto& gx = grad_buf(x);
            for (size_t i = 0; i < g.data.size(); ++i) {
                T v = xv[i];
                T u = k * (v + c * v * v * v);
                T th = std::tanh(u);
                T sech2 = T(1) - th * th;
                T du = k * (T(1) + T(3) * c * v * v);
                gx[i] += g.data[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * du);
            }
        });
    }

    Ref silu(Ref x) {
        Tensor<T> out = nodes_[x].value;
        for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
        return record({x}, std::move(out), [this, x](const Tensor<T>& g) {
            const auto& xv = nodes_[x].value.data;
            auto& gx = grad_buf(x);
            for (size_t i = 0; i < g.data.size(); ++i) {
                T s = T(1) / (T(1) + std::exp(-xv[i]));
                gx[i] += g.data[i] * s * (T(1) + xv[i] * (T(1) - s));
            }
        });
    }

    // ---- structural ops ----

    Ref concat_rows(const std::vector<Ref>& parts) {
        if (parts.empty()) throw shape_error("concat_rows of nothing");
        int n = nodes_[parts[0]].value.cols();
        int m = 0;
        for (Ref p : parts) {
            if (nodes_[p].value.cols() != n)
                throw shape_error("concat_rows column mismatch");
            m += nodes_[p].value.rows();
        }
        Tensor<T> out({m, n});
        size_t off = 0;
        for (Ref p : parts) {
            const auto& d = nodes_[p].value.data;
            std::copy(d.begin(), d.end(), out.data.begin() + off);
            off += d.size();
        }
        return record(parts, std::move(out), [this, parts](const Tensor<T>& g) {
            size_t off = 0;
            for (Ref p : parts) {
                size_t sz = nodes_[p].value.data.size();
                auto& gp = grad_buf(p);
                for (size_t i = 0; i < sz; ++i) gp[i] += g.data[off + i];
                off += sz;
            }
        });
    }

    Ref slice_rows(Ref x, int begin, int count) {
        const auto& X = nodes_[x].value;
        int m = X.rows(), n = X.cols();
        if (begin < 0 || count <= 0 || begin + count > m)
            throw shape_error("slice_rows out of range");
        Tensor<T> out({count, n});
        std::copy(X.data.begin() + static_cast<size_t>(begin) * n,
                  X.data.begin() + static_cast<size_t>(begin + count) * n, out.data.begin());
        return record({x}, std::move(out), [this, x, begin, n](const Tensor<T>& g) {
            auto& gx = grad_buf(x);
            size_t off = static_cast<size_t>(begin) * n;
            for (size_t i = 0; i < g.data.size(); ++i) gx[off + i] += g.data[i];
        });
    }

    Ref slice_cols(Ref x, int begin, int count) {
        const auto& X = nodes_[x].value;
        int m = X.rows(), n = X.cols();
        if (begin < 0 || count <= 0 || begin + count > n)
            throw shape_error("slice_cols out of range");
        Tensor<T> out({m, count});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < count; ++j)
                out.data[static_cast<size_t>(i) * count + j] =
                    X.data[static_cast<size_t>(i) * n + begin + j];
        return record({x}, std::move(out), [this, x, begin, count, m, n](const Tensor<T>& g) {
            auto& gx = grad_buf(x);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j)
                    gx[static_cast<size_t>(i) * n + begin + j] +=
                        g.data[static_cast<size_t>(i) * count + j];
        });
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        if (parts.empty()) throw shape_error("concat_cols of nothing");
        int m = nodes_[parts[0]].value.rows();
        int n = 0;
        for (Ref p : parts) {
            if (nodes_[p].value.rows() != m)
                throw shape_error("concat_cols row mismatch");
            n += nodes_[p].value.cols();
        }
        Tensor<T> out({m, n});
        int coff = 0;
        for (Ref p : parts) {
            const auto& P = nodes_[p].value;
            int pc = P.cols();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < pc; ++j)
                    out.data[static_cast<size_t>(i) * n + coff + j] =
                        P.data[static_cast<size_t>(i) * pc + j];
            coff += pc;
        }
        return record(parts, std::move(out), [this, parts, m, n](const Tensor<T>& g) {
            int coff = 0;
            for (Ref p : parts) {
                int pc = nodes_[p].value.cols();
                auto& gp = grad_buf(p);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < pc; ++j)
                        gp[static_cast<size_t>(i) * pc + j] +=
                            g.data[static_cast<size_t>(i) * n + coff + j];
                coff += pc;
            }
        });
    }

    /// embedding lookup: out[i] = table[ids[i]]
    Ref gather_rows(Ref table, const std::vector<int>& ids) {
        const auto& Tb = nodes_[table].value;
        int rows = Tb.rows(), n = Tb.cols();
        for (int id : ids)
            if (id < 0 || id >= rows) throw shape_error("gather_rows id out of range");
        Tensor<T> out({static_cast<int>(ids.size()), n});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy(Tb.data.begin() + static_cast<size_t>(ids[i]) * n,
                      Tb.data.begin() + static_cast<size_t>(ids[i] + 1) * n,
                      out.data.begin() + i * n);
        return record({table}, std::move(out), [this, table, ids, n](const Tensor<T>& g) {
            auto& gt = grad_buf(table);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < n; ++j)
                    gt[static_cast<size_t>(ids[i]) * n + j] += g.data[i * n + j];
        });
    }

    /// rotate consecutive value pairs: tables cos/sin are [rows × cols/2].
    /// The rotation is orthogonal, so the backward pass applies the transpose.
    Ref rotate_pairs(Ref x, std::shared_ptr<std::vector<T>> cos_tab,
                     std::shared_ptr<std::vector<T>> sin_tab) {
        const auto& X = nodes_[x].value;
        int m = X.rows(), n = X.cols();
        if (n % 2 != 0) throw config_error("rotate_pairs needs even width");
        size_t pairs = static_cast<size_t>(m) * (n / 2);
        if (cos_tab->size() != pairs || sin_tab->size() != pairs)
            throw shape_error("rotate_pairs table size mismatch");
        Tensor<T> out({m, n});
        for (size_t p = 0; p < pairs; ++p) {
            T c = (*cos_tab)[p], s = (*sin_tab)[p];
            T x0 = X.data[2 * p], x1 = X.data[2 * p + 1];
            out.data[2 * p] = c * x0 - s * x1;
            out.data[2 * p + 1] = s * x0 + c * x1;
        }
        return record({x}, std::move(out), [this, x, cos_tab, sin_tab, pairs](const Tensor<T>& g) {
            auto& gx = grad_buf(x);
            for (size_t p = 0; p < pairs; ++p) {
                T c = (*cos_tab)[p], s = (*sin_tab)[p];
                T g0 = g.data[2 * p], g1 = g.data[2 * p + 1];
                gx[2 * p] += c * g0 + s * g1;
                gx[2 * p + 1] += -s * g0 + c * g1;
            }
        });
    }

    // ---- reductions ----

    /// sequential left-to-right sum to a scalar [1x1]
    Ref sum(Ref x) {
        T s = T(0);
        for (T v : nodes_[x].value.data) s += v;
        Tensor<T> out({1, 1}, {s});
        return record({x}, std::move(out), [this, x](const Tensor<T>& g) {
            auto& gx = grad_buf(x);
            for (auto& v : gx) v += g.data[0];
        });
    }

    /// mean of squared entries of (a-b); scalar output
    Ref mean_sq_diff(Ref a, Ref b) {
        check_same(a, b, "mean_sq_diff");
        Ref d = sub(a, b);
        Ref sq = mul(d, d);
        Ref s = sum(sq);
        return scale(s, T(1) / T(nodes_[a].value.data.size()));
    }

    // ---- backward ----

    void backward(Ref loss) {
        if (nodes_[loss].value.data.size() != 1)
            throw config_error("backward requires a scalar loss, got shape " +
                               Tensor<T>::shape_str(nodes_[loss].value.shape));
        if (ran_backward_) throw config_error("backward called twice on one tape");
        ran_backward_ = true;
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = Tensor<T>::zeros(n.value.shape);
        nodes_[loss].grad = Tensor<T>({1, 1}, {T(1)});
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.requires_grad && !n.grad.data.empty()) n.back(n.grad);
        }
    }

    /// dLoss/dParam for every registered parameter; never-used params get zeros
    std::map<std::string, Tensor<T>> grads() const {
        if (!ran_backward_) throw config_error("grads() before backward()");
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, r] : params_) {
            const Node& n = nodes_[r];
            out[name] = n.grad.data.empty() ? Tensor<T>::zeros(n.value.shape) : n.grad;
        }
        return out;
    }

    const std::map<std::string, Ref>& param_refs() const { return params_; }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(const Tensor<T>&)> back;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::map<std::string, Ref> params_;
    bool ran_backward_ = false;

    Ref record(const std::vector<Ref>& inputs, Tensor<T> out,
               std::function<void(const Tensor<T>&)> back) {
        bool req = false;
        for (Ref i : inputs) req = req || nodes_[i].requires_grad;
        nodes_.push_back(Node{std::move(out), {}, req ? std::move(back) : nullptr, req});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    std::vector<T>& grad_buf(Ref r) {
        Node& n = nodes_[r];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad.data;
    }

    void accum(Ref r, const T* g, size_t n) {
        if (!nodes_[r].requires_grad) {
            // still need the buffer: intermediate nodes receive gradients too
        }
        auto& gb = grad_buf(r);
        for (size_t i = 0; i < n; ++i) gb[i] += g[i];
    }

    void check_same(Ref a, Ref b, const char* op) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw shape_error(std::string(op) + " shape mismatch " +
                              Tensor<T>::shape_str(nodes_[a].value.shape) + " vs " +
                              Tensor<T>::shape_str(nodes_[b].value.shape));
    }

    static void check_rowvec(const Tensor<T>& x, const Tensor<T>& v, const char* op) {
        if (x.rank() != 2 || v.rank() != 2 || v.rows() != 1 || v.cols() != x.cols())
            throw shape_error(std::string(op) + ": expected [mxn] with [1xn], got " +
                              Tensor<T>::shape_str(x.shape) + " and " +
                              Tensor<T>::shape_str(v.shape));
    }

    // C = A[m×k]·B[k×n], overwrite
    static void mm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            T* ci = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] = T(0);
            for (int p = 0; p < k; ++p) {
                T a = A[static_cast<size_t>(i) * k + p];
                const T* bp = B + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
            }
        }
    }

    // C += A[m×k]·B[k×n]
    static void mm_nn_accum(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            T* ci = C + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                T a = A[static_cast<size_t>(i) * k + p];
                const T* bp = B + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
            }
        }
    }

    // C (+)= A[m×k]·B[n×k]^T; direct=true overwrites (forward), else accumulates
    static void mm_nt_into(const T* A, const T* B, T* C, int m, int k, int n, bool zero = false,
                           bool direct = false) {
        (void)zero;
        for (int i = 0; i < m; ++i) {
            const T* ai = A + static_cast<size_t>(i) * k;
            T* ci = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T* bj = B + static_cast<size_t>(j) * k;
                T s = T(0);
                for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
                if (direct)
                    ci[j] = s;
                else
                    ci[j] += s;
            }
        }
    }

    // C += A[k×m]^T·B[k×n]  (result m×n); here A given as [k×m]
    static void mm_tn_into(const T* A, const T* B, T* C, int m, int k, int n) {
        // A is [k×m] stored row-major; C[m×n] += sum_p A[p][i] * B[p][j]
        for (int p = 0; p < k; ++p) {
            const T* ap = A + static_cast<size_t>(p) * m;
            const T* bp = B + static_cast<size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                T a = ap[i];
                if (a == T(0)) continue;
                T* ci = C + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
            }
        }
    }
};

}  // namespace photodoodle
