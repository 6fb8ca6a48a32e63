#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "graphseg/common.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// Dense tensors + a single-pass reverse-mode tape. Scalar type is templated:
// float for training, double for finite-difference gradient checks.
// ---------------------------------------------------------------------------

template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> values;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        values.assign(numel_of(shape), T(0));
    }
    TensorT(std::vector<int> s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel_of(shape))
            throw shape_error("tensor value count does not match shape");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw shape_error("tensor extents must be positive");
            n *= std::size_t(d);
        }
        return n;
    }

    std::size_t numel() const { return values.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    T& at2(int r, int c) { return values[std::size_t(r) * std::size_t(cols()) + std::size_t(c)]; }
    T at2(int r, int c) const {
        return values[std::size_t(r) * std::size_t(cols()) + std::size_t(c)];
    }
};

using Tensor = TensorT<float>;

// Segmented index structure for neighbor-max: segment u covers
// indices[offsets[u] .. offsets[u+1]).
struct Neighborhood {
    std::vector<int> offsets;
    std::vector<int> indices;

    int segments() const { return int(offsets.size()) - 1; }
    void validate(int n_rows) const {
        if (offsets.empty() || offsets.front() != 0 || offsets.back() != int(indices.size()))
            throw consistency_error("neighborhood offsets malformed");
        for (std::size_t i = 1; i < offsets.size(); ++i)
            if (offsets[i] < offsets[i - 1])
                throw consistency_error("neighborhood offsets must be non-decreasing");
        for (int v : indices)
            if (v < 0 || v >= n_rows) throw consistency_error("neighbor index out of range");
    }
};

// ---------------------------------------------------------------------------
// Parameters: value + accumulated gradient + AdamW state.
// ---------------------------------------------------------------------------

template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    TensorT<T> moment1;
    TensorT<T> moment2;
    std::int64_t step = 0;

    ParameterT() = default;
    ParameterT(std::string n, TensorT<T> v)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.shape),
          moment1(value.shape),
          moment2(value.shape) {}

    void zero_grad() { std::fill(grad.values.begin(), grad.values.end(), T(0)); }
};

using Parameter = ParameterT<float>;

// Uniform in ±sqrt(6/(fan_in+fan_out)); biases are left zero.
template <typename T>
void glorot_init(TensorT<T>& t, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& v : t.values) v = T(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename T>
class TapeT {
  public:
    using Id = int;

    // needs_grad=false marks a leaf whose gradient nothing will read, so
    // expensive ops may skip accumulating into it. Reading grad() on such a
    // node yields zeros.
    Id input(TensorT<T> v, bool needs_grad = true) {
        const Id id = make_node(std::move(v), nullptr, "input");
        nodes_[std::size_t(id)].needs_grad = needs_grad;
        return id;
    }

    Id param(ParameterT<T>& p) {
        const Id id = make_node(p.value, nullptr, "param");
        bound_.push_back({&p, id});
        return id;
    }

    const TensorT<T>& value(Id id) const { return nodes_[std::size_t(id)].value; }
    const TensorT<T>& grad(Id id) const { return nodes_[std::size_t(id)].grad; }

    // ---- primitives ------------------------------------------------------

    Id matmul(Id a, Id b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.rows())
            throw shape_error("matmul: incompatible shapes");
        const int n = A.rows(), k = A.cols(), m = B.cols();
        TensorT<T> C({n, m});
        for (int i = 0; i < n; ++i) {
            T* crow = &C.values[std::size_t(i) * std::size_t(m)];
            const T* arow = &A.values[std::size_t(i) * std::size_t(k)];
            for (int p = 0; p < k; ++p) {
                const T apv = arow[p];
                if (apv == T(0)) continue;
                const T* brow = &B.values[std::size_t(p) * std::size_t(m)];
                for (int j = 0; j < m; ++j) crow[j] += apv * brow[j];
            }
        }
        const Id out = make_node(std::move(C), "matmul");
        nodes_[std::size_t(out)].backward = [this, a, b, out] {
            const auto& A2 = val(a);
            const auto& B2 = val(b);
            const auto& dC = nodes_[std::size_t(out)].grad;
            auto& dA = nodes_[std::size_t(a)].grad;
            auto& dB = nodes_[std::size_t(b)].grad;
            const int n2 = A2.rows(), k2 = A2.cols(), m2 = B2.cols();
            for (int i = 0; i < n2; ++i) {
                const T* dcrow = &dC.values[std::size_t(i) * std::size_t(m2)];
                T* darow = &dA.values[std::size_t(i) * std::size_t(k2)];
                const T* arow = &A2.values[std::size_t(i) * std::size_t(k2)];
                for (int p = 0; p < k2; ++p) {
                    const T* brow = &B2.values[std::size_t(p) * std::size_t(m2)];
                    T acc = T(0);
                    for (int j = 0; j < m2; ++j) acc += dcrow[j] * brow[j];
                    darow[p] += acc;
                    T* dbrow = &dB.values[std::size_t(p) * std::size_t(m2)];
                    const T apv = arow[p];
                    if (apv == T(0)) continue;
                    for (int j = 0; j < m2; ++j) dbrow[j] += apv * dcrow[j];
                }
            }
        };
        return out;
    }

    // 2D [N,F] + bias [F] per row, or 4D [C,X,Y,Z] + bias [C] per channel.
    Id add_bias(Id x, Id b) {
        const auto& X = val(x);
        const auto& B = val(b);
        if (B.shape.size() != 1) throw shape_error("add_bias: bias must be rank 1");
        TensorT<T> out = X;
        if (X.shape.size() == 2) {
            if (B.dim(0) != X.cols()) throw shape_error("add_bias: bias/cols mismatch");
            const int n = X.rows(), f = X.cols();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < f; ++j)
                    out.values[std::size_t(i) * std::size_t(f) + std::size_t(j)] += B.values[std::size_t(j)];
        } else if (X.shape.size() == 4) {
            if (B.dim(0) != X.dim(0)) throw shape_error("add_bias: bias/channels mismatch");
            const std::size_t per = X.numel() / std::size_t(X.dim(0));
            for (int c = 0; c < X.dim(0); ++c)
                for (std::size_t i = 0; i < per; ++i)
                    out.values[std::size_t(c) * per + i] += B.values[std::size_t(c)];
        } else {
            throw shape_error("add_bias: rank must be 2 or 4");
        }
        const Id oid = make_node(std::move(out), "add_bias");
        nodes_[std::size_t(oid)].backward = [this, x, b, oid] {
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            auto& dB = nodes_[std::size_t(b)].grad;
            for (std::size_t i = 0; i < dO.values.size(); ++i) dX.values[i] += dO.values[i];
            const auto& X2 = val(x);
            if (X2.shape.size() == 2) {
                const int n = X2.rows(), f = X2.cols();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < f; ++j)
                        dB.values[std::size_t(j)] +=
                            dO.values[std::size_t(i) * std::size_t(f) + std::size_t(j)];
            } else {
                const std::size_t per = X2.numel() / std::size_t(X2.dim(0));
                for (int c = 0; c < X2.dim(0); ++c) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < per; ++i)
                        acc += dO.values[std::size_t(c) * per + i];
                    dB.values[std::size_t(c)] += acc;
                }
            }
        };
        return oid;
    }

    // Subgradient at 0 is 0.
    Id relu(Id x) {
        TensorT<T> out = val(x);
        for (auto& v : out.values) v = v > T(0) ? v : T(0);
        const Id oid = make_node(std::move(out), "relu");
        nodes_[std::size_t(oid)].backward = [this, x, oid] {
            const auto& X = val(x);
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            for (std::size_t i = 0; i < X.values.size(); ++i)
                if (X.values[i] > T(0)) dX.values[i] += dO.values[i];
        };
        return oid;
    }

    Id concat_cols(Id a, Id b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.shape.size() != 2 || B.shape.size() != 2 || A.rows() != B.rows())
            throw shape_error("concat_cols: row mismatch");
        const int n = A.rows(), fa = A.cols(), fb = B.cols();
        TensorT<T> out({n, fa + fb});
        for (int i = 0; i < n; ++i) {
            std::copy_n(&A.values[std::size_t(i) * std::size_t(fa)], fa,
                        &out.values[std::size_t(i) * std::size_t(fa + fb)]);
            std::copy_n(&B.values[std::size_t(i) * std::size_t(fb)], fb,
                        &out.values[std::size_t(i) * std::size_t(fa + fb) + std::size_t(fa)]);
        }
        const Id oid = make_node(std::move(out), "concat_cols");
        nodes_[std::size_t(oid)].backward = [this, a, b, oid, n, fa, fb] {
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dA = nodes_[std::size_t(a)].grad;
            auto& dB = nodes_[std::size_t(b)].grad;
            for (int i = 0; i < n; ++i) {
                const T* src = &dO.values[std::size_t(i) * std::size_t(fa + fb)];
                T* da = &dA.values[std::size_t(i) * std::size_t(fa)];
                T* db = &dB.values[std::size_t(i) * std::size_t(fb)];
                for (int j = 0; j < fa; ++j) da[j] += src[j];
                for (int j = 0; j < fb; ++j) db[j] += src[fa + j];
            }
        };
        return oid;
    }

    // out[u] = elementwise max over rows indexed by segment u; empty segment
    // yields the zero vector. Gradient flows to the first attaining row.
    Id neighbor_max(Id x, const Neighborhood& nb) {
        const auto& X = val(x);
        if (X.shape.size() != 2) throw shape_error("neighbor_max: input must be rank 2");
        nb.validate(X.rows());
        const int n = nb.segments(), f = X.cols();
        TensorT<T> out({n, f});
        std::vector<int> argmax(std::size_t(n) * std::size_t(f), -1);
        for (int u = 0; u < n; ++u) {
            T* orow = &out.values[std::size_t(u) * std::size_t(f)];
            int* arow = &argmax[std::size_t(u) * std::size_t(f)];
            for (int e = nb.offsets[std::size_t(u)]; e < nb.offsets[std::size_t(u) + 1]; ++e) {
                const int v = nb.indices[std::size_t(e)];
                const T* xrow = &X.values[std::size_t(v) * std::size_t(f)];
                if (e == nb.offsets[std::size_t(u)]) {
                    for (int j = 0; j < f; ++j) {
                        orow[j] = xrow[j];
                        arow[j] = v;
                    }
                } else {
                    for (int j = 0; j < f; ++j)
                        if (xrow[j] > orow[j]) {
                            orow[j] = xrow[j];
                            arow[j] = v;
                        }
                }
            }
        }
        const Id oid = make_node(std::move(out), "neighbor_max");
        nodes_[std::size_t(oid)].backward = [this, x, oid, argmax = std::move(argmax), f] {
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            for (std::size_t i = 0; i < dO.values.size(); ++i) {
                const int v = argmax[i];
                if (v >= 0)
                    dX.values[std::size_t(v) * std::size_t(f) + i % std::size_t(f)] +=
                        dO.values[i];
            }
        };
        return oid;
    }

    // Cross-correlation (no kernel flip), stride 1, zero padding. Input
    // [Cin,X,Y,Z], kernel [Cout,Cin,K,K,K] with odd K, output [Cout,X,Y,Z].
    Id conv3d(Id x, Id k, int pad) {
        const auto& X = val(x);
        const auto& K = val(k);
        if (X.shape.size() != 4) throw shape_error("conv3d: input must be [C,X,Y,Z]");
        if (K.shape.size() != 5 || K.dim(1) != X.dim(0))
            throw shape_error("conv3d: kernel must be [Cout,Cin,K,K,K] matching input channels");
        if (K.dim(2) != K.dim(3) || K.dim(2) != K.dim(4) || K.dim(2) % 2 == 0)
            throw shape_error("conv3d: kernel must be cubic with odd extent");
        const int cin = X.dim(0), nx = X.dim(1), ny = X.dim(2), nz = X.dim(3);
        const int cout = K.dim(0), ksz = K.dim(2);
        if (pad < 0) throw shape_error("conv3d: negative padding");
        const int ox = nx + 2 * pad - ksz + 1, oy = ny + 2 * pad - ksz + 1,
                  oz = nz + 2 * pad - ksz + 1;
        if (ox <= 0 || oy <= 0 || oz <= 0)
            throw shape_error("conv3d: output extent would be non-positive");

        TensorT<T> out({cout, ox, oy, oz});
        conv_forward(X, K, out, pad);
        const Id oid = make_node(std::move(out), "conv3d");
        nodes_[std::size_t(oid)].backward = [this, x, k, oid, pad] {
            conv_backward(val(x), val(k), nodes_[std::size_t(oid)].grad,
                          nodes_[std::size_t(x)].grad, nodes_[std::size_t(k)].grad, pad,
                          nodes_[std::size_t(x)].needs_grad, nodes_[std::size_t(k)].needs_grad);
        };
        return oid;
    }

    // Row-wise stable softmax over the last axis of a rank-2 tensor.
    Id softmax_rows(Id x) {
        const auto& X = val(x);
        if (X.shape.size() != 2) throw shape_error("softmax_rows: input must be rank 2");
        const int n = X.rows(), f = X.cols();
        TensorT<T> out({n, f});
        for (int i = 0; i < n; ++i) {
            const T* xrow = &X.values[std::size_t(i) * std::size_t(f)];
            T* orow = &out.values[std::size_t(i) * std::size_t(f)];
            T mx = xrow[0];
            for (int j = 1; j < f; ++j) mx = std::max(mx, xrow[j]);
            T sum = T(0);
            for (int j = 0; j < f; ++j) {
                orow[j] = std::exp(xrow[j] - mx);
                sum += orow[j];
            }
            for (int j = 0; j < f; ++j) orow[j] /= sum;
        }
        const Id oid = make_node(std::move(out), "softmax_rows");
        nodes_[std::size_t(oid)].backward = [this, x, oid] {
            const auto& P = nodes_[std::size_t(oid)].value;
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            const int n2 = P.rows(), f2 = P.cols();
            for (int i = 0; i < n2; ++i) {
                const T* prow = &P.values[std::size_t(i) * std::size_t(f2)];
                const T* drow = &dO.values[std::size_t(i) * std::size_t(f2)];
                T dot = T(0);
                for (int j = 0; j < f2; ++j) dot += prow[j] * drow[j];
                T* dxr = &dX.values[std::size_t(i) * std::size_t(f2)];
                for (int j = 0; j < f2; ++j) dxr[j] += prow[j] * (drow[j] - dot);
            }
        };
        return oid;
    }

    // Rank-4 {C,X,Y,Z} -> rank-2 [X*Y*Z, C]: one row per voxel in linear
    // order, so channel-major feature maps feed the row-wise loss.
    Id channels_to_rows(Id x) {
        const auto& X = val(x);
        if (X.shape.size() != 4) throw shape_error("channels_to_rows: input must be rank 4");
        const int ch = X.dim(0);
        const std::size_t vox = X.values.size() / std::size_t(ch);
        TensorT<T> out({int(vox), ch});
        for (int c = 0; c < ch; ++c)
            for (std::size_t v = 0; v < vox; ++v)
                out.values[v * std::size_t(ch) + std::size_t(c)] =
                    X.values[std::size_t(c) * vox + v];
        const Id oid = make_node(std::move(out), "channels_to_rows");
        nodes_[std::size_t(oid)].backward = [this, x, oid, ch, vox] {
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            for (int c = 0; c < ch; ++c)
                for (std::size_t v = 0; v < vox; ++v)
                    dX.values[std::size_t(c) * vox + v] +=
                        dO.values[v * std::size_t(ch) + std::size_t(c)];
        };
        return oid;
    }

    Id log_elem(Id x) {
        TensorT<T> out = val(x);
        for (auto& v : out.values) v = std::log(v);
        const Id oid = make_node(std::move(out), "log");
        nodes_[std::size_t(oid)].backward = [this, x, oid] {
            const auto& X = val(x);
            const auto& dO = nodes_[std::size_t(oid)].grad;
            auto& dX = nodes_[std::size_t(x)].grad;
            for (std::size_t i = 0; i < X.values.size(); ++i)
                dX.values[i] += dO.values[i] / X.values[i];
        };
        return oid;
    }

    // Scalar utility for building test losses: sum of elementwise product
    // with a fixed tensor.
    Id weighted_sum(Id x, TensorT<T> coeff) {
        const auto& X = val(x);
        if (coeff.values.size() != X.values.size())
            throw shape_error("weighted_sum: coefficient size mismatch");
        T acc = T(0);
        for (std::size_t i = 0; i < X.values.size(); ++i) acc += X.values[i] * coeff.values[i];
        TensorT<T> out({1});
        out.values[0] = acc;
        const Id oid = make_node(std::move(out), "weighted_sum");
        nodes_[std::size_t(oid)].backward = [this, x, oid, coeff = std::move(coeff)] {
            const T up = nodes_[std::size_t(oid)].grad.values[0];
            auto& dX = nodes_[std::size_t(x)].grad;
            for (std::size_t i = 0; i < dX.values.size(); ++i)
                dX.values[i] += up * coeff.values[i];
        };
        return oid;
    }

    // Weighted mean of -log softmax(logits)[target], normalized by the sum of
    // the applied weights, so uniform weights reproduce the plain mean.
    Id weighted_cross_entropy(Id logits, const std::vector<int>& targets,
                              const std::array<T, 4>& class_weights) {
        const auto& L = val(logits);
        if (L.shape.size() != 2 || L.cols() != 4)
            throw shape_error("weighted_cross_entropy: logits must be [N,4]");
        if (int(targets.size()) != L.rows())
            throw shape_error("weighted_cross_entropy: target count mismatch");
        for (int t : targets)
            if (t < 0 || t >= 4) throw data_error("weighted_cross_entropy: target outside 0..3");
        for (T w : class_weights)
            if (!(w > T(0))) throw usage_error("weighted_cross_entropy: weights must be positive");

        const int n = L.rows();
        // Save softmax rows for the backward pass.
        std::vector<T> probs(std::size_t(n) * 4);
        T loss_acc = T(0), weight_acc = T(0);
        for (int i = 0; i < n; ++i) {
            const T* row = &L.values[std::size_t(i) * 4];
            T mx = row[0];
            for (int j = 1; j < 4; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
            for (int j = 0; j < 4; ++j) {
                probs[std::size_t(i) * 4 + std::size_t(j)] = std::exp(row[j] - mx);
                sum += probs[std::size_t(i) * 4 + std::size_t(j)];
            }
            for (int j = 0; j < 4; ++j) probs[std::size_t(i) * 4 + std::size_t(j)] /= sum;
            const int t = targets[std::size_t(i)];
            const T w = class_weights[std::size_t(t)];
            // log softmax via the stable shifted form
            loss_acc += w * (std::log(sum) - (row[t] - mx));
            weight_acc += w;
        }
        TensorT<T> out({1});
        out.values[0] = loss_acc / weight_acc;
        const Id oid = make_node(std::move(out), "weighted_cross_entropy");
        nodes_[std::size_t(oid)].backward = [this, logits, oid, targets, class_weights,
                                             probs = std::move(probs), weight_acc] {
            const T up = nodes_[std::size_t(oid)].grad.values[0];
            auto& dL = nodes_[std::size_t(logits)].grad;
            const int n2 = int(targets.size());
            for (int i = 0; i < n2; ++i) {
                const int t = targets[std::size_t(i)];
                const T w = class_weights[std::size_t(t)];
                for (int j = 0; j < 4; ++j) {
                    const T onehot = (j == t) ? T(1) : T(0);
                    dL.values[std::size_t(i) * 4 + std::size_t(j)] +=
                        up * w * (probs[std::size_t(i) * 4 + std::size_t(j)] - onehot) /
                        weight_acc;
                }
            }
        };
        return oid;
    }

    // ---- backward ---------------------------------------------------------

    void backward(Id loss) {
        if (ran_backward_) throw usage_error("tape backward may run only once");
        ran_backward_ = true;
        if (nodes_[std::size_t(loss)].value.numel() != 1)
            throw shape_error("backward: loss must be scalar");
        nodes_[std::size_t(loss)].grad.values[0] = T(1);
        for (Id i = loss; i >= 0; --i)
            if (nodes_[std::size_t(i)].backward) nodes_[std::size_t(i)].backward();
        for (auto& [p, id] : bound_) {
            const auto& g = nodes_[std::size_t(id)].grad;
            for (std::size_t i = 0; i < g.values.size(); ++i) p->grad.values[i] += g.values[i];
        }
    }

  private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::function<void()> backward;
        bool needs_grad = true;
    };

    const TensorT<T>& val(Id id) const { return nodes_[std::size_t(id)].value; }

    Id make_node(TensorT<T> v, const char* opname) { return make_node(std::move(v), nullptr, opname); }

    Id make_node(TensorT<T> v, std::nullptr_t, const char* opname) {
        for (const T f : v.values)
            if (!std::isfinite(double(f)))
                throw numeric_error(std::string("non-finite value after op: ") + opname);
        Node n;
        n.grad = TensorT<T>(v.shape);
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return Id(nodes_.size()) - 1;
    }

    // Kernel weight layout is [Cout][Cin][kx][ky][kz]; for a fixed (ky,kz)
    // the kx stride is ksz^2.
    static std::size_t kernel_base(int co, int cin, int ci, int ky, int kz, int ksz) {
        return (std::size_t(co) * std::size_t(cin) + std::size_t(ci)) * std::size_t(ksz) *
                   std::size_t(ksz) * std::size_t(ksz) +
               std::size_t(ky) * std::size_t(ksz) + std::size_t(kz);
    }

    static void conv_forward(const TensorT<T>& X, const TensorT<T>& K, TensorT<T>& out,
                             int pad) {
        const int cin = X.dim(0), nx = X.dim(1), ny = X.dim(2), nz = X.dim(3);
        const int cout = out.dim(0), ox = out.dim(1), oy = out.dim(2), oz = out.dim(3);
        const int ksz = K.dim(2);
        const std::size_t kxstep = std::size_t(ksz) * std::size_t(ksz);
        // One task per output row: the kernel sum builds up in a local buffer
        // that stays cache-hot across all cin*ksz^3 contributions, then lands
        // in the output with a single pass. Rows are disjoint, so the result
        // is identical for every thread count.
        parallel_for(std::size_t(cout) * std::size_t(oz) * std::size_t(oy), [&](std::size_t r) {
            const int y = int(r % std::size_t(oy));
            const int z = int(r / std::size_t(oy) % std::size_t(oz));
            const int co = int(r / std::size_t(oy) / std::size_t(oz));
            std::vector<T> acc(std::size_t(ox), T(0));
            for (int ci = 0; ci < cin; ++ci)
                for (int kz = 0; kz < ksz; ++kz) {
                    const int sz = z + kz - pad;
                    if (sz < 0 || sz >= nz) continue;
                    for (int ky = 0; ky < ksz; ++ky) {
                        const int sy = y + ky - pad;
                        if (sy < 0 || sy >= ny) continue;
                        const T* xrow =
                            &X.values[((std::size_t(ci) * std::size_t(nz) + std::size_t(sz)) *
                                           std::size_t(ny) +
                                       std::size_t(sy)) *
                                      std::size_t(nx)];
                        const T* kw = &K.values[kernel_base(co, cin, ci, ky, kz, ksz)];
                        for (int kx = 0; kx < ksz; ++kx) {
                            const T w = kw[std::size_t(kx) * kxstep];
                            if (w == T(0)) continue;
                            const int x0 = std::max(0, pad - kx);
                            const int x1 = std::min(ox, nx + pad - kx);
                            const T* src = xrow + (x0 + kx - pad);
                            T* dst = acc.data() + x0;
                            for (int i = 0, n = x1 - x0; i < n; ++i) dst[i] += w * src[i];
                        }
                    }
                }
            T* od = &out.values[((std::size_t(co) * std::size_t(oz) + std::size_t(z)) *
                                     std::size_t(oy) +
                                 std::size_t(y)) *
                                std::size_t(ox)];
            for (int x = 0; x < ox; ++x) od[x] += acc[std::size_t(x)];
        });
    }

    static void conv_backward(const TensorT<T>& X, const TensorT<T>& K, const TensorT<T>& dO,
                              TensorT<T>& dX, TensorT<T>& dK, int pad, bool need_dx,
                              bool need_dk) {
        const int cin = X.dim(0), nx = X.dim(1), ny = X.dim(2), nz = X.dim(3);
        const int cout = dO.dim(0), ox = dO.dim(1), oy = dO.dim(2), oz = dO.dim(3);
        const int ksz = K.dim(2);
        const std::size_t kxstep = std::size_t(ksz) * std::size_t(ksz);
        // dX: one task per input row, mirroring the forward trim with the
        // kernel offsets reflected.
        if (need_dx)
            parallel_for(std::size_t(cin) * std::size_t(nz) * std::size_t(ny), [&](std::size_t r) {
            const int sy = int(r % std::size_t(ny));
            const int sz = int(r / std::size_t(ny) % std::size_t(nz));
            const int ci = int(r / std::size_t(ny) / std::size_t(nz));
            std::vector<T> acc(std::size_t(nx), T(0));
            for (int co = 0; co < cout; ++co)
                for (int kz = 0; kz < ksz; ++kz) {
                    const int z = sz - kz + pad;
                    if (z < 0 || z >= oz) continue;
                    for (int ky = 0; ky < ksz; ++ky) {
                        const int y = sy - ky + pad;
                        if (y < 0 || y >= oy) continue;
                        const T* orow =
                            &dO.values[((std::size_t(co) * std::size_t(oz) + std::size_t(z)) *
                                            std::size_t(oy) +
                                        std::size_t(y)) *
                                       std::size_t(ox)];
                        const T* kw = &K.values[kernel_base(co, cin, ci, ky, kz, ksz)];
                        for (int kx = 0; kx < ksz; ++kx) {
                            const T w = kw[std::size_t(kx) * kxstep];
                            if (w == T(0)) continue;
                            const int i0 = std::max(0, kx - pad);
                            const int i1 = std::min(nx, ox + kx - pad);
                            const T* src = orow + (i0 - kx + pad);
                            T* dst = acc.data() + i0;
                            for (int i = 0, n = i1 - i0; i < n; ++i) dst[i] += w * src[i];
                        }
                    }
                }
            T* dxd = &dX.values[((std::size_t(ci) * std::size_t(nz) + std::size_t(sz)) *
                                     std::size_t(ny) +
                                 std::size_t(sy)) *
                                std::size_t(nx)];
            for (int x = 0; x < nx; ++x) dxd[x] += acc[std::size_t(x)];
        });
        // dK: one task per (cout, cin) kernel slab, so every weight is owned
        // by exactly one task. Each row's dot product runs four independent
        // partial sums (fixed association, thread-count invariant).
        if (!need_dk) return;
        parallel_for(std::size_t(cout) * std::size_t(cin), [&](std::size_t cc) {
            const int ci = int(cc % std::size_t(cin));
            const int co = int(cc / std::size_t(cin));
            std::vector<T> wg(static_cast<std::size_t>(ksz));
            for (int kz = 0; kz < ksz; ++kz)
                for (int ky = 0; ky < ksz; ++ky) {
                    std::fill(wg.begin(), wg.end(), T(0));
                    for (int z = 0; z < oz; ++z) {
                        const int sz = z + kz - pad;
                        if (sz < 0 || sz >= nz) continue;
                        for (int y = 0; y < oy; ++y) {
                            const int sy = y + ky - pad;
                            if (sy < 0 || sy >= ny) continue;
                            const T* orow =
                                &dO.values[((std::size_t(co) * std::size_t(oz) + std::size_t(z)) *
                                                std::size_t(oy) +
                                            std::size_t(y)) *
                                           std::size_t(ox)];
                            const T* xrow =
                                &X.values[((std::size_t(ci) * std::size_t(nz) + std::size_t(sz)) *
                                               std::size_t(ny) +
                                           std::size_t(sy)) *
                                          std::size_t(nx)];
                            for (int kx = 0; kx < ksz; ++kx) {
                                const int x0 = std::max(0, pad - kx);
                                const int x1 = std::min(ox, nx + pad - kx);
                                const int n = x1 - x0;
                                if (n <= 0) continue;
                                const T* od = orow + x0;
                                const T* id = xrow + (x0 + kx - pad);
                                T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
                                int i = 0;
                                for (; i + 4 <= n; i += 4) {
                                    a0 += od[i] * id[i];
                                    a1 += od[i + 1] * id[i + 1];
                                    a2 += od[i + 2] * id[i + 2];
                                    a3 += od[i + 3] * id[i + 3];
                                }
                                T dot = (a0 + a1) + (a2 + a3);
                                for (; i < n; ++i) dot += od[i] * id[i];
                                wg[std::size_t(kx)] += dot;
                            }
                        }
                    }
                    for (int kx = 0; kx < ksz; ++kx)
                        dK.values[kernel_base(co, cin, ci, ky, kz, ksz) +
                                  std::size_t(kx) * kxstep] += wg[std::size_t(kx)];
                }
        });
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<ParameterT<T>*, Id>> bound_;
    bool ran_backward_ = false;
};

using Tape = TapeT<float>;

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
void adamw_step(std::vector<ParameterT<T>*> params, double lr, double weight_decay,
                const AdamWConfig& cfg = {}) {
    for (auto* p : params) {
        p->step += 1;
        const double b1t = 1.0 - std::pow(cfg.beta1, double(p->step));
        const double b2t = 1.0 - std::pow(cfg.beta2, double(p->step));
        for (std::size_t i = 0; i < p->value.values.size(); ++i) {
            const double g = double(p->grad.values[i]);
            double theta = double(p->value.values[i]);
            theta *= 1.0 - lr * weight_decay;  // decoupled decay
            const double m = cfg.beta1 * double(p->moment1.values[i]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * double(p->moment2.values[i]) + (1.0 - cfg.beta2) * g * g;
            p->moment1.values[i] = T(m);
            p->moment2.values[i] = T(v);
            theta -= lr * (m / b1t) / (std::sqrt(v / b2t) + cfg.epsilon);
            p->value.values[i] = T(theta);
        }
    }
}

inline double lr_at_epoch(double lr0, double lambda, int epoch) {
    if (epoch < 0) throw usage_error("lr_at_epoch: epoch must be non-negative");
    return lr0 * std::pow(lambda, double(epoch));
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CKPT1", epoch counter, then named parameter records
// (values + optimizer state), little-endian, values always stored as float32.
// ---------------------------------------------------------------------------

namespace ckpt_detail {

template <typename V>
void put_pod(std::string& out, const V& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out.append(p, sizeof v);
}

template <typename V>
V get_pod(const std::vector<unsigned char>& buf, std::size_t& pos) {
    if (pos + sizeof(V) > buf.size()) throw format_error("checkpoint truncated");
    V v;
    std::memcpy(&v, buf.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
}

}  // namespace ckpt_detail

template <typename T>
std::string serialize_checkpoint(const std::vector<const ParameterT<T>*>& params, int epoch) {
    using ckpt_detail::put_pod;
    std::string out = "CKPT1";
    put_pod(out, std::int32_t(epoch));
    put_pod(out, std::uint32_t(params.size()));
    for (const auto* p : params) {
        put_pod(out, std::uint32_t(p->name.size()));
        out += p->name;
        put_pod(out, std::uint32_t(p->value.shape.size()));
        for (int d : p->value.shape) put_pod(out, std::int32_t(d));
        put_pod(out, std::int64_t(p->step));
        for (const auto* field : {&p->value, &p->moment1, &p->moment2})
            for (const T v : field->values) put_pod(out, float(v));
    }
    return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<const ParameterT<T>*>& params,
                     int epoch) {
    std::filesystem::path fp(path);
    if (fp.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(fp.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write checkpoint: " + path);
    const std::string blob = serialize_checkpoint(params, epoch);
    out.write(blob.data(), std::streamsize(blob.size()));
    if (!out.good()) throw io_error("checkpoint write failed: " + path);
}

// Loads by name into existing parameters; every parameter must be present
// with a matching shape. Returns the stored epoch.
template <typename T>
int load_checkpoint(const std::string& path, const std::vector<ParameterT<T>*>& params) {
    using ckpt_detail::get_pod;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint: " + path);
    std::vector<unsigned char> buf{std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>()};
    if (buf.size() < 5 || std::memcmp(buf.data(), "CKPT1", 5) != 0)
        throw format_error("bad checkpoint magic: " + path);
    std::size_t pos = 5;
    const auto epoch = get_pod<std::int32_t>(buf, pos);
    const auto count = get_pod<std::uint32_t>(buf, pos);

    struct Record {
        std::vector<int> shape;
        std::int64_t step;
        std::size_t payload_pos;  // start of value floats
    };
    std::map<std::string, Record> records;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get_pod<std::uint32_t>(buf, pos);
        if (pos + name_len > buf.size()) throw format_error("checkpoint truncated");
        std::string name(reinterpret_cast<const char*>(buf.data() + pos), name_len);
        pos += name_len;
        Record rec;
        const auto ndim = get_pod<std::uint32_t>(buf, pos);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto ext = get_pod<std::int32_t>(buf, pos);
            if (ext <= 0) throw format_error("checkpoint shape extent must be positive");
            rec.shape.push_back(ext);
            numel *= std::size_t(ext);
        }
        rec.step = get_pod<std::int64_t>(buf, pos);
        rec.payload_pos = pos;
        if (pos + numel * 3 * sizeof(float) > buf.size())
            throw format_error("checkpoint truncated");
        pos += numel * 3 * sizeof(float);
        if (!records.emplace(std::move(name), std::move(rec)).second)
            throw format_error("duplicate parameter name in checkpoint: " + path);
    }

    for (auto* p : params) {
        const auto it = records.find(p->name);
        if (it == records.end())
            throw data_error("checkpoint missing parameter: " + p->name);
        const Record& rec = it->second;
        if (rec.shape != p->value.shape)
            throw consistency_error("checkpoint shape mismatch for " + p->name);
        p->step = rec.step;
        std::size_t fp = rec.payload_pos;
        for (auto* field : {&p->value, &p->moment1, &p->moment2})
            for (auto& v : field->values) v = T(get_pod<float>(buf, fp));
        p->zero_grad();
    }
    return epoch;
}

}  // namespace gseg
