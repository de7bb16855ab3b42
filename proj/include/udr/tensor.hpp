#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "udr/rng.hpp"

namespace udr {

using Shape = std::vector<long>;

inline long numel_of(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Reverse-mode evaluation is gated by a thread-local flag so inference and
// prior construction never build graphs.
class GradMode {
public:
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor with reverse-mode autodiff. A Tensor is a cheap
// handle onto a shared node; ops allocate fresh storage for their outputs
// (outputs never alias inputs) and record a backward closure when any
// input participates in a graph.
template <class T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad; // allocated on first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data.assign(static_cast<std::size_t>(numel_of(t.n_->shape)), T(0));
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->data.begin(), t.n_->data.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (static_cast<long>(values.size()) != numel_of(shape))
            throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(values);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = static_cast<T>(rng.normal());
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    long dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    long numel() const { return static_cast<long>(n_->data.size()); }

    std::span<T> data() { return n_->data; }
    std::span<const T> data() const { return n_->data; }

    T& at(std::initializer_list<long> idx) { return n_->data[flat_index(idx)]; }
    T at(std::initializer_list<long> idx) const { return n_->data[flat_index(idx)]; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }

    bool has_grad() const { return !n_->grad.empty(); }
    std::span<const T> grad() const {
        if (n_->grad.empty())
            throw std::runtime_error("grad: no gradient accumulated for tensor " + shape_str(n_->shape));
        return n_->grad;
    }
    std::vector<T>& mutable_grad() {
        if (n_->grad.empty()) n_->grad.assign(n_->data.size(), T(0));
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    // Value copy detached from any graph.
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        return t;
    }

    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return n_; }

    // Build a graph node from finished output storage. `parents` are the
    // inputs the backward closure accumulates into; when no input requires
    // grad (or grad mode is off) the node stays plain.
    static Tensor make_op(Shape shape, std::vector<T> out, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
        Tensor t = from_data(std::move(shape), std::move(out));
        bool needs = false;
        if (GradMode::enabled())
            for (const auto& p : parents)
                if (p.defined() && p.n_->requires_grad) needs = true;
        if (needs) {
            t.n_->requires_grad = true;
            t.n_->parents.reserve(parents.size());
            for (const auto& p : parents)
                if (p.defined()) t.n_->parents.push_back(p.n_);
            t.n_->backward_fn = std::move(backward_fn);
        }
        return t;
    }

    // Accumulate `contrib` into this tensor's gradient (no-op unless the
    // tensor requires grad). Fan-out sums by construction.
    void accumulate_grad(std::span<const T> contrib) {
        if (!n_->requires_grad) return;
        auto& g = mutable_grad();
        if (contrib.size() != g.size())
            throw std::runtime_error("accumulate_grad: size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += contrib[i];
    }

    // Reverse-mode sweep from a scalar loss. Gradients sum across fan-out
    // and across repeated backward calls at the leaves; interior nodes are
    // reset before seeding so the sweep itself is self-contained.
    void backward() {
        if (numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(n_->shape));
        if (!n_->requires_grad)
            throw std::invalid_argument("backward: loss does not require grad");

        std::vector<Node*> order;
        topo_sort(order);
        for (Node* nd : order)
            if (!nd->parents.empty()) nd->grad.clear(); // interior node
        {
            auto& g = mutable_grad();
            g[0] += T(1);
        }
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* nd = *it;
            if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
        }
    }

private:
    std::shared_ptr<Node> n_;

    std::size_t flat_index(std::initializer_list<long> idx) const {
        if (idx.size() != n_->shape.size())
            throw std::invalid_argument("at: rank mismatch for " + shape_str(n_->shape));
        long f = 0;
        std::size_t k = 0;
        for (long i : idx) {
            f = f * n_->shape[k] + i;
            ++k;
        }
        return static_cast<std::size_t>(f);
    }

    void topo_sort(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        // iterative post-order DFS over grad-requiring parents
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [nd, i] = stack.back();
            if (i < nd->parents.size()) {
                Node* p = nd->parents[i++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(nd);
                stack.pop_back();
            }
        }
        // order is post-order: parents before children; reverse iteration
        // in backward() visits consumers first.
    }
};

// ---------------------------------------------------------------------------
// Elementwise ops and reductions
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

} // namespace detail

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.data().begin(), a.data().end());
    for (long i = 0; i < b.numel(); ++i) out[static_cast<std::size_t>(i)] += b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<T>::Node& self) mutable {
        a.accumulate_grad(self.grad);
        b.accumulate_grad(self.grad);
    });
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().begin(), a.data().end());
    for (long i = 0; i < b.numel(); ++i) out[static_cast<std::size_t>(i)] -= b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<T>::Node& self) mutable {
        a.accumulate_grad(self.grad);
        if (b.requires_grad()) {
            std::vector<T> gb(self.grad.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -self.grad[i];
            b.accumulate_grad(gb);
        }
    });
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(static_cast<std::size_t>(a.numel()));
    for (long i = 0; i < a.numel(); ++i)
        out[static_cast<std::size_t>(i)] = a.data()[i] * b.data()[i];
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [a, b](typename Tensor<T>::Node& self) mutable {
        if (a.requires_grad()) {
            std::vector<T> ga(self.grad.size());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * b.data()[static_cast<long>(i)];
            a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            std::vector<T> gb(self.grad.size());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = self.grad[i] * a.data()[static_cast<long>(i)];
            b.accumulate_grad(gb);
        }
    });
}

// y = scale*x + shift
template <class T>
Tensor<T> affine(Tensor<T> x, T scale, T shift) {
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long i = 0; i < x.numel(); ++i)
        out[static_cast<std::size_t>(i)] = scale * x.data()[i] + shift;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x, scale](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(self.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = scale * self.grad[i];
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> scale(Tensor<T> x, T s) {
    return affine(x, s, T(0));
}

template <class T>
Tensor<T> abs_val(Tensor<T> x) {
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long i = 0; i < x.numel(); ++i) out[static_cast<std::size_t>(i)] = std::abs(x.data()[i]);
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(self.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T v = x.data()[static_cast<long>(i)];
            gx[i] = self.grad[i] * (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)));
        }
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> silu(Tensor<T> x) {
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        out[static_cast<std::size_t>(i)] = v / (T(1) + std::exp(-v));
    }
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(self.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T v = x.data()[static_cast<long>(i)];
            const T s = T(1) / (T(1) + std::exp(-v));
            gx[i] = self.grad[i] * (s * (T(1) + v * (T(1) - s)));
        }
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> tanh_op(Tensor<T> x) {
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long i = 0; i < x.numel(); ++i) out[static_cast<std::size_t>(i)] = std::tanh(x.data()[i]);
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(self.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T t = self.data[i];
            gx[i] = self.grad[i] * (T(1) - t * t);
        }
        x.accumulate_grad(gx);
    });
}

// Pass-through inside [lo,hi], zero gradient outside.
template <class T>
Tensor<T> clamp(Tensor<T> x, T lo, T hi) {
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long i = 0; i < x.numel(); ++i)
        out[static_cast<std::size_t>(i)] = std::min(hi, std::max(lo, x.data()[i]));
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x, lo, hi](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(self.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const T v = x.data()[static_cast<long>(i)];
            gx[i] = (v >= lo && v <= hi) ? self.grad[i] : T(0);
        }
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> sum(Tensor<T> x) {
    T acc = 0;
    for (long i = 0; i < x.numel(); ++i) acc += x.data()[i];
    return Tensor<T>::make_op({1}, {acc}, {x}, [x](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), self.grad[0]);
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> mean(Tensor<T> x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T acc = 0;
    for (long i = 0; i < x.numel(); ++i) acc += x.data()[i];
    acc *= inv;
    return Tensor<T>::make_op({1}, {acc}, {x}, [x, inv](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), self.grad[0] * inv);
        x.accumulate_grad(gx);
    });
}

template <class T>
Tensor<T> reshape(Tensor<T> x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    return Tensor<T>::make_op(std::move(shape), std::move(out), {x}, [x](typename Tensor<T>::Node& self) mutable {
        x.accumulate_grad(self.grad);
    });
}

// Concatenate along `axis`; inputs agree on every other extent.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
    Shape out_shape = parts[0].shape();
    long axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && p.dim(d) != out_shape[static_cast<std::size_t>(d)])
                throw std::invalid_argument("concat: extent mismatch on dim " + std::to_string(d) +
                                            ": " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        axis_total += p.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;

    long outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
    const long out_stride = axis_total * inner;
    long offset = 0;
    for (const auto& p : parts) {
        const long block = p.dim(axis) * inner;
        for (long o = 0; o < outer; ++o)
            std::copy_n(p.data().data() + o * block, block, out.data() + o * out_stride + offset);
        offset += block;
    }

    std::vector<Tensor<T>> parents = parts;
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), parents,
                              [parents, outer, inner, out_stride](typename Tensor<T>::Node& self) mutable {
                                  long offset = 0;
                                  for (auto& p : parents) {
                                      const long axis_d = p.numel() / (outer * inner);
                                      const long block = axis_d * inner;
                                      if (p.requires_grad()) {
                                          std::vector<T> gp(static_cast<std::size_t>(p.numel()));
                                          for (long o = 0; o < outer; ++o)
                                              std::copy_n(self.grad.data() + o * out_stride + offset, block,
                                                          gp.data() + o * block);
                                          p.accumulate_grad(gp);
                                      }
                                      offset += block;
                                  }
                              });
}

// Swap the last two axes.
template <class T>
Tensor<T> transpose_last2(Tensor<T> x) {
    const int rank = x.rank();
    if (rank < 2) throw std::invalid_argument("transpose_last2: rank < 2");
    Shape s = x.shape();
    const long m = s[static_cast<std::size_t>(rank - 2)];
    const long n = s[static_cast<std::size_t>(rank - 1)];
    std::swap(s[static_cast<std::size_t>(rank - 2)], s[static_cast<std::size_t>(rank - 1)]);
    const long batch = x.numel() / (m * n);
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long b = 0; b < batch; ++b) {
        const T* src = x.data().data() + b * m * n;
        T* dst = out.data() + b * m * n;
        for (long i = 0; i < m; ++i)
            for (long j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return Tensor<T>::make_op(std::move(s), std::move(out), {x},
                              [x, batch, m, n](typename Tensor<T>::Node& self) mutable {
                                  std::vector<T> gx(self.grad.size());
                                  for (long b = 0; b < batch; ++b) {
                                      const T* src = self.grad.data() + b * m * n;
                                      T* dst = gx.data() + b * m * n;
                                      // self is [.., n, m]; transpose back
                                      for (long j = 0; j < n; ++j)
                                          for (long i = 0; i < m; ++i) dst[i * n + j] = src[j * m + i];
                                  }
                                  x.accumulate_grad(gx);
                              });
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
template <class T>
Tensor<T> bmm(Tensor<T> a, Tensor<T> b) {
    if (a.rank() != 3 || b.rank() != 3)
        throw std::invalid_argument("bmm: expects rank-3 inputs, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const long B = a.dim(0), m = a.dim(1), k = a.dim(2);
    if (b.dim(0) != B || b.dim(1) != k)
        throw std::invalid_argument("bmm: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const long n = b.dim(2);
    std::vector<T> out(static_cast<std::size_t>(B * m * n), T(0));
    for (long bb = 0; bb < B; ++bb) {
        const T* A = a.data().data() + bb * m * k;
        const T* Bm = b.data().data() + bb * k * n;
        T* C = out.data() + bb * m * n;
        for (long i = 0; i < m; ++i)
            for (long p = 0; p < k; ++p) {
                const T av = A[i * k + p];
                const T* brow = Bm + p * n;
                T* crow = C + i * n;
                for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }
    return Tensor<T>::make_op({B, m, n}, std::move(out), {a, b},
                              [a, b, B, m, k, n](typename Tensor<T>::Node& self) mutable {
                                  if (a.requires_grad()) {
                                      std::vector<T> ga(static_cast<std::size_t>(B * m * k), T(0));
                                      for (long bb = 0; bb < B; ++bb) {
                                          const T* G = self.grad.data() + bb * m * n;
                                          const T* Bm = b.data().data() + bb * k * n;
                                          T* GA = ga.data() + bb * m * k;
                                          for (long i = 0; i < m; ++i)
                                              for (long p = 0; p < k; ++p) {
                                                  T acc = 0;
                                                  const T* grow = G + i * n;
                                                  const T* brow = Bm + p * n;
                                                  for (long j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                                  GA[i * k + p] = acc;
                                              }
                                      }
                                      a.accumulate_grad(ga);
                                  }
                                  if (b.requires_grad()) {
                                      std::vector<T> gb(static_cast<std::size_t>(B * k * n), T(0));
                                      for (long bb = 0; bb < B; ++bb) {
                                          const T* G = self.grad.data() + bb * m * n;
                                          const T* A = a.data().data() + bb * m * k;
                                          T* GB = gb.data() + bb * k * n;
                                          for (long i = 0; i < m; ++i)
                                              for (long p = 0; p < k; ++p) {
                                                  const T av = A[i * k + p];
                                                  const T* grow = G + i * n;
                                                  T* gbrow = GB + p * n;
                                                  for (long j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                                              }
                                      }
                                      b.accumulate_grad(gb);
                                  }
                              });
}

// Numerically guarded softmax over the last axis.
template <class T>
Tensor<T> softmax_lastdim(Tensor<T> x) {
    const int rank = x.rank();
    if (rank < 1) throw std::invalid_argument("softmax: rank-0 input");
    const long n = x.dim(rank - 1);
    const long rows = x.numel() / n;
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long r = 0; r < rows; ++r) {
        const T* src = x.data().data() + r * n;
        T* dst = out.data() + r * n;
        T mx = src[0];
        for (long j = 1; j < n; ++j) mx = std::max(mx, src[j]);
        T denom = 0;
        for (long j = 0; j < n; ++j) {
            dst[j] = std::exp(src[j] - mx);
            denom += dst[j];
        }
        const T inv = T(1) / denom;
        for (long j = 0; j < n; ++j) dst[j] *= inv;
    }
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [x, rows, n](typename Tensor<T>::Node& self) mutable {
                                  std::vector<T> gx(self.grad.size());
                                  for (long r = 0; r < rows; ++r) {
                                      const T* y = self.data.data() + r * n;
                                      const T* g = self.grad.data() + r * n;
                                      T dot = 0;
                                      for (long j = 0; j < n; ++j) dot += y[j] * g[j];
                                      T* dst = gx.data() + r * n;
                                      for (long j = 0; j < n; ++j) dst[j] = y[j] * (g[j] - dot);
                                  }
                                  x.accumulate_grad(gx);
                              });
}

} // namespace udr
