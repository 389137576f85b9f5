// Dense double-precision tensors with reverse-mode autodiff.
//
// Every op builds the backward graph only when gradients are enabled and at
// least one input is on the tape. Graphs are rebuilt per forward pass; backward
// accumulates (adds) into grad buffers, so a second backward of the same loss
// doubles the gradient. Call zero_grad() on parameters between steps.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace streamadapter {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_str(s));
        n *= e;
    }
    return n;
}

// Process-wide count of live double values (tensor data + grads + KV caches).
// Used by the benchmark harness as a portable peak-memory proxy.
namespace live_values {
inline std::atomic<int64_t>& current() {
    static std::atomic<int64_t> v{0};
    return v;
}
inline std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
}
inline void add(int64_t n) {
    int64_t c = current().fetch_add(n) + n;
    int64_t p = peak().load();
    while (c > p && !peak().compare_exchange_weak(p, c)) {}
}
inline void sub(int64_t n) { current().fetch_sub(n); }
inline void reset_peak() { peak().store(current().load()); }
}  // namespace live_values

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph construction in a scope (the tape-free first forward pass).
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

class Tensor {
  public:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // sized lazily on first accumulation
        bool requires_grad = false;
        std::vector<std::shared_ptr<Impl>> parents;
        std::function<void(Impl&)> backprop;  // reads this->grad, accumulates into parents

        Impl(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
            live_values::add(static_cast<int64_t>(data.size()));
        }
        ~Impl() { live_values::sub(static_cast<int64_t>(data.size() + grad.size())); }
        Impl(const Impl&) = delete;
        Impl& operator=(const Impl&) = delete;

        std::vector<double>& grad_buf() {
            if (grad.empty()) {
                grad.assign(data.size(), 0.0);
                live_values::add(static_cast<int64_t>(grad.size()));
            }
            return grad;
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static Tensor from(Shape shape, std::vector<double> data) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("tensor: data size does not match shape " + shape_str(shape));
        return Tensor(std::make_shared<Impl>(std::move(shape), std::move(data)));
    }
    static Tensor zeros(Shape shape) {
        auto n = numel_of(shape);
        return Tensor(std::make_shared<Impl>(std::move(shape), std::vector<double>(n, 0.0)));
    }
    static Tensor full(Shape shape, double v) {
        auto n = numel_of(shape);
        return Tensor(std::make_shared<Impl>(std::move(shape), std::vector<double>(n, v)));
    }
    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev) {
        auto n = numel_of(shape);
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> d(n);
        for (auto& x : d) x = dist(rng);
        return Tensor(std::make_shared<Impl>(std::move(shape), std::move(d)));
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape.at(i); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data() { return impl_->data; }
    const std::vector<double>& grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    std::shared_ptr<Impl> impl() const { return impl_; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
        return impl_->data[0];
    }

    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    void zero_grad() {
        if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    // Value copy outside any graph.
    Tensor detach() const { return from(impl_->shape, impl_->data); }

    Tensor clone_like() const {
        Tensor t = from(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    double grad_at(int64_t i) const { return impl_->grad.empty() ? 0.0 : impl_->grad[i]; }

  private:
    std::shared_ptr<Impl> impl_;
};

// A named trainable tensor.
struct Parameter {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline bool taping(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled_flag()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_result(Shape shape, std::vector<double> data, bool taped,
                          std::vector<std::shared_ptr<Tensor::Impl>> parents,
                          std::function<void(Tensor::Impl&)> backprop) {
    auto impl = std::make_shared<Tensor::Impl>(std::move(shape), std::move(data));
    if (taped) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backprop = std::move(backprop);
    }
    return Tensor(impl);
}

inline void accum(Tensor::Impl& dst, const std::vector<double>& g) {
    auto& gb = dst.grad_buf();
    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
}

inline void require_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) throw std::invalid_argument(std::string(who) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    bool taped = detail::taping({&a, &b});
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), taped, {pa, pb}, [pa, pb](Tensor::Impl& self) {
        if (pa->requires_grad) detail::accum(*pa, self.grad);
        if (pb->requires_grad) detail::accum(*pb, self.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    bool taped = detail::taping({&a, &b});
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), taped, {pa, pb}, [pa, pb](Tensor::Impl& self) {
        if (pa->requires_grad) detail::accum(*pa, self.grad);
        if (pb->requires_grad) {
            auto& gb = pb->grad_buf();
            for (size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.data());
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    bool taped = detail::taping({&a, &b});
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), taped, {pa, pb}, [pa, pb](Tensor::Impl& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (auto& x : out) x *= c;
    bool taped = detail::taping({&a});
    auto pa = a.impl();
    return detail::make_result(a.shape(), std::move(out), taped, {pa}, [pa, c](Tensor::Impl& self) {
        if (!pa->requires_grad) return;
        auto& g = pa->grad_buf();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
    });
}

// Broadcasts a length-1 tensor across every entry of x.
inline Tensor add_scalar(const Tensor& x, const Tensor& b) {
    if (b.numel() != 1) throw std::invalid_argument("add_scalar: bias must have one element");
    std::vector<double> out(x.data());
    double bv = b.data()[0];
    for (auto& v : out) v += bv;
    bool taped = detail::taping({&x, &b});
    auto px = x.impl(), pb = b.impl();
    return detail::make_result(x.shape(), std::move(out), taped, {px, pb}, [px, pb](Tensor::Impl& self) {
        if (px->requires_grad) detail::accum(*px, self.grad);
        if (pb->requires_grad) {
            double s = 0.0;
            for (double g : self.grad) s += g;
            pb->grad_buf()[0] += s;
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    bool taped = detail::taping({&a});
    auto pa = a.impl();
    return detail::make_result({n, m}, std::move(out), taped, {pa}, [pa, m, n](Tensor::Impl& self) {
        if (!pa->requires_grad) return;
        auto& g = pa->grad_buf();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double av = ad[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = bd.data() + static_cast<size_t>(p) * n;
            double* orow = out.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    bool taped = detail::taping({&a, &b});
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result({m, n}, std::move(out), taped, {pa, pb}, [pa, pb, m, k, n](Tensor::Impl& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            // dA = dC * B^T
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = self.grad.data() + static_cast<size_t>(i) * n;
                    const double* brow = pb->data.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    g[static_cast<size_t>(i) * k + p] += s;
                }
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            // dB = A^T * dC
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    double av = pa->data[static_cast<size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* grow = self.grad.data() + static_cast<size_t>(i) * n;
                    double* brow = g.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    detail::require_2d(a, "slice_rows");
    int m = a.dim(0), n = a.dim(1);
    if (r0 < 0 || r1 > m || r0 > r1) throw std::invalid_argument("slice_rows: bad range");
    std::vector<double> out(a.data().begin() + static_cast<size_t>(r0) * n, a.data().begin() + static_cast<size_t>(r1) * n);
    bool taped = detail::taping({&a});
    auto pa = a.impl();
    return detail::make_result({r1 - r0, n}, std::move(out), taped, {pa}, [pa, r0, n](Tensor::Impl& self) {
        if (!pa->requires_grad) return;
        auto& g = pa->grad_buf();
        for (size_t i = 0; i < self.grad.size(); ++i) g[static_cast<size_t>(r0) * n + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    detail::require_2d(a, "slice_cols");
    int m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 > n || c0 > c1) throw std::invalid_argument("slice_cols: bad range");
    int w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out[static_cast<size_t>(i) * w + j] = a.data()[static_cast<size_t>(i) * n + c0 + j];
    bool taped = detail::taping({&a});
    auto pa = a.impl();
    return detail::make_result({m, w}, std::move(out), taped, {pa}, [pa, m, n, c0, w](Tensor::Impl& self) {
        if (!pa->requires_grad) return;
        auto& g = pa->grad_buf();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) g[static_cast<size_t>(i) * n + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    int n = parts[0].dim(1);
    int m = 0;
    bool taped = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.dim(1) != n) throw std::invalid_argument("concat_rows: column mismatch");
        m += p.dim(0);
        taped = taped || (detail::grad_enabled_flag() && p.requires_grad());
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    std::vector<std::shared_ptr<Tensor::Impl>> parents;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.impl());
    }
    auto ps = parents;
    return detail::make_result({m, n}, std::move(out), taped, std::move(parents), [ps](Tensor::Impl& self) {
        size_t off = 0;
        for (const auto& p : ps) {
            if (p->requires_grad) {
                auto& g = p->grad_buf();
                for (size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[off + i];
            }
            off += p->data.size();
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    int m = parts[0].dim(0);
    int n = 0;
    bool taped = false;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
        n += p.dim(1);
        taped = taped || (detail::grad_enabled_flag() && p.requires_grad());
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    std::vector<std::shared_ptr<Tensor::Impl>> parents;
    int coff = 0;
    for (const auto& p : parts) {
        int w = p.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out[static_cast<size_t>(i) * n + coff + j] = p.data()[static_cast<size_t>(i) * w + j];
        coff += w;
        parents.push_back(p.impl());
    }
    auto ps = parents;
    return detail::make_result({m, n}, std::move(out), taped, std::move(parents), [ps, m, n](Tensor::Impl& self) {
        int coff2 = 0;
        for (const auto& p : ps) {
            int w = p->shape[1];
            if (p->requires_grad) {
                auto& g = p->grad_buf();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        g[static_cast<size_t>(i) * w + j] += self.grad[static_cast<size_t>(i) * n + coff2 + j];
            }
            coff2 += w;
        }
    });
}

// Extracts plane `h` of a [H x a x b] tensor as an [a x b] matrix.
inline Tensor slice_plane(const Tensor& t, int h) {
    if (t.ndim() != 3) throw std::invalid_argument("slice_plane: expected 3-D tensor, got " + shape_str(t.shape()));
    int H = t.dim(0), a = t.dim(1), b = t.dim(2);
    if (h < 0 || h >= H) throw std::invalid_argument("slice_plane: plane index out of range");
    size_t plane = static_cast<size_t>(a) * b;
    std::vector<double> out(t.data().begin() + h * plane, t.data().begin() + (h + 1) * plane);
    bool taped = detail::taping({&t});
    auto pt = t.impl();
    return detail::make_result({a, b}, std::move(out), taped, {pt}, [pt, h, plane](Tensor::Impl& self) {
        if (!pt->requires_grad) return;
        auto& g = pt->grad_buf();
        for (size_t i = 0; i < plane; ++i) g[h * plane + i] += self.grad[i];
    });
}

// Stacks H equally-shaped [a x b] matrices into a [H x a x b] tensor.
inline Tensor stack_planes(const std::vector<Tensor>& planes) {
    if (planes.empty()) throw std::invalid_argument("stack_planes: empty input");
    int a = planes[0].dim(0), b = planes[0].dim(1);
    bool taped = false;
    std::vector<double> out;
    std::vector<std::shared_ptr<Tensor::Impl>> parents;
    for (const auto& p : planes) {
        detail::require_2d(p, "stack_planes");
        if (p.dim(0) != a || p.dim(1) != b) throw std::invalid_argument("stack_planes: shape mismatch");
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.impl());
        taped = taped || (detail::grad_enabled_flag() && p.requires_grad());
    }
    auto ps = parents;
    return detail::make_result({static_cast<int>(planes.size()), a, b}, std::move(out), taped, std::move(parents),
                               [ps](Tensor::Impl& self) {
                                   size_t off = 0;
                                   for (const auto& p : ps) {
                                       if (p->requires_grad) {
                                           auto& g = p->grad_buf();
                                           for (size_t i = 0; i < p->data.size(); ++i) g[i] += self.grad[off + i];
                                       }
                                       off += p->data.size();
                                   }
                               });
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// Row-wise softmax with per-row max subtraction. `mask` (optional, same shape)
// is added to the input before normalization; use -inf entries to mask.
inline Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr) {
    detail::require_2d(x, "softmax_rows");
    int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const double* row = x.data().data() + static_cast<size_t>(i) * n;
        const double* mrow = mask ? mask->data().data() + static_cast<size_t>(i) * n : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            double v = row[j] + (mrow ? mrow[j] : 0.0);
            mx = std::max(mx, v);
        }
        double denom = 0.0;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            double v = row[j] + (mrow ? mrow[j] : 0.0);
            orow[j] = std::exp(v - mx);
            denom += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= denom;
    }
    bool taped = detail::taping({&x});
    auto px = x.impl();
    std::vector<double> y = out;
    return detail::make_result({m, n}, std::move(out), taped, {px}, [px, y, m, n](Tensor::Impl& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        for (int i = 0; i < m; ++i) {
            const double* yr = y.data() + static_cast<size_t>(i) * n;
            const double* gr = self.grad.data() + static_cast<size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += yr[j] * gr[j];
            for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += yr[j] * (gr[j] - dot);
        }
    });
}

// Elementwise sigmoid(x)^(1/tau). Output strictly in (0,1).
inline Tensor sigmoid_pow(const Tensor& x, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("sigmoid_pow: tau must be positive");
    std::vector<double> out(x.data().size());
    // computed as exp(-log(1+e^{-x})/tau); clamped to the largest open
    // sub-interval of (0,1) representable in double
    const double hi = std::nextafter(1.0, 0.0);
    const double lo = std::numeric_limits<double>::min();
    for (size_t i = 0; i < out.size(); ++i) {
        double y = std::exp(-std::log1p(std::exp(-x.data()[i])) / tau);
        out[i] = std::clamp(y, lo, hi);
    }
    bool taped = detail::taping({&x});
    auto px = x.impl();
    std::vector<double> y = out;
    return detail::make_result(x.shape(), std::move(out), taped, {px}, [px, y, tau](Tensor::Impl& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-px->data[i]));
            // d/dx s^{1/tau} = s^{1/tau} * (1 - s) / tau
            g[i] += self.grad[i] * y[i] * (1.0 - s) / tau;
        }
    });
}

inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (size_t i = 0; i < out.size(); ++i) {
        double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    bool taped = detail::taping({&x});
    auto px = x.impl();
    return detail::make_result(x.shape(), std::move(out), taped, {px}, [px](Tensor::Impl& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        constexpr double is2 = 0.7071067811865475244;
        constexpr double inv_sqrt_2pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double v = px->data[i];
            double cdf = 0.5 * (1.0 + std::erf(v * is2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// RMS-style row normalization with a learned per-column gain, no bias.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    detail::require_2d(x, "rms_norm");
    int m = x.dim(0), n = x.dim(1);
    if (gain.numel() != n) throw std::invalid_argument("rms_norm: gain length mismatch");
    std::vector<double> out(static_cast<size_t>(m) * n);
    std::vector<double> inv_r(m);
    for (int i = 0; i < m; ++i) {
        const double* row = x.data().data() + static_cast<size_t>(i) * n;
        double ms = 0.0;
        for (int j = 0; j < n; ++j) ms += row[j] * row[j];
        inv_r[i] = 1.0 / std::sqrt(ms / n + eps);
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = row[j] * inv_r[i] * gain.data()[j];
    }
    bool taped = detail::taping({&x, &gain});
    auto px = x.impl(), pg = gain.impl();
    return detail::make_result({m, n}, std::move(out), taped, {px, pg}, [px, pg, inv_r, m, n](Tensor::Impl& self) {
        for (int i = 0; i < m; ++i) {
            const double* row = px->data.data() + static_cast<size_t>(i) * n;
            const double* gr = self.grad.data() + static_cast<size_t>(i) * n;
            double r = inv_r[i];
            if (px->requires_grad) {
                double dot = 0.0;  // sum_j gain_j * dy_j * x_j
                for (int j = 0; j < n; ++j) dot += pg->data[j] * gr[j] * row[j];
                auto& g = px->grad_buf();
                for (int j = 0; j < n; ++j)
                    g[static_cast<size_t>(i) * n + j] += pg->data[j] * gr[j] * r - row[j] * dot * r * r * r / n;
            }
            if (pg->requires_grad) {
                auto& g = pg->grad_buf();
                for (int j = 0; j < n; ++j) g[j] += gr[j] * row[j] * r;
            }
        }
    });
}

// Rotary embedding over one head: x is [n x d_head] with d_head even, rotated
// pairwise by angles derived from the token's absolute position.
inline Tensor rope(const Tensor& x, const std::vector<int64_t>& positions, double base) {
    detail::require_2d(x, "rope");
    int m = x.dim(0), n = x.dim(1);
    if (n % 2 != 0) throw std::invalid_argument("rope: head dim must be even");
    if (static_cast<int>(positions.size()) != m) throw std::invalid_argument("rope: positions length mismatch");
    std::vector<double> out(static_cast<size_t>(m) * n);
    int half = n / 2;
    std::vector<double> cs(static_cast<size_t>(m) * half), sn(static_cast<size_t>(m) * half);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < half; ++j) {
            double theta = static_cast<double>(positions[i]) * std::pow(base, -2.0 * j / n);
            cs[static_cast<size_t>(i) * half + j] = std::cos(theta);
            sn[static_cast<size_t>(i) * half + j] = std::sin(theta);
        }
        const double* row = x.data().data() + static_cast<size_t>(i) * n;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < half; ++j) {
            double c = cs[static_cast<size_t>(i) * half + j], s = sn[static_cast<size_t>(i) * half + j];
            orow[2 * j] = row[2 * j] * c - row[2 * j + 1] * s;
            orow[2 * j + 1] = row[2 * j] * s + row[2 * j + 1] * c;
        }
    }
    bool taped = detail::taping({&x});
    auto px = x.impl();
    return detail::make_result({m, n}, std::move(out), taped, {px}, [px, cs, sn, m, n](Tensor::Impl& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        int half = n / 2;
        for (int i = 0; i < m; ++i) {
            const double* gr = self.grad.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < half; ++j) {
                double c = cs[static_cast<size_t>(i) * half + j], s = sn[static_cast<size_t>(i) * half + j];
                // inverse rotation
                g[static_cast<size_t>(i) * n + 2 * j] += gr[2 * j] * c + gr[2 * j + 1] * s;
                g[static_cast<size_t>(i) * n + 2 * j + 1] += -gr[2 * j] * s + gr[2 * j + 1] * c;
            }
        }
    });
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    detail::require_2d(table, "gather_rows");
    int v = table.dim(0), n = table.dim(1);
    std::vector<double> out;
    out.reserve(ids.size() * static_cast<size_t>(n));
    for (int id : ids) {
        if (id < 0 || id >= v) throw std::invalid_argument("gather_rows: id out of range");
        out.insert(out.end(), table.data().begin() + static_cast<size_t>(id) * n,
                   table.data().begin() + static_cast<size_t>(id + 1) * n);
    }
    bool taped = detail::taping({&table});
    auto pt = table.impl();
    return detail::make_result({static_cast<int>(ids.size()), n}, std::move(out), taped, {pt},
                               [pt, ids, n](Tensor::Impl& self) {
                                   if (!pt->requires_grad) return;
                                   auto& g = pt->grad_buf();
                                   for (size_t i = 0; i < ids.size(); ++i)
                                       for (int j = 0; j < n; ++j)
                                           g[static_cast<size_t>(ids[i]) * n + j] += self.grad[i * n + j];
                               });
}

// alpha is [r x 1], m is [r x c]; scales row i of m by alpha[i].
inline Tensor colwise_scale(const Tensor& alpha, const Tensor& m) {
    detail::require_2d(alpha, "colwise_scale");
    detail::require_2d(m, "colwise_scale");
    if (alpha.dim(1) != 1 || alpha.dim(0) != m.dim(0))
        throw std::invalid_argument("colwise_scale: alpha must be " + std::to_string(m.dim(0)) + "x1");
    int r = m.dim(0), c = m.dim(1);
    std::vector<double> out(m.data());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= alpha.data()[i];
    bool taped = detail::taping({&alpha, &m});
    auto pa = alpha.impl(), pm = m.impl();
    return detail::make_result({r, c}, std::move(out), taped, {pa, pm}, [pa, pm, r, c](Tensor::Impl& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (int i = 0; i < r; ++i) {
                double s = 0.0;
                for (int j = 0; j < c; ++j) s += self.grad[static_cast<size_t>(i) * c + j] * pm->data[static_cast<size_t>(i) * c + j];
                g[i] += s;
            }
        }
        if (pm->requires_grad) {
            auto& g = pm->grad_buf();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    g[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(i) * c + j] * pa->data[i];
        }
    });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    bool taped = detail::taping({&x});
    auto px = x.impl();
    return detail::make_result({1}, {s}, taped, {px}, [px](Tensor::Impl& self) {
        if (!px->requires_grad) return;
        auto& g = px->grad_buf();
        for (auto& v : g) v += self.grad[0];
    });
}

// Mean negative log-softmax of the target entries.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    detail::require_2d(logits, "cross_entropy");
    int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n) throw std::invalid_argument("cross_entropy: target count mismatch");
    for (int t : targets)
        if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy: target id " + std::to_string(t) + " out of range [0," + std::to_string(v) + ")");
    std::vector<double> probs(static_cast<size_t>(n) * v);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data().data() + static_cast<size_t>(i) * v;
        double mx = *std::max_element(row, row + v);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) {
            probs[static_cast<size_t>(i) * v + j] = std::exp(row[j] - mx);
            denom += probs[static_cast<size_t>(i) * v + j];
        }
        for (int j = 0; j < v; ++j) probs[static_cast<size_t>(i) * v + j] /= denom;
        loss -= row[targets[i]] - mx - std::log(denom);
    }
    loss /= n;
    bool taped = detail::taping({&logits});
    auto pl = logits.impl();
    return detail::make_result({1}, {loss}, taped, {pl}, [pl, probs, targets, n, v](Tensor::Impl& self) {
        if (!pl->requires_grad) return;
        auto& g = pl->grad_buf();
        double s = self.grad[0] / n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < v; ++j) {
                double d = probs[static_cast<size_t>(i) * v + j] - (j == targets[i] ? 1.0 : 0.0);
                g[static_cast<size_t>(i) * v + j] += d * s;
            }
    });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;  // constant loss: nothing reachable

    // iterative post-order topological sort
    std::vector<Tensor::Impl*> order;
    std::unordered_set<Tensor::Impl*> visited;
    std::vector<std::pair<Tensor::Impl*, size_t>> stack;
    stack.emplace_back(loss.impl().get(), 0);
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor::Impl* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Interior node grads are scratch space for this invocation; only leaf
    // (parameter/constant) grads persist, which is what makes a second
    // backward of the same loss add exactly one more gradient contribution.
    for (Tensor::Impl* node : order)
        if (node->backprop && !node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    loss.impl()->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor::Impl* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference check of d f / d p against p's analytic grad.
// Samples up to `max_coords` coordinates (all of them when the parameter is
// small enough). Returns max |analytic - numeric| / max(1e-8, |numeric|).
inline double finite_diff_check(const std::function<Tensor()>& f, Tensor& p, double eps,
                                int max_coords = 64, uint64_t sample_seed = 0x5eed) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("finite_diff_check: eps out of [1e-7, 1e-3]");
    Tensor loss = f();
    if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
    p.zero_grad();
    backward(loss);
    std::vector<double> analytic(p.numel());
    for (int64_t i = 0; i < p.numel(); ++i) analytic[i] = p.grad_at(i);

    std::vector<int64_t> coords;
    if (p.numel() <= max_coords) {
        coords.resize(p.numel());
        std::iota(coords.begin(), coords.end(), 0);
    } else {
        std::mt19937_64 rng(sample_seed);
        std::unordered_set<int64_t> seen;
        std::uniform_int_distribution<int64_t> dist(0, p.numel() - 1);
        while (static_cast<int>(seen.size()) < max_coords) seen.insert(dist(rng));
        coords.assign(seen.begin(), seen.end());
    }

    double max_rel = 0.0;
    NoGradGuard ng;
    for (int64_t c : coords) {
        double orig = p.mutable_data()[c];
        p.mutable_data()[c] = orig + eps;
        double fp = f().item();
        p.mutable_data()[c] = orig - eps;
        double fm = f().item();
        p.mutable_data()[c] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double rel = std::abs(analytic[c] - numeric) / std::max(1e-8, std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace streamadapter
