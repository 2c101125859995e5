#include "legonet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace lego {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = g_seq.fetch_add(1);
    return n;
}

std::vector<long> contiguous_strides(const Shape& s) {
    std::vector<long> st(s.size(), 1);
    for (long i = static_cast<long>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `in` viewed under broadcast shape `out` (0 on stretched axes).
std::vector<long> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<long> st(out.size(), 0);
    auto in_st = contiguous_strides(in);
    long off = static_cast<long>(out.size()) - static_cast<long>(in.size());
    for (size_t i = 0; i < in.size(); ++i) {
        if (in[i] != 1) st[off + i] = in_st[i];
    }
    return st;
}

long map_index(long flat, const std::vector<long>& out_strides_div,
               const Shape& out, const std::vector<long>& in_strides) {
    long idx = 0;
    for (size_t d = 0; d < out.size(); ++d) {
        long coord = (flat / out_strides_div[d]) % out[d];
        idx += coord * in_strides[d];
    }
    return idx;
}

bool record_tape(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    for (auto* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

} // namespace

long numel_of(const Shape& s) {
    long n = 1;
    for (long e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(const Shape& s, bool rg) {
    return Tensor(make_node(s, std::vector<double>(numel_of(s), 0.0), rg));
}
Tensor Tensor::full(const Shape& s, double v, bool rg) {
    return Tensor(make_node(s, std::vector<double>(numel_of(s), v), rg));
}
Tensor Tensor::from(const Shape& s, std::vector<double> data, bool rg) {
    if (static_cast<long>(data.size()) != numel_of(s))
        throw std::invalid_argument("Tensor::from: data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(s));
    return Tensor(make_node(s, std::move(data), rg));
}
Tensor Tensor::scalar(double v) { return Tensor(make_node({1}, {v}, false)); }

long Tensor::size(long axis) const {
    if (axis < 0) axis += dim();
    return n_->shape[axis];
}

std::vector<double>& Tensor::grad() {
    n_->ensure_grad();
    return n_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor with numel " + std::to_string(numel()));
    return n_->data[0];
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

bool& strict_div_mode() {
    static bool strict = true;
    return strict;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (size_t i = 0; i < nd; ++i) {
        long ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        long eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

// ---------------------------------------------------------------- elementwise

namespace {

// Common broadcast layouts admit O(1) index maps; everything else falls back
// to the generic stride walk.
enum class Bcast { Same, Scalar, Suffix, Prefix, General };

struct BcastMap {
    Bcast kind = Bcast::General;
    long tail = 1;
};

BcastMap classify_bcast(const Shape& in, const Shape& out) {
    long nd = static_cast<long>(out.size());
    Shape pin(nd, 1);
    long off = nd - static_cast<long>(in.size());
    for (size_t i = 0; i < in.size(); ++i) pin[off + static_cast<long>(i)] = in[i];
    if (pin == out) return {Bcast::Same, 1};
    if (numel_of(pin) == 1) return {Bcast::Scalar, 1};
    {
        long c = 0;
        while (c < nd && pin[c] == 1) ++c;
        bool ok = true;
        for (long d = c; d < nd; ++d) ok = ok && pin[d] == out[d];
        if (ok) return {Bcast::Suffix, numel_of(pin)};
    }
    {
        long c = nd;
        while (c > 0 && pin[c - 1] == 1) --c;
        bool ok = true;
        for (long d = 0; d < c; ++d) ok = ok && pin[d] == out[d];
        if (ok) {
            long tail = 1;
            for (long d = c; d < nd; ++d) tail *= out[d];
            return {Bcast::Prefix, tail};
        }
    }
    return {Bcast::General, 1};
}

inline long bcast_index(const BcastMap& bm, long i) {
    switch (bm.kind) {
        case Bcast::Same: return i;
        case Bcast::Scalar: return 0;
        case Bcast::Suffix: return i % bm.tail;
        case Bcast::Prefix: return i / bm.tail;
        default: return -1;
    }
}

// Binary op with value fn and partial derivatives in terms of (a, b).
template <class F, class DFA, class DFB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DFA dfa, DFB dfb) {
    Shape os = broadcast_shape(a.shape(), b.shape());
    long n = numel_of(os);
    std::vector<double> out(n);

    const auto& ad = a.data();
    const auto& bd = b.data();
    BcastMap ba = classify_bcast(a.shape(), os);
    BcastMap bb = classify_bcast(b.shape(), os);
    if (ba.kind == Bcast::Same && bb.kind == Bcast::Same) {
        for (long i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
    } else if (ba.kind != Bcast::General && bb.kind != Bcast::General) {
        for (long i = 0; i < n; ++i) out[i] = f(ad[bcast_index(ba, i)], bd[bcast_index(bb, i)]);
    } else {
        auto od = contiguous_strides(os);
        auto sa = broadcast_strides(a.shape(), os);
        auto sb = broadcast_strides(b.shape(), os);
        for (long i = 0; i < n; ++i)
            out[i] = f(ad[map_index(i, od, os, sa)], bd[map_index(i, od, os, sb)]);
    }

    bool rec = record_tape({&a, &b});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {a.node(), b.node()};
        node->backward_fn = [dfa, dfb](Node& self) {
            Node& na = *self.parents[0];
            Node& nb = *self.parents[1];
            Shape os2 = self.shape;
            BcastMap pa = classify_bcast(na.shape, os2);
            BcastMap pb = classify_bcast(nb.shape, os2);
            if (na.requires_grad) na.ensure_grad();
            if (nb.requires_grad) nb.ensure_grad();
            long n2 = self.numel();
            if (pa.kind != Bcast::General && pb.kind != Bcast::General) {
                for (long i = 0; i < n2; ++i) {
                    long ia = bcast_index(pa, i);
                    long ib = bcast_index(pb, i);
                    double g = self.grad[i];
                    if (na.requires_grad) na.grad[ia] += dfa(na.data[ia], nb.data[ib]) * g;
                    if (nb.requires_grad) nb.grad[ib] += dfb(na.data[ia], nb.data[ib]) * g;
                }
                return;
            }
            auto od = contiguous_strides(os2);
            auto sa = broadcast_strides(na.shape, os2);
            auto sb = broadcast_strides(nb.shape, os2);
            for (long i = 0; i < n2; ++i) {
                long ia = map_index(i, od, os2, sa);
                long ib = map_index(i, od, os2, sb);
                double g = self.grad[i];
                if (na.requires_grad) na.grad[ia] += dfa(na.data[ia], nb.data[ib]) * g;
                if (nb.requires_grad) nb.grad[ib] += dfb(na.data[ia], nb.data[ib]) * g;
            }
        };
    }
    (void)name;
    return Tensor(node);
}

template <class F, class DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
    long n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (long i = 0; i < n; ++i) out[i] = f(xd[i]);
    bool rec = record_tape({&x});
    auto node = make_node(x.shape(), std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [df](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            long n2 = self.numel();
            for (long i = 0; i < n2; ++i) nx.grad[i] += df(nx.data[i]) * self.grad[i];
        };
    }
    return Tensor(node);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add",
                     [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; },
                     [](double, double) { return 1.0; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub",
                     [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; },
                     [](double, double) { return -1.0; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul",
                     [](double x, double y) { return x * y; },
                     [](double, double y) { return y; },
                     [](double x, double) { return x; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    if (strict_div_mode()) {
        for (double v : b.data())
            if (v == 0.0) throw std::domain_error("div: exact zero divisor (strict mode)");
    }
    return binary_op(a, b, "div",
                     [](double x, double y) { return x / y; },
                     [](double, double y) { return 1.0 / y; },
                     [](double x, double y) { return -x / (y * y); });
}
Tensor neg(const Tensor& x) {
    return unary_op(x, [](double v) { return -v; }, [](double) { return -1.0; });
}
Tensor relu(const Tensor& x) {
    return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                    [](double v) { return v > 0 ? 1.0 : 0.0; });
}
Tensor gelu(const Tensor& x) {
    // exact erf form; derivative 0.5(1+erf(x/sqrt2)) + x * N(x;0,1)
    return unary_op(x,
                    [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
                    [](double v) {
                        double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
                        double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
                        return cdf + v * pdf;
                    });
}
Tensor sigmoid(const Tensor& x) {
    return unary_op(x,
                    [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double v) {
                        double s = 1.0 / (1.0 + std::exp(-v));
                        return s * (1.0 - s);
                    });
}
Tensor tanh_op(const Tensor& x) {
    return unary_op(x, [](double v) { return std::tanh(v); },
                    [](double v) { double t = std::tanh(v); return 1.0 - t * t; });
}
Tensor log_op(const Tensor& x) {
    return unary_op(x, [](double v) { return std::log(v); },
                    [](double v) { return 1.0 / v; });
}
Tensor exp_op(const Tensor& x) {
    return unary_op(x, [](double v) { return std::exp(v); },
                    [](double v) { return std::exp(v); });
}

Tensor pow_op(const Tensor& x, double p) {
    long n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (long i = 0; i < n; ++i) out[i] = std::pow(xd[i], p);
    bool rec = record_tape({&x});
    auto node = make_node(x.shape(), std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [p](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            for (long i = 0; i < self.numel(); ++i)
                nx.grad[i] += p * std::pow(nx.data[i], p - 1.0) * self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    long n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (long i = 0; i < n; ++i) out[i] = std::min(std::max(xd[i], lo), hi);
    bool rec = record_tape({&x});
    auto node = make_node(x.shape(), std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [lo, hi](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            for (long i = 0; i < self.numel(); ++i)
                if (nx.data[i] > lo && nx.data[i] < hi) nx.grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

// ------------------------------------------------------------------- matmul

namespace {

// c[b,m,n] += a[b,m,k] * bmat[b,k,n] on raw rows (batch index pre-resolved).
void mm_accum(const double* a, const double* b, double* c,
              long m, long k, long n, bool ta, bool tb) {
    for (long i = 0; i < m; ++i)
        for (long p = 0; p < k; ++p) {
            double av = ta ? a[p * m + i] : a[i * k + p];
            const double* brow = tb ? b + p : b + p * n;
            double* crow = c + i * n;
            if (tb) {
                for (long j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            } else {
                for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() < 2)
        throw std::invalid_argument("matmul: operands must have >= 2 dims");
    long m = a.shape()[a.dim() - 2], k = a.shape()[a.dim() - 1];
    long k2 = b.shape()[b.dim() - 2], n = b.shape()[b.dim() - 1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch = broadcast_shape(abatch, bbatch);
    Shape os = obatch;
    os.push_back(m);
    os.push_back(n);

    long nb = numel_of(obatch);
    std::vector<double> out(nb * m * n, 0.0);
    auto od = contiguous_strides(obatch);
    auto sa = broadcast_strides(abatch, obatch);
    auto sb = broadcast_strides(bbatch, obatch);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (long bi = 0; bi < nb; ++bi) {
        long ia = nb == 1 ? 0 : map_index(bi, od, obatch, sa);
        long ib = nb == 1 ? 0 : map_index(bi, od, obatch, sb);
        mm_accum(ad.data() + ia * m * k, bd.data() + ib * k * n,
                 out.data() + bi * m * n, m, k, n, false, false);
    }

    bool rec = record_tape({&a, &b});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {a.node(), b.node()};
        node->backward_fn = [m, k, n, obatch, abatch, bbatch](Node& self) {
            Node& na = *self.parents[0];
            Node& nb2 = *self.parents[1];
            long nbat = numel_of(obatch);
            auto od = contiguous_strides(obatch);
            auto sa = broadcast_strides(abatch, obatch);
            auto sb = broadcast_strides(bbatch, obatch);
            if (na.requires_grad) na.ensure_grad();
            if (nb2.requires_grad) nb2.ensure_grad();
            for (long bi = 0; bi < nbat; ++bi) {
                long ia = nbat == 1 ? 0 : map_index(bi, od, obatch, sa);
                long ib = nbat == 1 ? 0 : map_index(bi, od, obatch, sb);
                const double* gout = self.grad.data() + bi * m * n;
                if (na.requires_grad) {
                    // dA = dC * B^T  (m x n) * (n x k)
                    double* ga = na.grad.data() + ia * m * k;
                    const double* bmat = nb2.data.data() + ib * k * n;
                    for (long i = 0; i < m; ++i) {
                        const double* grow = gout + i * n;
                        for (long p = 0; p < k; ++p) {
                            const double* brow = bmat + p * n;
                            double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                            long j = 0;
                            for (; j + 4 <= n; j += 4) {
                                a0 += grow[j] * brow[j];
                                a1 += grow[j + 1] * brow[j + 1];
                                a2 += grow[j + 2] * brow[j + 2];
                                a3 += grow[j + 3] * brow[j + 3];
                            }
                            for (; j < n; ++j) a0 += grow[j] * brow[j];
                            ga[i * k + p] += (a0 + a1) + (a2 + a3);
                        }
                    }
                }
                if (nb2.requires_grad) {
                    // dB = A^T * dC  (k x m) * (m x n)
                    double* gb = nb2.grad.data() + ib * k * n;
                    const double* amat = na.data.data() + ia * m * k;
                    for (long i = 0; i < m; ++i)
                        for (long p = 0; p < k; ++p) {
                            double av = amat[i * k + p];
                            const double* grow = gout + i * n;
                            double* gbrow = gb + p * n;
                            for (long j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------- reductions

namespace {

std::vector<long> normalize_axes(const std::vector<long>& axes, long nd) {
    std::vector<long> out;
    for (long a : axes) {
        long v = a < 0 ? a + nd : a;
        if (v < 0 || v >= nd)
            throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range for ndim " +
                                        std::to_string(nd));
        out.push_back(v);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

} // namespace

enum class ReduceKind { Sum, Mean, Max };

static Tensor reduce_impl(const Tensor& x, const std::vector<long>& axes_in, bool keepdim,
                          ReduceKind kind) {
    long nd = x.dim();
    auto axes = normalize_axes(axes_in, nd);
    if (axes.empty()) return x;  // no-op reduction

    Shape kshape = x.shape();  // keepdim shape
    long count = 1;
    for (long a : axes) {
        count *= kshape[a];
        kshape[a] = 1;
    }
    Shape oshape;
    if (keepdim) {
        oshape = kshape;
    } else {
        for (long d = 0; d < nd; ++d)
            if (!std::binary_search(axes.begin(), axes.end(), d)) oshape.push_back(x.shape()[d]);
        if (oshape.empty()) oshape = {1};
    }

    long on = numel_of(kshape);
    double init = kind == ReduceKind::Max ? -std::numeric_limits<double>::infinity() : 0.0;
    std::vector<double> out(on, init);
    std::vector<long> argmax(kind == ReduceKind::Max ? on : 0, -1);

    // reducing a trailing block of axes maps contiguous input runs to one slot
    bool trailing = true;
    for (size_t i = 0; i < axes.size(); ++i)
        trailing = trailing && axes[i] == nd - static_cast<long>(axes.size()) + static_cast<long>(i);

    const auto& xd = x.data();
    long n = x.numel();
    if (trailing) {
        for (long i = 0; i < n; ++i) {
            long oi = i / count;
            if (kind == ReduceKind::Max) {
                if (xd[i] > out[oi]) { out[oi] = xd[i]; argmax[oi] = i; }
            } else {
                out[oi] += xd[i];
            }
        }
    } else {
        auto xst = contiguous_strides(x.shape());
        auto kst = broadcast_strides(kshape, x.shape());  // reduced axes -> stride 0
        for (long i = 0; i < n; ++i) {
            long oi = map_index(i, xst, x.shape(), kst);
            if (kind == ReduceKind::Max) {
                if (xd[i] > out[oi]) { out[oi] = xd[i]; argmax[oi] = i; }
            } else {
                out[oi] += xd[i];
            }
        }
    }
    if (kind == ReduceKind::Mean)
        for (double& v : out) v /= static_cast<double>(count);

    bool rec = record_tape({&x});
    auto node = make_node(oshape, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        Shape xs = x.shape();
        node->backward_fn = [kind, count, xs, kshape, argmax, trailing](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            if (kind == ReduceKind::Max) {
                for (size_t oi = 0; oi < argmax.size(); ++oi)
                    if (argmax[oi] >= 0) nx.grad[argmax[oi]] += self.grad[oi];
                return;
            }
            double scale = kind == ReduceKind::Mean ? 1.0 / count : 1.0;
            long n2 = nx.numel();
            if (trailing) {
                for (long i = 0; i < n2; ++i) nx.grad[i] += scale * self.grad[i / count];
                return;
            }
            auto xst = contiguous_strides(xs);
            auto kst = broadcast_strides(kshape, xs);
            for (long i = 0; i < n2; ++i)
                nx.grad[i] += scale * self.grad[map_index(i, xst, xs, kst)];
        };
    }
    return Tensor(node);
}

Tensor reduce_sum(const Tensor& x, const std::vector<long>& axes, bool keepdim) {
    return reduce_impl(x, axes, keepdim, ReduceKind::Sum);
}
Tensor reduce_mean(const Tensor& x, const std::vector<long>& axes, bool keepdim) {
    return reduce_impl(x, axes, keepdim, ReduceKind::Mean);
}
Tensor reduce_max(const Tensor& x, const std::vector<long>& axes, bool keepdim) {
    return reduce_impl(x, axes, keepdim, ReduceKind::Max);
}
Tensor sum_all(const Tensor& x) {
    std::vector<long> axes(x.dim());
    for (long d = 0; d < x.dim(); ++d) axes[d] = d;
    return reduce_sum(x, axes, false);
}

// -------------------------------------------------------------------- layout

Tensor reshape(const Tensor& x, const Shape& s) {
    if (numel_of(s) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) +
                                    " -> " + shape_str(s));
    bool rec = record_tape({&x});
    auto node = make_node(s, x.data(), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            for (long i = 0; i < self.numel(); ++i) nx.grad[i] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor permute(const Tensor& x, const std::vector<long>& axes) {
    long nd = x.dim();
    if (static_cast<long>(axes.size()) != nd)
        throw std::invalid_argument("permute: axes size mismatch");
    Shape os(nd);
    for (long d = 0; d < nd; ++d) os[d] = x.shape()[axes[d]];
    auto xst = contiguous_strides(x.shape());
    auto ost = contiguous_strides(os);
    std::vector<long> src_stride(nd);  // stride in x for each output dim
    for (long d = 0; d < nd; ++d) src_stride[d] = xst[axes[d]];

    long n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (long i = 0; i < n; ++i)
        out[i] = xd[map_index(i, ost, os, src_stride)];

    bool rec = record_tape({&x});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [os, ost, src_stride](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            for (long i = 0; i < self.numel(); ++i)
                nx.grad[map_index(i, ost, os, src_stride)] += self.grad[i];
        };
    }
    return Tensor(node);
}

Tensor pad(const Tensor& x, const std::vector<std::pair<long, long>>& widths) {
    long nd = x.dim();
    if (static_cast<long>(widths.size()) != nd)
        throw std::invalid_argument("pad: widths size mismatch");
    Shape os(nd);
    for (long d = 0; d < nd; ++d) {
        if (widths[d].first < 0 || widths[d].second < 0)
            throw std::invalid_argument("pad: negative width");
        os[d] = x.shape()[d] + widths[d].first + widths[d].second;
    }
    auto xst = contiguous_strides(x.shape());
    auto ost = contiguous_strides(os);
    std::vector<double> out(numel_of(os), 0.0);
    const auto& xd = x.data();
    long n = x.numel();
    for (long i = 0; i < n; ++i) {
        long oi = 0;
        for (long d = 0; d < nd; ++d) {
            long c = (i / xst[d]) % x.shape()[d];
            oi += (c + widths[d].first) * ost[d];
        }
        out[oi] = xd[i];
    }
    bool rec = record_tape({&x});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        Shape xs = x.shape();
        node->backward_fn = [xs, widths, ost](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            auto xst = contiguous_strides(xs);
            long nd = static_cast<long>(xs.size());
            long n2 = nx.numel();
            for (long i = 0; i < n2; ++i) {
                long oi = 0;
                for (long d = 0; d < nd; ++d) {
                    long c = (i / xst[d]) % xs[d];
                    oi += (c + widths[d].first) * ost[d];
                }
                nx.grad[i] += self.grad[oi];
            }
        };
    }
    return Tensor(node);
}

Tensor slice(const Tensor& x, const std::vector<long>& starts, const std::vector<long>& stops) {
    long nd = x.dim();
    if (static_cast<long>(starts.size()) != nd || static_cast<long>(stops.size()) != nd)
        throw std::invalid_argument("slice: bounds size mismatch");
    Shape os(nd);
    for (long d = 0; d < nd; ++d) {
        if (starts[d] < 0 || stops[d] > x.shape()[d] || starts[d] >= stops[d])
            throw std::invalid_argument("slice: out-of-bounds range on axis " + std::to_string(d));
        os[d] = stops[d] - starts[d];
    }
    auto xst = contiguous_strides(x.shape());
    auto ost = contiguous_strides(os);
    std::vector<double> out(numel_of(os));
    const auto& xd = x.data();
    long n = numel_of(os);
    for (long i = 0; i < n; ++i) {
        long xi = 0;
        for (long d = 0; d < nd; ++d) {
            long c = (i / ost[d]) % os[d];
            xi += (c + starts[d]) * xst[d];
        }
        out[i] = xd[xi];
    }
    bool rec = record_tape({&x});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [starts, os, ost, xst](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            long nd = static_cast<long>(os.size());
            for (long i = 0; i < self.numel(); ++i) {
                long xi = 0;
                for (long d = 0; d < nd; ++d) {
                    long c = (i / ost[d]) % os[d];
                    xi += (c + starts[d]) * xst[d];
                }
                nx.grad[xi] += self.grad[i];
            }
        };
    }
    return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& parts, long axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input");
    long nd = parts[0].dim();
    if (axis < 0) axis += nd;
    Shape os = parts[0].shape();
    long total = 0;
    for (const auto& p : parts) {
        for (long d = 0; d < nd; ++d)
            if (d != axis && p.shape()[d] != os[d])
                throw std::invalid_argument("concat: shape mismatch off-axis");
        total += p.shape()[axis];
    }
    os[axis] = total;
    // outer x axis x inner layout
    long inner = 1;
    for (long d = axis + 1; d < nd; ++d) inner *= os[d];
    long outer = numel_of(os) / (total * inner);

    std::vector<double> out(numel_of(os));
    long off = 0;
    for (const auto& p : parts) {
        long ax = p.shape()[axis];
        const auto& pd = p.data();
        for (long o = 0; o < outer; ++o)
            std::copy(pd.begin() + o * ax * inner, pd.begin() + (o + 1) * ax * inner,
                      out.begin() + (o * total + off) * inner);
        off += ax;
    }

    bool rec = false;
    for (const auto& p : parts) rec = rec || (grad_enabled() && p.requires_grad());
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        std::vector<long> sizes;
        for (const auto& p : parts) {
            node->parents.push_back(p.node());
            sizes.push_back(p.shape()[axis]);
        }
        node->backward_fn = [sizes, outer, inner, total](Node& self) {
            long off2 = 0;
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                Node& np = *self.parents[pi];
                long ax = sizes[pi];
                if (np.requires_grad) {
                    np.ensure_grad();
                    for (long o = 0; o < outer; ++o) {
                        const double* src = self.grad.data() + (o * total + off2) * inner;
                        double* dst = np.grad.data() + o * ax * inner;
                        for (long i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                off2 += ax;
            }
        };
    }
    return Tensor(node);
}

Tensor roll(const Tensor& x, const std::vector<long>& shifts, const std::vector<long>& axes) {
    long nd = x.dim();
    std::vector<long> sh(nd, 0);
    for (size_t i = 0; i < axes.size(); ++i) {
        long a = axes[i] < 0 ? axes[i] + nd : axes[i];
        long e = x.shape()[a];
        sh[a] = ((shifts[i] % e) + e) % e;
    }
    auto st = contiguous_strides(x.shape());
    long n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    Shape xs = x.shape();
    for (long i = 0; i < n; ++i) {
        long si = 0;
        for (long d = 0; d < nd; ++d) {
            long c = (i / st[d]) % xs[d];
            long cs = (c - sh[d] + xs[d]) % xs[d];  // out[c] = in[c - shift]
            si += cs * st[d];
        }
        out[i] = xd[si];
    }
    bool rec = record_tape({&x});
    auto node = make_node(xs, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [sh, st, xs](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            long nd = static_cast<long>(xs.size());
            for (long i = 0; i < self.numel(); ++i) {
                long si = 0;
                for (long d = 0; d < nd; ++d) {
                    long c = (i / st[d]) % xs[d];
                    long cs = (c - sh[d] + xs[d]) % xs[d];
                    si += cs * st[d];
                }
                nx.grad[si] += self.grad[i];
            }
        };
    }
    return Tensor(node);
}

Tensor index_select_last(const Tensor& x, const std::vector<long>& idx) {
    long nd = x.dim();
    long last = x.shape()[nd - 1];
    for (long j : idx)
        if (j < 0 || j >= last) throw std::invalid_argument("index_select_last: index out of range");
    Shape os = x.shape();
    os[nd - 1] = static_cast<long>(idx.size());
    long rows = x.numel() / last;
    long k = static_cast<long>(idx.size());
    std::vector<double> out(rows * k);
    const auto& xd = x.data();
    for (long r = 0; r < rows; ++r)
        for (long j = 0; j < k; ++j) out[r * k + j] = xd[r * last + idx[j]];
    bool rec = record_tape({&x});
    auto node = make_node(os, std::move(out), rec);
    if (rec) {
        node->parents = {x.node()};
        node->backward_fn = [idx, rows, k, last](Node& self) {
            Node& nx = *self.parents[0];
            if (!nx.requires_grad) return;
            nx.ensure_grad();
            for (long r = 0; r < rows; ++r)
                for (long j = 0; j < k; ++j)
                    nx.grad[r * last + idx[j]] += self.grad[r * k + j];
        };
    }
    return Tensor(node);
}

Tensor detach(const Tensor& x) {
    return Tensor(make_node(x.shape(), x.data(), false));
}

Tensor softmax_last(const Tensor& x) {
    long nd = x.dim();
    Tensor m = detach(reduce_max(x, {nd - 1}, true));
    Tensor e = exp_op(sub(x, m));
    Tensor s = reduce_sum(e, {nd - 1}, true);
    return div(e, s);
}

Tensor make_custom_op(Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& parents,
                      std::function<void(Node&)> backward_fn) {
    bool rec = false;
    if (g_grad_enabled)
        for (const auto& p : parents)
            if (p.defined() && p.requires_grad()) rec = true;
    auto node = make_node(std::move(shape), std::move(data), rec);
    if (rec) {
        for (const auto& p : parents)
            if (p.defined()) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(node);
}

// ----------------------------------------------------------------- backward

void backward(const Tensor& root) {
    if (root.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // iterative DFS to collect reachable nodes; shared_ptrs keep the tape
    // alive until the free pass below is done
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<NodePtr> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto& n : order) {
        if (n->backward_fn && n->requires_grad && !n->grad.empty()) n->backward_fn(*n);
    }
    // free the tape, keep leaf grads
    for (auto& n : order) {
        n->parents.clear();
        n->backward_fn = nullptr;
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    if (eps <= 0 || eps > 1e-2) throw std::invalid_argument("grad_check: eps out of (0, 1e-2]");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    backward(y);
    std::vector<double> analytic = x.grad();

    double max_rel = 0.0;
    for (long i = 0; i < x.numel(); ++i) {
        double orig = x.data()[i];
        double fp, fm;
        {
            NoGradGuard ng;
            x.data()[i] = orig + eps;
            fp = f(x).item();
            x.data()[i] = orig - eps;
            fm = f(x).item();
            x.data()[i] = orig;
        }
        double cd = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(cd), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic[i] - cd) / denom);
    }
    return max_rel;
}

} // namespace lego
