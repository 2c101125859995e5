#include "legonet/nn.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lego {

namespace {

Tensor he_uniform(const Shape& s, long fan_in, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> d(numel_of(s));
    for (auto& v : d) v = rng.uniform(-limit, limit);
    return Tensor::from(s, std::move(d), true);
}

} // namespace

Conv3dParams make_conv3d(long c_in, long c_out, long k, long stride, long padding, long groups,
                         Rng& rng, bool bias) {
    if (c_in % groups != 0 || c_out % groups != 0)
        throw std::invalid_argument("conv3d: channels not divisible by groups");
    Conv3dParams p;
    long cg = c_in / groups;
    p.weight = he_uniform({c_out, cg, k, k, k}, cg * k * k * k, rng);
    if (bias) p.bias = Tensor::zeros({c_out}, true);
    p.stride = stride;
    p.padding = padding;
    p.groups = groups;
    return p;
}

LinearParams make_linear(long in, long out, Rng& rng, bool bias) {
    LinearParams p;
    p.weight = he_uniform({out, in}, in, rng);
    if (bias) p.bias = Tensor::zeros({out}, true);
    return p;
}

LayerNormParams make_layer_norm(long c, double eps) {
    LayerNormParams p;
    p.gamma = Tensor::full({c}, 1.0, true);
    p.beta = Tensor::zeros({c}, true);
    p.eps = eps;
    return p;
}

SENormParams make_se_norm(long c, long reduction, Rng& rng, double eps) {
    if (reduction < 1 || c % reduction != 0)
        throw std::invalid_argument("se_norm: C must be divisible by reduction");
    SENormParams p;
    long h = c / reduction;
    p.reduce_weight = he_uniform({h, c}, c, rng);
    p.gamma_weight = Tensor::zeros({c, h}, true);
    p.beta_weight = Tensor::zeros({c, h}, true);
    p.reduction = reduction;
    p.eps = eps;
    return p;
}

AttentionParams make_attention(long c, long heads, long window, long shift, Rng& rng) {
    if (c % heads != 0) throw std::invalid_argument("attention: C not divisible by heads");
    if (shift < 0 || shift >= window) throw std::invalid_argument("attention: shift out of [0, window)");
    AttentionParams p;
    p.qkv_weight = he_uniform({3 * c, c}, c, rng);
    p.proj_weight = he_uniform({c, c}, c, rng);
    long span = 2 * window - 1;
    p.rel_pos_bias = Tensor::zeros({heads, span * span * span}, true);
    p.heads = heads;
    p.window = window;
    p.shift = shift;
    return p;
}

// -------------------------------------------------------------------- conv3d

namespace {

// output index range [lo, hi) of a tap: 0 <= o*S + off < extent
inline void tap_range(long extent, long n_out, long stride, long off, long& lo, long& hi) {
    lo = off < 0 ? (-off + stride - 1) / stride : 0;
    hi = extent - 1 - off < 0 ? 0 : (extent - 1 - off) / stride + 1;
    lo = std::min(lo, n_out);
    hi = std::min(hi, n_out);
    if (hi < lo) hi = lo;
}

} // namespace

Tensor conv3d(const Tensor& x, const Conv3dParams& p) {
    if (x.dim() != 5) throw std::invalid_argument("conv3d: input must be 5-D [B,C,D,H,W]");
    long B = x.shape()[0], Cin = x.shape()[1];
    long D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    long Cout = p.weight.shape()[0], Cg = p.weight.shape()[1], K = p.weight.shape()[2];
    long S = p.stride, P = p.padding, G = p.groups;
    if (Cin != Cg * G)
        throw std::invalid_argument("conv3d: channel mismatch, input C=" + std::to_string(Cin) +
                                    " weight expects " + std::to_string(Cg * G));
    long Do = (D + 2 * P - K) / S + 1;
    long Ho = (H + 2 * P - K) / S + 1;
    long Wo = (W + 2 * P - K) / S + 1;
    if (Do <= 0 || Ho <= 0 || Wo <= 0)
        throw std::invalid_argument("conv3d: non-positive output extent");
    long CoutG = Cout / G;

    std::vector<double> out(B * Cout * Do * Ho * Wo);
    const double* xd = x.data().data();
    const double* wd = p.weight.data().data();
    const double* bd = p.bias.defined() ? p.bias.data().data() : nullptr;

    long spatial_in = D * H * W;
    long spatial_out = Do * Ho * Wo;

    // per-tap valid output ranges along W, plus the interior where every tap is valid
    std::vector<long> wlo(K), whi(K);
    long ilo = 0, ihi = Wo;
    for (long kw = 0; kw < K; ++kw) {
        tap_range(W, Wo, S, kw - P, wlo[kw], whi[kw]);
        ilo = std::max(ilo, wlo[kw]);
        ihi = std::min(ihi, whi[kw]);
    }
    if (ihi < ilo) ihi = ilo;
    // gather range for dx when S == 1: input cols touched by every tap
    long jlo = std::max(0L, K - 1 - P);
    long jhi = std::min(W, Wo - P);
    if (jhi < jlo) jhi = jlo;

    // row-blocked: each output row accumulates all taps while its inputs stay cached
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long b = 0; b < B; ++b)
        for (long oc = 0; oc < Cout; ++oc) {
            long g = oc / CoutG;
            const double* wbase = wd + oc * Cg * K * K * K;
            double* obase = out.data() + (b * Cout + oc) * spatial_out;
            const double* xg = xd + (b * Cin + g * Cg) * spatial_in;
            double bv = bd ? bd[oc] : 0.0;
            for (long od = 0; od < Do; ++od) {
                long id0 = od * S - P;
                long kdlo = id0 < 0 ? -id0 : 0;
                long kdhi = std::min(K, D - id0);
                for (long oh = 0; oh < Ho; ++oh) {
                    long ih0 = oh * S - P;
                    long khlo = ih0 < 0 ? -ih0 : 0;
                    long khhi = std::min(K, H - ih0);
                    double* orow = obase + (od * Ho + oh) * Wo;
                    for (long i = 0; i < Wo; ++i) orow[i] = bv;
                    for (long ic = 0; ic < Cg; ++ic) {
                        const double* xc = xg + ic * spatial_in;
                        for (long kd = kdlo; kd < kdhi; ++kd) {
                            long id = id0 + kd;
                            if (S == 1 && K == 3 && khlo == 0 && khhi == 3) {
                                // all three kh taps valid: one pass over the row
                                const double* x0 = xc + (id * H + ih0) * W - P;
                                const double* x1 = x0 + W;
                                const double* x2 = x1 + W;
                                const double* w9 = wbase + (ic * 9 + kd * 3) * 3;
                                for (long i = ilo; i < ihi; ++i)
                                    orow[i] += w9[0] * x0[i] + w9[1] * x0[i + 1] +
                                               w9[2] * x0[i + 2] + w9[3] * x1[i] +
                                               w9[4] * x1[i + 1] + w9[5] * x1[i + 2] +
                                               w9[6] * x2[i] + w9[7] * x2[i + 1] +
                                               w9[8] * x2[i + 2];
                                for (long kh = 0; kh < 3; ++kh) {
                                    const double* xrow = xc + (id * H + ih0 + kh) * W;
                                    const double* wrow = w9 + kh * 3;
                                    for (long kw = 0; kw < 3; ++kw) {
                                        double wv = wrow[kw];
                                        long off = kw - P;
                                        long hi1 = std::min(whi[kw], ilo);
                                        for (long i = wlo[kw]; i < hi1; ++i)
                                            orow[i] += wv * xrow[i + off];
                                        long lo2 = std::max(wlo[kw], ihi);
                                        for (long i = lo2; i < whi[kw]; ++i)
                                            orow[i] += wv * xrow[i + off];
                                    }
                                }
                                continue;
                            }
                            for (long kh = khlo; kh < khhi; ++kh) {
                                const double* xrow = xc + (id * H + ih0 + kh) * W;
                                const double* wrow = wbase + (ic * K * K + kd * K + kh) * K;
                                if (S == 1) {
                                    const double* xo = xrow - P;
                                    if (K == 3) {
                                        double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                        for (long i = ilo; i < ihi; ++i)
                                            orow[i] +=
                                                w0 * xo[i] + w1 * xo[i + 1] + w2 * xo[i + 2];
                                    } else {
                                        for (long i = ilo; i < ihi; ++i) {
                                            const double* xp = xo + i;
                                            double s = 0;
                                            for (long kw = 0; kw < K; ++kw)
                                                s += wrow[kw] * xp[kw];
                                            orow[i] += s;
                                        }
                                    }
                                    for (long kw = 0; kw < K; ++kw) {
                                        double wv = wrow[kw];
                                        long off = kw - P;
                                        long hi1 = std::min(whi[kw], ilo);
                                        for (long i = wlo[kw]; i < hi1; ++i)
                                            orow[i] += wv * xrow[i + off];
                                        long lo2 = std::max(wlo[kw], ihi);
                                        for (long i = lo2; i < whi[kw]; ++i)
                                            orow[i] += wv * xrow[i + off];
                                    }
                                } else {
                                    for (long kw = 0; kw < K; ++kw) {
                                        double wv = wrow[kw];
                                        long off = kw - P;
                                        for (long i = wlo[kw]; i < whi[kw]; ++i)
                                            orow[i] += wv * xrow[i * S + off];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

    std::vector<Tensor> parents = {x, p.weight};
    if (p.bias.defined()) parents.push_back(p.bias);
    Shape oshape{B, Cout, Do, Ho, Wo};
    return make_custom_op(
        oshape, std::move(out), parents,
        [=](Node& self) {
            Node& nx = *self.parents[0];
            Node& nw = *self.parents[1];
            Node* nb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
            const double* gout = self.grad.data();
            bool need_dx = nx.requires_grad;
            bool need_dw = nw.requires_grad;
            bool need_db = nb && nb->requires_grad;
            if (need_dx) nx.ensure_grad();
            if (need_dw) nw.ensure_grad();
            if (need_db) nb->ensure_grad();
            double* gx = need_dx ? nx.grad.data() : nullptr;
            double* gw = need_dw ? nw.grad.data() : nullptr;
            const double* xd2 = nx.data.data();
            const double* wd2 = nw.data.data();
            for (long b = 0; b < B; ++b)
                for (long oc = 0; oc < Cout; ++oc) {
                    long g = oc / CoutG;
                    const double* wbase = wd2 + oc * Cg * K * K * K;
                    double* gwbase = need_dw ? gw + oc * Cg * K * K * K : nullptr;
                    const double* gob = gout + (b * Cout + oc) * spatial_out;
                    long ch0 = (b * Cin + g * Cg) * spatial_in;
                    double bacc = 0.0;
                    for (long od = 0; od < Do; ++od) {
                        long id0 = od * S - P;
                        long kdlo = id0 < 0 ? -id0 : 0;
                        long kdhi = std::min(K, D - id0);
                        for (long oh = 0; oh < Ho; ++oh) {
                            long ih0 = oh * S - P;
                            long khlo = ih0 < 0 ? -ih0 : 0;
                            long khhi = std::min(K, H - ih0);
                            const double* gorow = gob + (od * Ho + oh) * Wo;
                            if (need_db) {
                                double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                long i = 0;
                                for (; i + 4 <= Wo; i += 4) {
                                    a0 += gorow[i];
                                    a1 += gorow[i + 1];
                                    a2 += gorow[i + 2];
                                    a3 += gorow[i + 3];
                                }
                                for (; i < Wo; ++i) a0 += gorow[i];
                                bacc += (a0 + a1) + (a2 + a3);
                            }
                            for (long ic = 0; ic < Cg; ++ic) {
                                long ch = ch0 + ic * spatial_in;
                                for (long kd = kdlo; kd < kdhi; ++kd) {
                                    long id = id0 + kd;
                                    if (S == 1 && K == 3 && khlo == 0 && khhi == 3) {
                                        long base0 = ch + (id * H + ih0) * W;
                                        const double* w9 = wbase + (ic * 9 + kd * 3) * 3;
                                        if (need_dx) {
                                            for (long kh = 0; kh < 3; ++kh) {
                                                double* gxrow = gx + base0 + kh * W;
                                                const double* wrow = w9 + kh * 3;
                                                double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                                const double* gp = gorow + P;
                                                for (long j = jlo; j < jhi; ++j)
                                                    gxrow[j] += w0 * gp[j] + w1 * gp[j - 1] +
                                                                w2 * gp[j - 2];
                                                for (long kw = 0; kw < 3; ++kw) {
                                                    double wv = wrow[kw];
                                                    long off = kw - P;
                                                    long hi1 = std::min(whi[kw], jlo - off);
                                                    for (long i = wlo[kw]; i < hi1; ++i)
                                                        gxrow[i + off] += wv * gorow[i];
                                                    long lo2 = std::max(wlo[kw], jhi - off);
                                                    for (long i = lo2; i < whi[kw]; ++i)
                                                        gxrow[i + off] += wv * gorow[i];
                                                }
                                            }
                                        }
                                        if (need_dw) {
                                            // all three kh taps valid: one pass over the row
                                            const double* x0 = xd2 + base0 - P;
                                            const double* x1 = x0 + W;
                                            const double* x2 = x1 + W;
                                            double m[9] = {0};
                                            for (long i = ilo; i < ihi; ++i) {
                                                double gv = gorow[i];
                                                m[0] += x0[i] * gv;
                                                m[1] += x0[i + 1] * gv;
                                                m[2] += x0[i + 2] * gv;
                                                m[3] += x1[i] * gv;
                                                m[4] += x1[i + 1] * gv;
                                                m[5] += x1[i + 2] * gv;
                                                m[6] += x2[i] * gv;
                                                m[7] += x2[i + 1] * gv;
                                                m[8] += x2[i + 2] * gv;
                                            }
                                            for (long kh = 0; kh < 3; ++kh) {
                                                const double* xrow = xd2 + base0 + kh * W;
                                                for (long kw = 0; kw < 3; ++kw) {
                                                    double acc = 0;
                                                    long off = kw - P;
                                                    long hi1 = std::min(whi[kw], ilo);
                                                    for (long i2 = wlo[kw]; i2 < hi1; ++i2)
                                                        acc += xrow[i2 + off] * gorow[i2];
                                                    long lo2 = std::max(wlo[kw], ihi);
                                                    for (long i2 = lo2; i2 < whi[kw]; ++i2)
                                                        acc += xrow[i2 + off] * gorow[i2];
                                                    m[kh * 3 + kw] += acc;
                                                }
                                            }
                                            double* gwd = gwbase + (ic * 9 + kd * 3) * 3;
                                            for (int t = 0; t < 9; ++t) gwd[t] += m[t];
                                        }
                                        continue;
                                    }
                                    for (long kh = khlo; kh < khhi; ++kh) {
                                        long base = ch + (id * H + ih0 + kh) * W;
                                        const double* xrow = xd2 + base;
                                        double* gxrow = need_dx ? gx + base : nullptr;
                                        long woff = (ic * K * K + kd * K + kh) * K;
                                        const double* wrow = wbase + woff;
                                        if (S == 1) {
                                            if (need_dx) {
                                                // gather form: one read-modify-write per input col
                                                if (K == 3) {
                                                    double w0 = wrow[0], w1 = wrow[1],
                                                           w2 = wrow[2];
                                                    const double* gp = gorow + P;
                                                    for (long j = jlo; j < jhi; ++j)
                                                        gxrow[j] += w0 * gp[j] + w1 * gp[j - 1] +
                                                                    w2 * gp[j - 2];
                                                } else {
                                                    for (long j = jlo; j < jhi; ++j) {
                                                        const double* gp = gorow + j + P;
                                                        double s = 0;
                                                        for (long kw = 0; kw < K; ++kw)
                                                            s += wrow[kw] * gp[-kw];
                                                        gxrow[j] += s;
                                                    }
                                                }
                                                for (long kw = 0; kw < K; ++kw) {
                                                    double wv = wrow[kw];
                                                    long off = kw - P;
                                                    long hi1 = std::min(whi[kw], jlo - off);
                                                    for (long i = wlo[kw]; i < hi1; ++i)
                                                        gxrow[i + off] += wv * gorow[i];
                                                    long lo2 = std::max(wlo[kw], jhi - off);
                                                    for (long i = lo2; i < whi[kw]; ++i)
                                                        gxrow[i + off] += wv * gorow[i];
                                                }
                                            }
                                            if (need_dw) {
                                                const double* xo = xrow - P;
                                                if (K == 3) {
                                                    double a0 = 0, a1 = 0, a2 = 0;
                                                    double b0 = 0, b1 = 0, b2 = 0;
                                                    long i = ilo;
                                                    for (; i + 2 <= ihi; i += 2) {
                                                        double g0 = gorow[i], g1 = gorow[i + 1];
                                                        a0 += xo[i] * g0;
                                                        a1 += xo[i + 1] * g0;
                                                        a2 += xo[i + 2] * g0;
                                                        b0 += xo[i + 1] * g1;
                                                        b1 += xo[i + 2] * g1;
                                                        b2 += xo[i + 3] * g1;
                                                    }
                                                    for (; i < ihi; ++i) {
                                                        double g0 = gorow[i];
                                                        a0 += xo[i] * g0;
                                                        a1 += xo[i + 1] * g0;
                                                        a2 += xo[i + 2] * g0;
                                                    }
                                                    double e0 = 0, e1 = 0, e2 = 0;
                                                    for (long kw = 0; kw < 3; ++kw) {
                                                        double acc = 0;
                                                        long off = kw - P;
                                                        long hi1 = std::min(whi[kw], ilo);
                                                        for (long i2 = wlo[kw]; i2 < hi1; ++i2)
                                                            acc += xrow[i2 + off] * gorow[i2];
                                                        long lo2 = std::max(wlo[kw], ihi);
                                                        for (long i2 = lo2; i2 < whi[kw]; ++i2)
                                                            acc += xrow[i2 + off] * gorow[i2];
                                                        (kw == 0 ? e0 : kw == 1 ? e1 : e2) += acc;
                                                    }
                                                    gwbase[woff] += a0 + b0 + e0;
                                                    gwbase[woff + 1] += a1 + b1 + e1;
                                                    gwbase[woff + 2] += a2 + b2 + e2;
                                                } else {
                                                    for (long kw = 0; kw < K; ++kw) {
                                                        long off = kw - P;
                                                        double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                                        long i = wlo[kw];
                                                        for (; i + 4 <= whi[kw]; i += 4) {
                                                            a0 += xrow[i + off] * gorow[i];
                                                            a1 += xrow[i + 1 + off] * gorow[i + 1];
                                                            a2 += xrow[i + 2 + off] * gorow[i + 2];
                                                            a3 += xrow[i + 3 + off] * gorow[i + 3];
                                                        }
                                                        for (; i < whi[kw]; ++i)
                                                            a0 += xrow[i + off] * gorow[i];
                                                        gwbase[woff + kw] += (a0 + a1) + (a2 + a3);
                                                    }
                                                }
                                            }
                                        } else {
                                            for (long kw = 0; kw < K; ++kw) {
                                                double wv = wrow[kw];
                                                long off = kw - P;
                                                if (need_dx)
                                                    for (long i = wlo[kw]; i < whi[kw]; ++i)
                                                        gxrow[i * S + off] += wv * gorow[i];
                                                if (need_dw) {
                                                    double acc = 0;
                                                    for (long i = wlo[kw]; i < whi[kw]; ++i)
                                                        acc += xrow[i * S + off] * gorow[i];
                                                    gwbase[woff + kw] += acc;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if (need_db) nb->grad[oc] += bacc;
                }
        });
}


// stride-2 k=2 transposed conv: every output voxel receives exactly one tap
Tensor transposed_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.dim() != 5) throw std::invalid_argument("transposed_conv3d: input must be 5-D");
    long B = x.shape()[0], Cin = x.shape()[1];
    long D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    if (weight.shape()[0] != Cin)
        throw std::invalid_argument("transposed_conv3d: channel mismatch, input C=" +
                                    std::to_string(Cin) + " weight expects " +
                                    std::to_string(weight.shape()[0]));
    long Cout = weight.shape()[1];
    long Do = 2 * D, Ho = 2 * H, Wo = 2 * W;

    std::vector<double> out(B * Cout * Do * Ho * Wo);
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    long spatial_in = D * H * W, spatial_out = Do * Ho * Wo;

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (long b = 0; b < B; ++b)
        for (long oc = 0; oc < Cout; ++oc) {
            double* ob = out.data() + (b * Cout + oc) * spatial_out;
            for (long od = 0; od < Do; ++od)
                for (long oh = 0; oh < Ho; ++oh)
                    for (long ow = 0; ow < Wo; ++ow) {
                        long tap = ((od & 1) * 2 + (oh & 1)) * 2 + (ow & 1);
                        double acc = bd ? bd[oc] : 0.0;
                        for (long ic = 0; ic < Cin; ++ic)
                            acc += wd[(ic * Cout + oc) * 8 + tap] *
                                   xd[(b * Cin + ic) * spatial_in +
                                      ((od / 2) * H + oh / 2) * W + ow / 2];
                        ob[(od * Ho + oh) * Wo + ow] = acc;
                    }
        }

    std::vector<Tensor> parents = {x, weight};
    if (bias.defined()) parents.push_back(bias);
    return make_custom_op(
        {B, Cout, Do, Ho, Wo}, std::move(out), parents,
        [=](Node& self) {
            Node& nx = *self.parents[0];
            Node& nw = *self.parents[1];
            Node* nb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
            const double* gout = self.grad.data();
            if (nx.requires_grad) {
                nx.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (long b = 0; b < B; ++b)
                    for (long ic = 0; ic < Cin; ++ic) {
                        double* gx = nx.grad.data() + (b * Cin + ic) * spatial_in;
                        for (long id = 0; id < D; ++id)
                            for (long ih = 0; ih < H; ++ih)
                                for (long iw = 0; iw < W; ++iw) {
                                    double acc = 0.0;
                                    for (long oc = 0; oc < Cout; ++oc)
                                        for (long tap = 0; tap < 8; ++tap) {
                                            long od = 2 * id + (tap >> 2);
                                            long oh = 2 * ih + ((tap >> 1) & 1);
                                            long ow = 2 * iw + (tap & 1);
                                            acc += nw.data[(ic * Cout + oc) * 8 + tap] *
                                                   gout[(b * Cout + oc) * spatial_out +
                                                        (od * Ho + oh) * Wo + ow];
                                        }
                                    gx[(id * H + ih) * W + iw] += acc;
                                }
                    }
            }
            if (nw.requires_grad) {
                nw.ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (long ic = 0; ic < Cin; ++ic)
                    for (long oc = 0; oc < Cout; ++oc)
                        for (long tap = 0; tap < 8; ++tap) {
                            double acc = 0.0;
                            for (long b = 0; b < B; ++b)
                                for (long id = 0; id < D; ++id)
                                    for (long ih = 0; ih < H; ++ih)
                                        for (long iw = 0; iw < W; ++iw) {
                                            long od = 2 * id + (tap >> 2);
                                            long oh = 2 * ih + ((tap >> 1) & 1);
                                            long ow = 2 * iw + (tap & 1);
                                            acc += nx.data[(b * Cin + ic) * spatial_in +
                                                           (id * H + ih) * W + iw] *
                                                   gout[(b * Cout + oc) * spatial_out +
                                                        (od * Ho + oh) * Wo + ow];
                                        }
                            nw.grad[(ic * Cout + oc) * 8 + tap] += acc;
                        }
            }
            if (nb && nb->requires_grad) {
                nb->ensure_grad();
                for (long b = 0; b < B; ++b)
                    for (long oc = 0; oc < Cout; ++oc) {
                        const double* gob = gout + (b * Cout + oc) * spatial_out;
                        double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                        long i = 0;
                        for (; i + 4 <= spatial_out; i += 4) {
                            a0 += gob[i];
                            a1 += gob[i + 1];
                            a2 += gob[i + 2];
                            a3 += gob[i + 3];
                        }
                        for (; i < spatial_out; ++i) a0 += gob[i];
                        nb->grad[oc] += (a0 + a1) + (a2 + a3);
                    }
            }
        });
}

// ----------------------------------------------------------- linear / norms

Tensor linear(const Tensor& x, const LinearParams& p) {
    long cin = p.weight.shape()[1];
    if (x.shape().back() != cin)
        throw std::invalid_argument("linear: trailing dim " + std::to_string(x.shape().back()) +
                                    " != in features " + std::to_string(cin));
    long cout = p.weight.shape()[0];
    long rows = x.numel() / cin;
    Tensor flat = reshape(x, {rows, cin});
    // x W^T via matmul(x, permute(W))
    Tensor y = matmul(flat, permute(p.weight, {1, 0}));
    if (p.bias.defined()) y = add(y, p.bias);
    Shape os = x.shape();
    os.back() = cout;
    return reshape(y, os);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
    long c = p.gamma.shape()[0];
    if (x.shape().back() != c)
        throw std::invalid_argument("layer_norm: trailing dim mismatch");
    long last = x.dim() - 1;
    Tensor mu = reduce_mean(x, {last}, true);
    Tensor xc = sub(x, mu);
    Tensor var = reduce_mean(mul(xc, xc), {last}, true);
    Tensor inv = pow_op(add(var, Tensor::scalar(p.eps)), -0.5);
    return add(mul(mul(xc, inv), p.gamma), p.beta);
}

Tensor instance_standardize(const Tensor& x, double eps) {
    if (x.dim() != 5) throw std::invalid_argument("instance_standardize: expected [B,C,D,H,W]");
    long BC = x.shape()[0] * x.shape()[1];
    long n = x.shape()[2] * x.shape()[3] * x.shape()[4];
    const double* xd = x.data().data();
    std::vector<double> out(x.numel());
    std::vector<double> inv(BC);
    for (long bc = 0; bc < BC; ++bc) {
        const double* xr = xd + bc * n;
        double mu = 0;
        for (long i = 0; i < n; ++i) mu += xr[i];
        mu /= static_cast<double>(n);
        double var = 0;
        for (long i = 0; i < n; ++i) {
            double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double s = std::pow(var + eps, -0.5);
        inv[bc] = s;
        double* orow = out.data() + bc * n;
        for (long i = 0; i < n; ++i) orow[i] = (xr[i] - mu) * s;
    }
    // dx = s * (g - mean(g) - y * mean(g*y))
    return make_custom_op(x.shape(), std::move(out), {x},
                          [BC, n, inv = std::move(inv)](Node& self) {
                              Node& nx = *self.parents[0];
                              if (!nx.requires_grad) return;
                              nx.ensure_grad();
                              const double* g = self.grad.data();
                              const double* y = self.data.data();
                              double* gx = nx.grad.data();
                              for (long bc = 0; bc < BC; ++bc) {
                                  const double* gr = g + bc * n;
                                  const double* yr = y + bc * n;
                                  double gm = 0, gym = 0;
                                  for (long i = 0; i < n; ++i) {
                                      gm += gr[i];
                                      gym += gr[i] * yr[i];
                                  }
                                  gm /= static_cast<double>(n);
                                  gym /= static_cast<double>(n);
                                  double s = inv[bc];
                                  double* gxr = gx + bc * n;
                                  for (long i = 0; i < n; ++i)
                                      gxr[i] += s * (gr[i] - gm - yr[i] * gym);
                              }
                          });
}

Tensor se_norm(const Tensor& x, const SENormParams& p) {
    long C = p.reduce_weight.shape()[1];
    if (x.shape()[1] != C)
        throw std::invalid_argument("se_norm: channel mismatch, input C=" +
                                    std::to_string(x.shape()[1]) + " params C=" + std::to_string(C));
    long B = x.shape()[0];
    Tensor xp = instance_standardize(x, p.eps);
    // squeeze: global average pool -> [B, C]
    Tensor z = reshape(reduce_mean(x, {2, 3, 4}, false), {B, C});
    Tensor h = relu(matmul(z, permute(p.reduce_weight, {1, 0})));
    Tensor gam = sigmoid(matmul(h, permute(p.gamma_weight, {1, 0})));
    Tensor bet = tanh_op(matmul(h, permute(p.beta_weight, {1, 0})));
    gam = reshape(gam, {B, C, 1, 1, 1});
    bet = reshape(bet, {B, C, 1, 1, 1});
    return add(mul(gam, xp), bet);
}

// ------------------------------------------------------------------ windows

Tensor to_tokens(const Tensor& x) { return permute(x, {0, 2, 3, 4, 1}); }
Tensor to_channels_first(const Tensor& x) { return permute(x, {0, 4, 1, 2, 3}); }

Tensor window_partition(const Tensor& x, long window, long shift, WindowLayout& layout) {
    if (x.dim() != 5) throw std::invalid_argument("window_partition: expected tokens [B,D,H,W,C]");
    long B = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3], C = x.shape()[4];
    long w = window;
    auto up = [w](long e) { return (e + w - 1) / w * w; };
    long Dp = up(D), Hp = up(H), Wp = up(W);

    Tensor t = x;
    if (Dp != D || Hp != H || Wp != W)
        t = pad(t, {{0, 0}, {0, Dp - D}, {0, Hp - H}, {0, Wp - W}, {0, 0}});
    if (shift > 0) t = roll(t, {-shift, -shift, -shift}, {1, 2, 3});

    long nd = Dp / w, nh = Hp / w, nw = Wp / w;
    t = reshape(t, {B, nd, w, nh, w, nw, w, C});
    t = permute(t, {0, 1, 3, 5, 2, 4, 6, 7});
    t = reshape(t, {B * nd * nh * nw, w * w * w, C});

    layout.padded = {B, Dp, Hp, Wp, C};
    layout.original = {B, D, H, W, C};
    layout.window = w;
    layout.shift = shift;
    layout.windows_per_batch = nd * nh * nw;
    return t;
}

Tensor window_reverse(const Tensor& windows, const WindowLayout& layout) {
    long B = layout.padded[0], Dp = layout.padded[1], Hp = layout.padded[2], Wp = layout.padded[3];
    long C = layout.padded[4], w = layout.window;
    long nd = Dp / w, nh = Hp / w, nw = Wp / w;
    Tensor t = reshape(windows, {B, nd, nh, nw, w, w, w, C});
    t = permute(t, {0, 1, 4, 2, 5, 3, 6, 7});
    t = reshape(t, {B, Dp, Hp, Wp, C});
    if (layout.shift > 0)
        t = roll(t, {layout.shift, layout.shift, layout.shift}, {1, 2, 3});
    const Shape& o = layout.original;
    if (o[1] != Dp || o[2] != Hp || o[3] != Wp)
        t = slice(t, {0, 0, 0, 0, 0}, {B, o[1], o[2], o[3], C});
    return t;
}

Tensor make_window_attn_mask(long D, long H, long W, long Dp, long Hp, long Wp,
                             long window, long shift) {
    bool padded = (D != Dp || H != Hp || W != Wp);
    if (shift == 0 && !padded) return Tensor();

    long w = window;
    // region id per padded coordinate; -1 marks zero padding
    auto axis_region = [&](long c, long size, long orig) -> long {
        if (c >= orig) return -1;
        if (shift == 0) return 0;
        if (c < size - w) return 0;
        if (c < size - shift) return 1;
        return 2;
    };
    std::vector<long> id(Dp * Hp * Wp);
    for (long d = 0; d < Dp; ++d)
        for (long h = 0; h < Hp; ++h)
            for (long x = 0; x < Wp; ++x) {
                long rd = axis_region(d, Dp, D), rh = axis_region(h, Hp, H), rw = axis_region(x, Wp, W);
                id[(d * Hp + h) * Wp + x] =
                    (rd < 0 || rh < 0 || rw < 0) ? -1 : (rd * 3 + rh) * 3 + rw;
            }
    // apply the same cyclic roll the data gets
    std::vector<long> rolled(id.size());
    for (long d = 0; d < Dp; ++d)
        for (long h = 0; h < Hp; ++h)
            for (long x = 0; x < Wp; ++x) {
                long sd = (d + shift) % Dp, sh = (h + shift) % Hp, sw = (x + shift) % Wp;
                rolled[(d * Hp + h) * Wp + x] = id[(sd * Hp + sh) * Wp + sw];
            }

    long nd = Dp / w, nh = Hp / w, nw = Wp / w;
    long nW = nd * nh * nw, T = w * w * w;
    std::vector<double> mask(nW * T * T, 0.0);
    for (long wi = 0; wi < nW; ++wi) {
        long wd = wi / (nh * nw), wh = (wi / nw) % nh, ww = wi % nw;
        std::vector<long> ids(T);
        for (long t = 0; t < T; ++t) {
            long d = wd * w + t / (w * w), h = wh * w + (t / w) % w, x = ww * w + t % w;
            ids[t] = rolled[(d * Hp + h) * Wp + x];
        }
        for (long i = 0; i < T; ++i)
            for (long j = 0; j < T; ++j)
                if (ids[i] != ids[j]) mask[(wi * T + i) * T + j] = -1e9;
    }
    return Tensor::from({nW, T, T}, std::move(mask));
}

std::vector<long> rel_pos_index(long window) {
    long w = window, T = w * w * w, span = 2 * w - 1;
    std::vector<long> idx(T * T);
    for (long i = 0; i < T; ++i) {
        long di = i / (w * w), hi = (i / w) % w, wi = i % w;
        for (long j = 0; j < T; ++j) {
            long dj = j / (w * w), hj = (j / w) % w, wj = j % w;
            long od = di - dj + w - 1, oh = hi - hj + w - 1, ow = wi - wj + w - 1;
            idx[i * T + j] = (od * span + oh) * span + ow;
        }
    }
    return idx;
}

Tensor window_attention(const Tensor& x_windows, const AttentionParams& p, const Tensor& mask) {
    long Nw = x_windows.shape()[0], T = x_windows.shape()[1], C = x_windows.shape()[2];
    long hn = p.heads, hd = C / hn;
    if (hd * hn != C) throw std::invalid_argument("window_attention: C not divisible by heads");

    Tensor qkv = linear(x_windows, {p.qkv_weight, Tensor()});    // [Nw, T, 3C]
    qkv = reshape(qkv, {Nw, T, 3, hn, hd});
    qkv = permute(qkv, {2, 0, 3, 1, 4});                          // [3, Nw, hn, T, hd]
    Tensor q = reshape(slice(qkv, {0, 0, 0, 0, 0}, {1, Nw, hn, T, hd}), {Nw, hn, T, hd});
    Tensor k = reshape(slice(qkv, {1, 0, 0, 0, 0}, {2, Nw, hn, T, hd}), {Nw, hn, T, hd});
    Tensor v = reshape(slice(qkv, {2, 0, 0, 0, 0}, {3, Nw, hn, T, hd}), {Nw, hn, T, hd});

    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor attn = matmul(q, permute(k, {0, 1, 3, 2})) * scale;    // [Nw, hn, T, T]

    // learned relative position bias, indexed by 3-D offset
    Tensor bias = index_select_last(p.rel_pos_bias, rel_pos_index(p.window));  // [hn, T*T]
    bias = reshape(bias, {hn, T, T});
    attn = add(attn, bias);

    if (mask.defined()) {
        long nW = mask.shape()[0];
        long B = Nw / nW;
        attn = reshape(attn, {B, nW, hn, T, T});
        attn = add(attn, reshape(mask, {nW, 1, T, T}));
        attn = reshape(attn, {Nw, hn, T, T});
    }
    attn = softmax_last(attn);

    Tensor out = matmul(attn, v);                                 // [Nw, hn, T, hd]
    out = permute(out, {0, 2, 1, 3});                             // [Nw, T, hn, hd]
    out = reshape(out, {Nw, T, C});
    return linear(out, {p.proj_weight, Tensor()});
}

// -------------------------------------------------------------- patch merge

PatchMergeParams make_patch_merge(long c_in, long c_out, Rng& rng) {
    PatchMergeParams p;
    p.norm = make_layer_norm(8 * c_in);
    p.proj = make_linear(8 * c_in, c_out, rng, false);
    return p;
}

Tensor patch_merge_downsample(const Tensor& x, const PatchMergeParams& p) {
    long B = x.shape()[0], C = x.shape()[1];
    long D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
    Tensor t = x;
    if (D % 2 || H % 2 || W % 2) {
        t = pad(t, {{0, 0}, {0, 0}, {0, D % 2}, {0, H % 2}, {0, W % 2}});
        D += D % 2;
        H += H % 2;
        W += W % 2;
    }
    t = to_tokens(t);                                             // [B,D,H,W,C]
    t = reshape(t, {B, D / 2, 2, H / 2, 2, W / 2, 2, C});
    // offset-major (d,h,w) with w fastest, channel minor
    t = permute(t, {0, 1, 3, 5, 2, 4, 6, 7});                     // [B,D/2,H/2,W/2,2,2,2,C]
    t = reshape(t, {B, D / 2, H / 2, W / 2, 8 * C});
    t = layer_norm(t, p.norm);
    t = linear(t, p.proj);
    return to_channels_first(t);
}

} // namespace lego
