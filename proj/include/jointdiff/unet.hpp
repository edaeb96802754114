#ifndef JOINTDIFF_UNET_HPP
#define JOINTDIFF_UNET_HPP

#include <cmath>
#include <string>
#include <vector>

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

#include "jointdiff/conditioning.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/rng.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// keep large transient tensors on the heap freelist instead of bouncing them
// through mmap/munmap on every layer
inline void tune_allocator_for_tensors() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
        return true;
    }();
    (void)done;
#endif
}

// Shared-bottleneck 2-channel U-Net. Strided-conv downsampling, nearest+conv
// upsampling, skip concatenation after every encoder stage, two residual
// blocks per level, self-attention on the deepest levels, SiLU throughout.
// The embedding vector is added after the first convolution of every
// residual block. Layer math runs in float32 with parameter storage shared
// with the checkpoint format; gradients accumulate into double buffers.
struct UNetConfig {
    int in_channels = 2;
    int out_channels = 2;
    int image_size = 160;
    std::vector<int> level_channels{64, 128, 256, 256};
    int res_blocks_per_level = 2;
    int norm_groups = 32;
    int attention_levels = 2; // this many deepest levels get attention
    int attention_head_channels = 32;
    int embed_dim = 256;    // d
    int embed_pe_dim = 128; // d_pe

    int levels() const { return int(level_channels.size()); }
    int bottleneck_spatial() const { return image_size >> (levels() - 1); }

    bool level_attended(int level) const {
        return level >= levels() - attention_levels;
    }

    void validate() const {
        if (levels() < 2) throw config_error("UNetConfig: need >= 2 levels");
        if (res_blocks_per_level != 2)
            throw config_error("UNetConfig: res_blocks_per_level is fixed at 2");
        const int div = 1 << (levels() - 1);
        if (image_size < div || image_size % div != 0)
            throw config_error("UNetConfig: image_size must be divisible by 2^(levels-1)");
        for (int i = 0; i < levels(); ++i) {
            const int c = level_channels[std::size_t(i)];
            if (c < 1 || c % norm_groups != 0)
                throw config_error("UNetConfig: level channels must be divisible by norm_groups");
            if (level_attended(i) && c % attention_head_channels != 0)
                throw config_error("UNetConfig: attended level channels must be divisible by "
                                   "attention_head_channels");
        }
        if (embed_dim < 1 || embed_pe_dim < 2 || embed_pe_dim % 2 != 0)
            throw config_error("UNetConfig: invalid embedding widths");
    }

    static UNetConfig paper() { return UNetConfig{}; }

    static UNetConfig desk() {
        UNetConfig cfg;
        cfg.image_size = 32;
        cfg.level_channels = {16, 32, 64, 64};
        cfg.norm_groups = 8;
        cfg.embed_dim = 64;
        cfg.embed_pe_dim = 32;
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// primitives (float32 activations)

namespace nn {

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }
inline float silu_grad(float x) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
}

// striped 16-lane reductions: a fixed, vectorizable summation order (strict
// FP forbids the compiler from reordering plain accumulation loops)
inline float vec_dot(const float* __restrict a, const float* __restrict b, std::size_t n) {
    float acc[16] = {};
    std::size_t p = 0;
    for (; p + 16 <= n; p += 16)
        for (int l = 0; l < 16; ++l) acc[l] += a[p + l] * b[p + l];
    float lo = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    float hi = ((acc[8] + acc[9]) + (acc[10] + acc[11])) +
               ((acc[12] + acc[13]) + (acc[14] + acc[15]));
    float total = lo + hi;
    for (; p < n; ++p) total += a[p] * b[p];
    return total;
}

inline float vec_sum(const float* __restrict a, std::size_t n) {
    float acc[16] = {};
    std::size_t p = 0;
    for (; p + 16 <= n; p += 16)
        for (int l = 0; l < 16; ++l) acc[l] += a[p + l];
    float lo = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    float hi = ((acc[8] + acc[9]) + (acc[10] + acc[11])) +
               ((acc[12] + acc[13]) + (acc[14] + acc[15]));
    float total = lo + hi;
    for (; p < n; ++p) total += a[p];
    return total;
}

// double accumulators: group-norm statistics are cancellation-sensitive
inline void vec_sum_sumsq(const float* __restrict a, std::size_t n, double& sum,
                          double& sumsq) {
    double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    double acc2[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t p = 0;
    for (; p + 8 <= n; p += 8)
        for (int l = 0; l < 8; ++l) {
            const double v = double(a[p + l]);
            acc[l] += v;
            acc2[l] += v * v;
        }
    sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    sumsq = ((acc2[0] + acc2[1]) + (acc2[2] + acc2[3])) +
            ((acc2[4] + acc2[5]) + (acc2[6] + acc2[7]));
    for (; p < n; ++p) {
        sum += double(a[p]);
        sumsq += double(a[p]) * double(a[p]);
    }
}

inline TensorF silu_forward(const TensorF& x) {
    TensorF y(x.c(), x.h(), x.w());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
    return y;
}

inline void silu_backward(const TensorF& pre, const TensorF& gout, TensorF& gin) {
    for (std::size_t i = 0; i < pre.size(); ++i) gin[i] = gout[i] * silu_grad(pre[i]);
}

inline int conv_out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace conv_detail {

// scratch reused across calls; sized for the largest layer seen by the thread
inline thread_local std::vector<float> col_buf;
inline thread_local std::vector<float> gcol_buf;

// column matrix: row (ic*k*k + ky*k + kx) holds the input window value for
// every output position, zero outside the padded border
inline void im2col(const TensorF& in, int k, int stride, int pad, int oh, int ow, float* col) {
    const int cin = in.c(), ih = in.h(), iw = in.w();
    const std::size_t n = std::size_t(oh) * ow;
    std::size_t row = 0;
    for (int ic = 0; ic < cin; ++ic) {
        const float* ip = in.channel(ic);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                float* dst = col + row * n;
                const int dx = kx - pad;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    float* drow = dst + std::size_t(oy) * ow;
                    if (iy < 0 || iy >= ih) {
                        std::fill(drow, drow + ow, 0.0f);
                        continue;
                    }
                    const float* irow = ip + std::size_t(iy) * iw;
                    if (stride == 1) {
                        const int lo = std::max(0, -dx);
                        const int hi = std::min(ow - 1, iw - 1 - dx);
                        for (int ox = 0; ox < lo; ++ox) drow[ox] = 0.0f;
                        for (int ox = lo; ox <= hi; ++ox) drow[ox] = irow[ox + dx];
                        for (int ox = hi + 1; ox < ow; ++ox) drow[ox] = 0.0f;
                    } else {
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + dx;
                            drow[ox] = (ix >= 0 && ix < iw) ? irow[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }
}

// scatter-add of the column gradient back onto the input grid
inline void col2im_add(const float* gcol, int k, int stride, int pad, int oh, int ow,
                       TensorF& gin) {
    const int cin = gin.c(), ih = gin.h(), iw = gin.w();
    const std::size_t n = std::size_t(oh) * ow;
    std::size_t row = 0;
    for (int ic = 0; ic < cin; ++ic) {
        float* gp = gin.channel(ic);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, ++row) {
                const float* src = gcol + row * n;
                const int dx = kx - pad;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= ih) continue;
                    const float* srow = src + std::size_t(oy) * ow;
                    float* grow = gp + std::size_t(iy) * iw;
                    if (stride == 1) {
                        const int lo = std::max(0, -dx);
                        const int hi = std::min(ow - 1, iw - 1 - dx);
                        for (int ox = lo; ox <= hi; ++ox) grow[ox + dx] += srow[ox];
                    } else {
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + dx;
                            if (ix >= 0 && ix < iw) grow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

} // namespace conv_detail

inline void conv2d_forward(const float* w, const float* b, const TensorF& in, TensorF& out,
                           int k, int stride, int pad) {
    const int cin = in.c();
    const int cout = out.c(), oh = out.h(), ow = out.w();
    const std::size_t n = std::size_t(oh) * ow;
    const std::size_t kdim = std::size_t(cin) * k * k;

    const float* col = in.data();
    if (!(k == 1 && stride == 1 && pad == 0)) {
        auto& buf = conv_detail::col_buf;
        if (buf.size() < kdim * n) buf.resize(kdim * n);
        conv_detail::im2col(in, k, stride, pad, oh, ow, buf.data());
        col = buf.data();
    }

    for (int oc = 0; oc < cout; ++oc) {
        float* __restrict op = out.channel(oc);
        const float bias = b ? b[oc] : 0.0f;
        for (std::size_t i = 0; i < n; ++i) op[i] = bias;
        const float* wrow = w + std::size_t(oc) * kdim;
        for (std::size_t kk = 0; kk < kdim; ++kk) {
            const float wv = wrow[kk];
            if (wv == 0.0f) continue;
            const float* __restrict cr = col + kk * n;
            for (std::size_t p = 0; p < n; ++p) op[p] += wv * cr[p];
        }
    }
}

// accumulates into gin (float) and gw/gb (double buffers)
inline void conv2d_backward(const float* w, const TensorF& in, const TensorF& gout,
                            TensorF* gin, double* gw, double* gb, int k, int stride, int pad) {
    const int cin = in.c();
    const int cout = gout.c(), oh = gout.h(), ow = gout.w();
    const std::size_t n = std::size_t(oh) * ow;
    const std::size_t kdim = std::size_t(cin) * k * k;
    const bool direct = k == 1 && stride == 1 && pad == 0;

    const float* col = in.data();
    if (!direct) {
        auto& buf = conv_detail::col_buf;
        if (buf.size() < kdim * n) buf.resize(kdim * n);
        conv_detail::im2col(in, k, stride, pad, oh, ow, buf.data());
        col = buf.data();
    }

    for (int oc = 0; oc < cout; ++oc) {
        const float* __restrict gp = gout.channel(oc);
        if (gb) gb[oc] += double(vec_sum(gp, n));
        if (gw) {
            double* gwrow = gw + std::size_t(oc) * kdim;
            for (std::size_t kk = 0; kk < kdim; ++kk)
                gwrow[kk] += double(vec_dot(gp, col + kk * n, n));
        }
    }

    if (gin) {
        if (direct) {
            for (int oc = 0; oc < cout; ++oc) {
                const float* __restrict gp = gout.channel(oc);
                const float* wrow = w + std::size_t(oc) * kdim;
                for (std::size_t kk = 0; kk < kdim; ++kk) {
                    const float wv = wrow[kk];
                    if (wv == 0.0f) continue;
                    float* __restrict gi = gin->data() + kk * n;
                    for (std::size_t p = 0; p < n; ++p) gi[p] += wv * gp[p];
                }
            }
        } else {
            auto& gbuf = conv_detail::gcol_buf;
            if (gbuf.size() < kdim * n) gbuf.resize(kdim * n);
            std::fill(gbuf.begin(), gbuf.begin() + std::ptrdiff_t(kdim * n), 0.0f);
            for (int oc = 0; oc < cout; ++oc) {
                const float* __restrict gp = gout.channel(oc);
                const float* wrow = w + std::size_t(oc) * kdim;
                for (std::size_t kk = 0; kk < kdim; ++kk) {
                    const float wv = wrow[kk];
                    if (wv == 0.0f) continue;
                    float* __restrict gc = gbuf.data() + kk * n;
                    for (std::size_t p = 0; p < n; ++p) gc[p] += wv * gp[p];
                }
            }
            conv_detail::col2im_add(gbuf.data(), k, stride, pad, oh, ow, *gin);
        }
    }
}

struct GroupNormCache {
    TensorF xhat;
    std::vector<float> invstd; // per group
};

inline constexpr double kGroupNormEps = 1e-5;

inline TensorF groupnorm_forward(const float* gamma, const float* beta, const TensorF& x,
                                 int groups, GroupNormCache& cache) {
    const int c = x.c();
    const int per = c / groups;
    const std::size_t plane = x.plane_size();
    const std::size_t group_n = std::size_t(per) * plane;

    cache.xhat = TensorF(c, x.h(), x.w());
    cache.invstd.assign(std::size_t(groups), 0.0f);
    TensorF y(c, x.h(), x.w());

    for (int g = 0; g < groups; ++g) {
        double sum = 0.0, sumsq = 0.0;
        for (int cc = g * per; cc < (g + 1) * per; ++cc) {
            double s = 0.0, sq = 0.0;
            vec_sum_sumsq(x.channel(cc), plane, s, sq);
            sum += s;
            sumsq += sq;
        }
        const double mean = sum / double(group_n);
        const double var = std::max(0.0, sumsq / double(group_n) - mean * mean);
        const float inv = float(1.0 / std::sqrt(var + kGroupNormEps));
        const float meanf = float(mean);
        cache.invstd[std::size_t(g)] = inv;
        for (int cc = g * per; cc < (g + 1) * per; ++cc) {
            const float* xp = x.channel(cc);
            float* xh = cache.xhat.channel(cc);
            float* yp = y.channel(cc);
            const float ga = gamma[cc], be = beta[cc];
            for (std::size_t i = 0; i < plane; ++i) {
                xh[i] = (xp[i] - meanf) * inv;
                yp[i] = ga * xh[i] + be;
            }
        }
    }
    return y;
}

inline TensorF groupnorm_backward(const float* gamma, const TensorF& gout,
                                  const GroupNormCache& cache, int groups, double* ggamma,
                                  double* gbeta) {
    const int c = gout.c();
    const int per = c / groups;
    const std::size_t plane = gout.plane_size();
    const double group_n = double(per) * double(plane);

    TensorF gin(c, gout.h(), gout.w());
    for (int g = 0; g < groups; ++g) {
        double sum_h = 0.0, sum_hx = 0.0;
        for (int cc = g * per; cc < (g + 1) * per; ++cc) {
            const float* gp = gout.channel(cc);
            const float* xh = cache.xhat.channel(cc);
            const double ga = double(gamma[cc]);
            const double gb = double(vec_sum(gp, plane));
            const double gg = double(vec_dot(gp, xh, plane));
            sum_h += gb * ga;
            sum_hx += gg * ga;
            if (ggamma) ggamma[cc] += gg;
            if (gbeta) gbeta[cc] += gb;
        }
        const float mean_h = float(sum_h / group_n);
        const float mean_hx = float(sum_hx / group_n);
        const float inv = cache.invstd[std::size_t(g)];
        for (int cc = g * per; cc < (g + 1) * per; ++cc) {
            const float* gp = gout.channel(cc);
            const float* xh = cache.xhat.channel(cc);
            float* gi = gin.channel(cc);
            const float ga = gamma[cc];
            for (std::size_t i = 0; i < plane; ++i)
                gi[i] = inv * (gp[i] * ga - mean_h - xh[i] * mean_hx);
        }
    }
    return gin;
}

inline TensorF upsample_nearest2x(const TensorF& x) {
    TensorF y(x.c(), x.h() * 2, x.w() * 2);
    for (int c = 0; c < x.c(); ++c) {
        const float* xp = x.channel(c);
        float* yp = y.channel(c);
        for (int oy = 0; oy < y.h(); ++oy) {
            const float* row = xp + std::size_t(oy / 2) * x.w();
            float* orow = yp + std::size_t(oy) * y.w();
            for (int ox = 0; ox < y.w(); ++ox) orow[ox] = row[ox / 2];
        }
    }
    return y;
}

inline TensorF upsample_nearest2x_backward(const TensorF& gout) {
    TensorF gin(gout.c(), gout.h() / 2, gout.w() / 2);
    for (int c = 0; c < gout.c(); ++c) {
        const float* gp = gout.channel(c);
        float* gi = gin.channel(c);
        for (int oy = 0; oy < gout.h(); ++oy) {
            float* irow = gi + std::size_t(oy / 2) * gin.w();
            const float* orow = gp + std::size_t(oy) * gout.w();
            for (int ox = 0; ox < gout.w(); ++ox) irow[ox / 2] += orow[ox];
        }
    }
    return gin;
}

// ---------------------------------------------------------------------------
// parameter descriptors

struct ConvDesc {
    std::size_t w = 0, b = 0;
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

    static ConvDesc make(ParamStore& store, const std::string& name, int cin, int cout, int k,
                         int stride, int pad) {
        ConvDesc d;
        d.cin = cin;
        d.cout = cout;
        d.k = k;
        d.stride = stride;
        d.pad = pad;
        d.w = store.add(name + ".w", {cout, cin, k, k});
        d.b = store.add(name + ".b", {cout});
        return d;
    }

    TensorF forward(const ParamStore& store, const TensorF& in) const {
        TensorF out(cout, conv_out_size(in.h(), k, stride, pad),
                    conv_out_size(in.w(), k, stride, pad));
        conv2d_forward(store.at(w).data.data(), store.at(b).data.data(), in, out, k, stride, pad);
        return out;
    }

    TensorF backward(const ParamStore& store, GradStore& grads, const TensorF& in,
                     const TensorF& gout) const {
        TensorF gin(in.c(), in.h(), in.w());
        conv2d_backward(store.at(w).data.data(), in, gout, &gin, grads.at(w).data(),
                        grads.at(b).data(), k, stride, pad);
        return gin;
    }
};

struct GroupNormDesc {
    std::size_t gamma = 0, beta = 0;
    int groups = 0, channels = 0;

    static GroupNormDesc make(ParamStore& store, const std::string& name, int channels,
                              int groups) {
        GroupNormDesc d;
        d.groups = groups;
        d.channels = channels;
        d.gamma = store.add(name + ".g", {channels});
        d.beta = store.add(name + ".b", {channels});
        return d;
    }

    TensorF forward(const ParamStore& store, const TensorF& x, GroupNormCache& cache) const {
        return groupnorm_forward(store.at(gamma).data.data(), store.at(beta).data.data(), x,
                                 groups, cache);
    }

    TensorF backward(const ParamStore& store, GradStore& grads, const TensorF& gout,
                     const GroupNormCache& cache) const {
        return groupnorm_backward(store.at(gamma).data.data(), gout, cache, groups,
                                  grads.at(gamma).data(), grads.at(beta).data());
    }
};

// residual block: GN -> SiLU -> conv -> (+ per-channel embedding) -> GN ->
// SiLU -> conv, with identity or 1x1 shortcut
struct ResBlockDesc {
    int cin = 0, cout = 0;
    GroupNormDesc gn1, gn2;
    ConvDesc conv1, conv2;
    std::size_t emb_w = 0, emb_b = 0; // linear d -> cout
    bool skip_conv = false;
    ConvDesc skip;
    int embed_dim = 0;

    static ResBlockDesc make(ParamStore& store, const std::string& name, int cin, int cout,
                             int groups, int embed_dim) {
        ResBlockDesc d;
        d.cin = cin;
        d.cout = cout;
        d.embed_dim = embed_dim;
        d.gn1 = GroupNormDesc::make(store, name + ".gn1", cin, groups);
        d.conv1 = ConvDesc::make(store, name + ".conv1", cin, cout, 3, 1, 1);
        d.emb_w = store.add(name + ".emb.w", {cout, embed_dim});
        d.emb_b = store.add(name + ".emb.b", {cout});
        d.gn2 = GroupNormDesc::make(store, name + ".gn2", cout, groups);
        d.conv2 = ConvDesc::make(store, name + ".conv2", cout, cout, 3, 1, 1);
        d.skip_conv = cin != cout;
        if (d.skip_conv) d.skip = ConvDesc::make(store, name + ".skip", cin, cout, 1, 1, 0);
        return d;
    }

    struct Cache {
        TensorF in;
        GroupNormCache gn1c, gn2c;
        TensorF pre1, s1; // gn1 output (pre-SiLU), SiLU output (conv1 input)
        TensorF h;        // conv1 output + embedding (gn2 input)
        TensorF pre2, s2; // gn2 output, SiLU output (conv2 input)
    };

    TensorF forward(const ParamStore& store, const TensorF& x, const std::vector<float>& e,
                    Cache& c) const {
        c.in = x;
        c.pre1 = gn1.forward(store, x, c.gn1c);
        c.s1 = silu_forward(c.pre1);
        c.h = conv1.forward(store, c.s1);

        const ParamTensor& ew = store.at(emb_w);
        const ParamTensor& eb = store.at(emb_b);
        for (int oc = 0; oc < cout; ++oc) {
            const float add =
                eb.data[std::size_t(oc)] +
                vec_dot(ew.data.data() + std::size_t(oc) * embed_dim, e.data(),
                        std::size_t(embed_dim));
            float* hp = c.h.channel(oc);
            for (std::size_t i = 0; i < c.h.plane_size(); ++i) hp[i] += add;
        }

        c.pre2 = gn2.forward(store, c.h, c.gn2c);
        c.s2 = silu_forward(c.pre2);
        TensorF out = conv2.forward(store, c.s2);

        if (skip_conv) {
            TensorF sc = skip.forward(store, x);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += sc[i];
        } else {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
        }
        return out;
    }

    TensorF backward(const ParamStore& store, GradStore& grads, const Cache& c,
                     const TensorF& gout, const std::vector<float>& e,
                     std::vector<double>& gemb) const {
        // main path
        TensorF gs2 = conv2.backward(store, grads, c.s2, gout);
        TensorF gpre2(gs2.c(), gs2.h(), gs2.w());
        silu_backward(c.pre2, gs2, gpre2);
        TensorF gh = gn2.backward(store, grads, gpre2, c.gn2c);

        // embedding projection: the addition broadcast over space
        auto& gew = grads.at(emb_w);
        auto& geb = grads.at(emb_b);
        const ParamTensor& ew = store.at(emb_w);
        for (int oc = 0; oc < cout; ++oc) {
            const double csum = double(vec_sum(gh.channel(oc), gh.plane_size()));
            geb[std::size_t(oc)] += csum;
            double* gwr = gew.data() + std::size_t(oc) * embed_dim;
            const float* wr = ew.data.data() + std::size_t(oc) * embed_dim;
            for (int i = 0; i < embed_dim; ++i) {
                gwr[i] += csum * double(e[std::size_t(i)]);
                gemb[std::size_t(i)] += csum * double(wr[i]);
            }
        }

        TensorF gs1 = conv1.backward(store, grads, c.s1, gh);
        TensorF gpre1(gs1.c(), gs1.h(), gs1.w());
        silu_backward(c.pre1, gs1, gpre1);
        TensorF gx = gn1.backward(store, grads, gpre1, c.gn1c);

        // shortcut path
        if (skip_conv) {
            TensorF gsc = skip.backward(store, grads, c.in, gout);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gsc[i];
        } else {
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
        }
        return gx;
    }
};

// pre-norm multi-head self-attention over flattened spatial positions
struct AttentionDesc {
    int channels = 0, heads = 0, head_dim = 0;
    GroupNormDesc norm;
    ConvDesc qkv;  // 1x1, C -> 3C
    ConvDesc proj; // 1x1, C -> C

    static AttentionDesc make(ParamStore& store, const std::string& name, int channels,
                              int groups, int head_channels) {
        AttentionDesc d;
        d.channels = channels;
        d.head_dim = head_channels;
        d.heads = channels / head_channels;
        d.norm = GroupNormDesc::make(store, name + ".norm", channels, groups);
        d.qkv = ConvDesc::make(store, name + ".qkv", channels, 3 * channels, 1, 1, 0);
        d.proj = ConvDesc::make(store, name + ".proj", channels, channels, 1, 1, 0);
        return d;
    }

    struct Cache {
        GroupNormCache gnc;
        TensorF normed;
        TensorF qkv_out;
        std::vector<float> attn; // heads x n x n row-softmax
        TensorF merged;
    };

    TensorF forward(const ParamStore& store, const TensorF& x, Cache& c) const {
        const int n = x.h() * x.w();
        const float scale = 1.0f / std::sqrt(float(head_dim));
        c.normed = norm.forward(store, x, c.gnc);
        c.qkv_out = qkv.forward(store, c.normed);
        c.attn.assign(std::size_t(heads) * n * n, 0.0f);
        c.merged = TensorF(channels, x.h(), x.w());

        for (int hd = 0; hd < heads; ++hd) {
            const float* q = c.qkv_out.channel(hd * head_dim);
            const float* k = c.qkv_out.channel(channels + hd * head_dim);
            const float* v = c.qkv_out.channel(2 * channels + hd * head_dim);
            float* attn = c.attn.data() + std::size_t(hd) * n * n;

            for (int i = 0; i < n; ++i) {
                float* __restrict row = attn + std::size_t(i) * n;
                for (int j = 0; j < n; ++j) row[j] = 0.0f;
                for (int cc = 0; cc < head_dim; ++cc) {
                    const float qv = q[std::size_t(cc) * n + i];
                    const float* __restrict krow = k + std::size_t(cc) * n;
                    for (int j = 0; j < n; ++j) row[j] += qv * krow[j];
                }
                float maxv = -1e30f;
                for (int j = 0; j < n; ++j) {
                    row[j] *= scale;
                    maxv = std::max(maxv, row[j]);
                }
                float denom = 0.0f;
                for (int j = 0; j < n; ++j) {
                    row[j] = std::exp(row[j] - maxv);
                    denom += row[j];
                }
                for (int j = 0; j < n; ++j) row[j] /= denom;
            }
            for (int cc = 0; cc < head_dim; ++cc) {
                const float* vrow = v + std::size_t(cc) * n;
                float* orow = c.merged.channel(hd * head_dim + cc);
                for (int i = 0; i < n; ++i)
                    orow[i] = vec_dot(attn + std::size_t(i) * n, vrow, std::size_t(n));
            }
        }
        TensorF out = proj.forward(store, c.merged);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
        return out;
    }

    TensorF backward(const ParamStore& store, GradStore& grads, const Cache& c,
                     const TensorF& gout) const {
        const int n = c.normed.h() * c.normed.w();
        const float scale = 1.0f / std::sqrt(float(head_dim));

        TensorF gmerged = proj.backward(store, grads, c.merged, gout);
        TensorF gqkv(3 * channels, c.normed.h(), c.normed.w());

        std::vector<float> gattn(std::size_t(n) * n);
        for (int hd = 0; hd < heads; ++hd) {
            const float* q = c.qkv_out.channel(hd * head_dim);
            const float* k = c.qkv_out.channel(channels + hd * head_dim);
            const float* v = c.qkv_out.channel(2 * channels + hd * head_dim);
            const float* attn = c.attn.data() + std::size_t(hd) * n * n;
            float* gq = gqkv.channel(hd * head_dim);
            float* gk = gqkv.channel(channels + hd * head_dim);
            float* gv = gqkv.channel(2 * channels + hd * head_dim);

            // gv and gA
            std::fill(gattn.begin(), gattn.end(), 0.0f);
            for (int cc = 0; cc < head_dim; ++cc) {
                const float* go = gmerged.channel(hd * head_dim + cc);
                const float* __restrict vrow = v + std::size_t(cc) * n;
                float* __restrict gvrow = gv + std::size_t(cc) * n;
                for (int i = 0; i < n; ++i) {
                    const float gi = go[i];
                    const float* __restrict arow = attn + std::size_t(i) * n;
                    float* __restrict garow = gattn.data() + std::size_t(i) * n;
                    for (int j = 0; j < n; ++j) {
                        gvrow[j] += arow[j] * gi;
                        garow[j] += vrow[j] * gi;
                    }
                }
            }
            // softmax backward then the score bilinear form
            for (int i = 0; i < n; ++i) {
                const float* arow = attn + std::size_t(i) * n;
                float* garow = gattn.data() + std::size_t(i) * n;
                const float dot = vec_dot(arow, garow, std::size_t(n));
                for (int j = 0; j < n; ++j) garow[j] = arow[j] * (garow[j] - dot) * scale;
            }
            for (int cc = 0; cc < head_dim; ++cc) {
                const float* qrow = q + std::size_t(cc) * n;
                const float* __restrict krow = k + std::size_t(cc) * n;
                float* gqrow = gq + std::size_t(cc) * n;
                float* __restrict gkrow = gk + std::size_t(cc) * n;
                for (int i = 0; i < n; ++i) {
                    const float* __restrict garow = gattn.data() + std::size_t(i) * n;
                    gqrow[i] += vec_dot(garow, krow, std::size_t(n));
                    const float qv = qrow[i];
                    for (int j = 0; j < n; ++j) gkrow[j] += garow[j] * qv;
                }
            }
        }

        TensorF gnormed = qkv.backward(store, grads, c.normed, gqkv);
        TensorF gx = norm.backward(store, grads, gnormed, c.gnc);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i];
        return gx;
    }
};

} // namespace nn

// ---------------------------------------------------------------------------
// the U-Net

class UNet {
public:
    UNet() = default;

    UNet(const UNetConfig& cfg, ParamStore& store) : cfg_(cfg) {
        cfg.validate();
        const auto& ch = cfg.level_channels;
        const int L = cfg.levels();
        const int d = cfg.embed_dim;

        stem_ = nn::ConvDesc::make(store, "unet.stem", cfg.in_channels, ch[0], 3, 1, 1);

        int cur = ch[0];
        for (int lv = 0; lv < L; ++lv) {
            for (int b = 0; b < cfg.res_blocks_per_level; ++b) {
                const std::string name =
                    "unet.enc" + std::to_string(lv) + ".rb" + std::to_string(b);
                enc_rb_.push_back(nn::ResBlockDesc::make(store, name, cur, ch[std::size_t(lv)],
                                                         cfg.norm_groups, d));
                cur = ch[std::size_t(lv)];
                if (cfg.level_attended(lv))
                    enc_attn_.push_back(nn::AttentionDesc::make(
                        store, "unet.enc" + std::to_string(lv) + ".attn" + std::to_string(b), cur,
                        cfg.norm_groups, cfg.attention_head_channels));
                enc_has_attn_.push_back(cfg.level_attended(lv));
            }
            if (lv + 1 < L)
                down_.push_back(
                    nn::ConvDesc::make(store, "unet.down" + std::to_string(lv), cur, cur, 3, 2, 1));
        }

        mid_rb1_ = nn::ResBlockDesc::make(store, "unet.mid.rb1", cur, cur, cfg.norm_groups, d);
        mid_attn_ = nn::AttentionDesc::make(store, "unet.mid.attn", cur, cfg.norm_groups,
                                            cfg.attention_head_channels);
        mid_rb2_ = nn::ResBlockDesc::make(store, "unet.mid.rb2", cur, cur, cfg.norm_groups, d);

        // skip channel stack mirrors the encoder pushes
        std::vector<int> skip_ch;
        skip_ch.push_back(ch[0]);
        for (int lv = 0; lv < L; ++lv) {
            for (int b = 0; b < cfg.res_blocks_per_level; ++b) skip_ch.push_back(ch[std::size_t(lv)]);
            if (lv + 1 < L) skip_ch.push_back(ch[std::size_t(lv)]);
        }

        for (int lv = L - 1; lv >= 0; --lv) {
            for (int b = 0; b < cfg.res_blocks_per_level + 1; ++b) {
                const int skip_c = skip_ch.back();
                skip_ch.pop_back();
                const std::string name =
                    "unet.dec" + std::to_string(lv) + ".rb" + std::to_string(b);
                dec_rb_.push_back(nn::ResBlockDesc::make(store, name, cur + skip_c,
                                                         ch[std::size_t(lv)], cfg.norm_groups, d));
                cur = ch[std::size_t(lv)];
                if (cfg.level_attended(lv))
                    dec_attn_.push_back(nn::AttentionDesc::make(
                        store, "unet.dec" + std::to_string(lv) + ".attn" + std::to_string(b), cur,
                        cfg.norm_groups, cfg.attention_head_channels));
                dec_has_attn_.push_back(cfg.level_attended(lv));
            }
            if (lv > 0)
                up_.push_back(
                    nn::ConvDesc::make(store, "unet.up" + std::to_string(lv), cur, cur, 3, 1, 1));
        }

        head_gn_ = nn::GroupNormDesc::make(store, "unet.head.gn", ch[0], cfg.norm_groups);
        head_conv_ = nn::ConvDesc::make(store, "unet.head.conv", ch[0], cfg.out_channels, 3, 1, 1);
    }

    const UNetConfig& config() const { return cfg_; }

    struct ForwardCache {
        std::vector<nn::ResBlockDesc::Cache> enc_rb, dec_rb;
        nn::ResBlockDesc::Cache mid_rb1, mid_rb2;
        std::vector<nn::AttentionDesc::Cache> enc_attn, dec_attn;
        nn::AttentionDesc::Cache mid_attn;
        std::vector<TensorF> down_in, up_in; // conv inputs (up_in holds upsampled maps)
        TensorF stem_in;
        std::vector<TensorF> skips;
        nn::GroupNormCache head_gnc;
        TensorF head_pre, head_s; // head GN output, SiLU output
        std::vector<float> e;     // float view of the embedding
    };

    Tensor forward(const ParamStore& store, const Tensor& x, const std::vector<double>& e,
                   ForwardCache& c) const {
        if (x.c() != cfg_.in_channels || x.h() != cfg_.image_size || x.w() != cfg_.image_size)
            throw shape_error("unet_forward: input must be " + std::to_string(cfg_.in_channels) +
                              "x" + std::to_string(cfg_.image_size) + "x" +
                              std::to_string(cfg_.image_size));
        if (int(e.size()) != cfg_.embed_dim)
            throw shape_error("unet_forward: embedding width mismatch");

        const int L = cfg_.levels();
        c.enc_rb.resize(enc_rb_.size());
        c.enc_attn.resize(enc_attn_.size());
        c.dec_rb.resize(dec_rb_.size());
        c.dec_attn.resize(dec_attn_.size());
        c.down_in.resize(down_.size());
        c.up_in.resize(up_.size());
        c.skips.clear();
        c.e.resize(e.size());
        for (std::size_t i = 0; i < e.size(); ++i) c.e[i] = float(e[i]);

        c.stem_in = to_float(x);
        TensorF h = stem_.forward(store, c.stem_in);
        c.skips.push_back(h);

        std::size_t rb = 0, at = 0;
        for (int lv = 0; lv < L; ++lv) {
            for (int b = 0; b < cfg_.res_blocks_per_level; ++b) {
                h = enc_rb_[rb].forward(store, h, c.e, c.enc_rb[rb]);
                if (enc_has_attn_[rb]) {
                    h = enc_attn_[at].forward(store, h, c.enc_attn[at]);
                    ++at;
                }
                c.skips.push_back(h);
                ++rb;
            }
            if (lv + 1 < L) {
                c.down_in[std::size_t(lv)] = h;
                h = down_[std::size_t(lv)].forward(store, h);
                c.skips.push_back(h);
            }
        }

        h = mid_rb1_.forward(store, h, c.e, c.mid_rb1);
        h = mid_attn_.forward(store, h, c.mid_attn);
        h = mid_rb2_.forward(store, h, c.e, c.mid_rb2);

        std::size_t skip_top = c.skips.size();
        rb = 0;
        at = 0;
        std::size_t up = 0;
        for (int lv = L - 1; lv >= 0; --lv) {
            for (int b = 0; b < cfg_.res_blocks_per_level + 1; ++b) {
                const TensorF& skip = c.skips[--skip_top];
                TensorF cat(h.c() + skip.c(), h.h(), h.w());
                std::copy(h.data(), h.data() + h.size(), cat.data());
                std::copy(skip.data(), skip.data() + skip.size(), cat.data() + h.size());
                h = dec_rb_[rb].forward(store, cat, c.e, c.dec_rb[rb]);
                if (dec_has_attn_[rb]) {
                    h = dec_attn_[at].forward(store, h, c.dec_attn[at]);
                    ++at;
                }
                ++rb;
            }
            if (lv > 0) {
                TensorF upsampled = nn::upsample_nearest2x(h);
                c.up_in[up] = upsampled;
                h = up_[up].forward(store, upsampled);
                ++up;
            }
        }

        c.head_pre = head_gn_.forward(store, h, c.head_gnc);
        c.head_s = nn::silu_forward(c.head_pre);
        TensorF out = head_conv_.forward(store, c.head_s);
        if (!out.all_finite()) throw numeric_error("unet_forward: non-finite activations");
        return to_double(out);
    }

    // accumulates parameter gradients and the embedding gradient; returns the
    // gradient with respect to the input
    Tensor backward(const ParamStore& store, GradStore& grads, const ForwardCache& c,
                    const Tensor& gout, const std::vector<double>& e,
                    std::vector<double>& gemb) const {
        (void)e; // the float view cached at forward time is used instead
        const int L = cfg_.levels();

        TensorF gh = head_conv_.backward(store, grads, c.head_s, to_float(gout));
        {
            TensorF gpre(gh.c(), gh.h(), gh.w());
            nn::silu_backward(c.head_pre, gh, gpre);
            gh = head_gn_.backward(store, grads, gpre, c.head_gnc);
        }

        // decoder in reverse; block rb consumed skip (skips.size()-1-rb)
        std::vector<TensorF> gskips(c.skips.size());
        std::size_t rb = dec_rb_.size();
        std::size_t at = dec_attn_.size();
        std::size_t up = up_.size();
        for (int lv = 0; lv < L; ++lv) {
            for (int b = 0; b < cfg_.res_blocks_per_level + 1; ++b) {
                --rb;
                if (dec_has_attn_[rb]) {
                    --at;
                    gh = dec_attn_[at].backward(store, grads, c.dec_attn[at], gh);
                }
                TensorF gcat = dec_rb_[rb].backward(store, grads, c.dec_rb[rb], gh, c.e, gemb);
                const std::size_t skip_idx = c.skips.size() - 1 - rb;
                const int skip_c = c.skips[skip_idx].c();
                const int main_c = gcat.c() - skip_c;
                TensorF gmain(main_c, gcat.h(), gcat.w());
                std::copy(gcat.data(), gcat.data() + gmain.size(), gmain.data());
                TensorF gskip(skip_c, gcat.h(), gcat.w());
                std::copy(gcat.data() + gmain.size(), gcat.data() + gcat.size(), gskip.data());
                gskips[skip_idx] = std::move(gskip);
                gh = std::move(gmain);
            }
            if (lv < L - 1) {
                --up;
                TensorF gupsampled = up_[up].backward(store, grads, c.up_in[up], gh);
                gh = nn::upsample_nearest2x_backward(gupsampled);
            }
        }

        gh = mid_rb2_.backward(store, grads, c.mid_rb2, gh, c.e, gemb);
        gh = mid_attn_.backward(store, grads, c.mid_attn, gh);
        gh = mid_rb1_.backward(store, grads, c.mid_rb1, gh, c.e, gemb);

        // encoder in reverse, merging each skip gradient at its push point
        rb = enc_rb_.size();
        at = enc_attn_.size();
        std::size_t idx = c.skips.size();
        auto merge_skip = [&]() {
            --idx;
            const TensorF& gs = gskips[idx];
            if (gs.size() > 0)
                for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += gs[i];
        };
        for (int lv = L - 1; lv >= 0; --lv) {
            if (lv < L - 1) {
                merge_skip(); // skip pushed after down[lv]
                gh = down_[std::size_t(lv)].backward(store, grads, c.down_in[std::size_t(lv)], gh);
            }
            for (int b = cfg_.res_blocks_per_level - 1; b >= 0; --b) {
                merge_skip(); // skip pushed after this block
                --rb;
                if (enc_has_attn_[rb]) {
                    --at;
                    gh = enc_attn_[at].backward(store, grads, c.enc_attn[at], gh);
                }
                gh = enc_rb_[rb].backward(store, grads, c.enc_rb[rb], gh, c.e, gemb);
            }
        }
        merge_skip(); // stem output skip (idx reaches 0)
        return to_double(stem_.backward(store, grads, c.stem_in, gh));
    }

private:
    UNetConfig cfg_;
    nn::ConvDesc stem_;
    std::vector<nn::ResBlockDesc> enc_rb_, dec_rb_;
    std::vector<nn::AttentionDesc> enc_attn_, dec_attn_;
    std::vector<char> enc_has_attn_, dec_has_attn_;
    std::vector<nn::ConvDesc> down_, up_;
    nn::ResBlockDesc mid_rb1_, mid_rb2_;
    nn::AttentionDesc mid_attn_;
    nn::GroupNormDesc head_gn_;
    nn::ConvDesc head_conv_;
};

// ---------------------------------------------------------------------------
// full conditional denoiser: embeddings + U-Net over one ParamStore

class DenoiserModel {
public:
    DenoiserModel() = default;

    explicit DenoiserModel(const UNetConfig& cfg) : cfg_(cfg) {
        tune_allocator_for_tensors();
        embed_ = EmbeddingParams::build(params_, cfg.embed_dim, cfg.embed_pe_dim);
        net_ = UNet(cfg, params_);
    }

    const UNetConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const EmbeddingParams& embedding_params() const { return embed_; }
    const UNet& net() const { return net_; }

    std::size_t param_count() const { return params_.total_scalars(); }

    // normal(0, 0.02) weights, zero biases, unit norm scales, zero final conv
    void init_weights(Rng& rng) {
        for (std::size_t id = 0; id < params_.count(); ++id) {
            auto& t = params_.at(id);
            const std::string& name = params_.name(id);
            const bool is_matrix = t.dims.size() >= 2;
            const bool is_gn_gamma = name.ends_with(".gn1.g") || name.ends_with(".gn2.g") ||
                                     name.ends_with(".norm.g") || name.ends_with("head.gn.g");
            const bool is_head = name.rfind("unet.head.conv", 0) == 0;
            if (is_head) {
                std::fill(t.data.begin(), t.data.end(), 0.0f);
            } else if (is_matrix) {
                for (auto& v : t.data) v = float(rng.normal() * 0.02);
            } else if (is_gn_gamma) {
                std::fill(t.data.begin(), t.data.end(), 1.0f);
            } else {
                std::fill(t.data.begin(), t.data.end(), 0.0f);
            }
        }
    }

    struct Cache {
        TimeEmbeddingCache time;
        CondEmbeddingCache cond;
        std::vector<double> e;
        UNet::ForwardCache net;
    };

    std::vector<double> embedding(int t, int T, const ConditionToken& tok, Cache* cache) const {
        TimeEmbeddingCache tc;
        CondEmbeddingCache cc;
        auto te = time_embedding(t, T, params_, embed_, cache ? &cache->time : &tc);
        auto ce = cond_embedding(tok, params_, embed_, cache ? &cache->cond : &cc);
        auto e = combine_embeddings(te, ce);
        if (cache) cache->e = e;
        return e;
    }

    Tensor forward(const Tensor& x_t, int t, int T, const ConditionToken& tok,
                   Cache& cache) const {
        auto e = embedding(t, T, tok, &cache);
        return net_.forward(params_, x_t, e, cache.net);
    }

    // spec surface: U-Net alone, embedding supplied by the caller
    Tensor forward_with_embedding(const Tensor& x_t, const std::vector<double>& e,
                                  UNet::ForwardCache& cache) const {
        return net_.forward(params_, x_t, e, cache);
    }

    // accumulates all parameter gradients (U-Net + embedding pathway)
    Tensor backward(GradStore& grads, const Cache& cache, const Tensor& gout) const {
        std::vector<double> gemb(std::size_t(cfg_.embed_dim), 0.0);
        Tensor gx = net_.backward(params_, grads, cache.net, gout, cache.e, gemb);
        time_embedding_backward(gemb, cache.time, params_, embed_, grads);
        cond_embedding_backward(gemb, cache.cond, params_, embed_, grads);
        return gx;
    }

private:
    UNetConfig cfg_;
    ParamStore params_;
    EmbeddingParams embed_;
    UNet net_;
};

} // namespace jointdiff

#endif // JOINTDIFF_UNET_HPP
