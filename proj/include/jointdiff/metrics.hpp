#ifndef JOINTDIFF_METRICS_HPP
#define JOINTDIFF_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"
#include "jointdiff/rng.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

using FeatureSet = std::vector<std::vector<double>>;

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <class Kernel>
double mmd2_unbiased(const FeatureSet& x, const FeatureSet& y, Kernel k) {
    const std::size_t m = x.size(), n = y.size();
    if (m < 2 || n < 2) throw config_error("mmd2_unbiased: both sets need >= 2 points");
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (i != j) kxx += k(x[i], x[j]);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) kyy += k(y[i], y[j]);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) kxy += k(x[i], y[j]);
    return kxx / double(m * (m - 1)) + kyy / double(n * (n - 1)) - 2.0 * kxy / double(m * n);
}

} // namespace detail

// unbiased MMD^2 with RBF kernel exp(-|a-b|^2 / (2 bandwidth^2))
inline double mmd2_unbiased_rbf(const FeatureSet& x, const FeatureSet& y, double bandwidth) {
    if (!(bandwidth > 0.0)) throw config_error("mmd2_unbiased_rbf: bandwidth must be > 0");
    const double denom = 2.0 * bandwidth * bandwidth;
    return detail::mmd2_unbiased(x, y, [&](const auto& a, const auto& b) {
        return std::exp(-detail::sq_dist(a, b) / denom);
    });
}

// median pairwise euclidean distance over the pooled set
inline double median_pairwise_distance(const FeatureSet& pooled) {
    std::vector<double> d;
    for (std::size_t i = 0; i < pooled.size(); ++i)
        for (std::size_t j = i + 1; j < pooled.size(); ++j)
            d.push_back(std::sqrt(detail::sq_dist(pooled[i], pooled[j])));
    if (d.empty()) return 0.0;
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    return n % 2 == 1 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

struct MmdMfResult {
    double value = 0.0;     // max(MMD^2, 0)
    double bandwidth = 0.0; // median heuristic on standardized pooled set
    std::vector<std::size_t> dropped_features; // zero variance in the real set
};

// MMD on morphological features: z-scored by the REAL set's statistics, RBF
// kernel with median-heuristic bandwidth, unbiased estimator floored at 0.
inline MmdMfResult mmd_mf(const FeatureSet& real, const FeatureSet& gen) {
    if (real.size() < 2 || gen.size() < 2)
        throw config_error("mmd_mf: both sets need >= 2 feature vectors");
    const std::size_t d = real.front().size();
    for (const auto& v : real)
        if (v.size() != d) throw shape_error("mmd_mf: ragged real feature set");
    for (const auto& v : gen)
        if (v.size() != d) throw shape_error("mmd_mf: feature width mismatch");

    std::vector<double> mean(d, 0.0), sd(d, 0.0);
    for (const auto& v : real)
        for (std::size_t i = 0; i < d; ++i) mean[i] += v[i];
    for (auto& m : mean) m /= double(real.size());
    for (const auto& v : real)
        for (std::size_t i = 0; i < d; ++i) sd[i] += (v[i] - mean[i]) * (v[i] - mean[i]);
    for (auto& s : sd) s = std::sqrt(s / double(real.size()));

    MmdMfResult res;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < d; ++i) {
        if (sd[i] > 0.0) keep.push_back(i);
        else res.dropped_features.push_back(i);
    }
    if (keep.empty()) throw config_error("mmd_mf: every real feature has zero variance");

    auto standardize = [&](const FeatureSet& src) {
        FeatureSet out(src.size(), std::vector<double>(keep.size()));
        for (std::size_t r = 0; r < src.size(); ++r)
            for (std::size_t i = 0; i < keep.size(); ++i)
                out[r][i] = (src[r][keep[i]] - mean[keep[i]]) / sd[keep[i]];
        return out;
    };
    FeatureSet xs = standardize(real), ys = standardize(gen);

    FeatureSet pooled = xs;
    pooled.insert(pooled.end(), ys.begin(), ys.end());
    double h = median_pairwise_distance(pooled);
    if (h <= 0.0) h = 1.0; // pooled set collapsed to one point
    res.bandwidth = h;
    res.value = std::max(0.0, mmd2_unbiased_rbf(xs, ys, h));
    return res;
}

// 1-D Wasserstein-1 distance between empirical distributions via quantile
// matching (exact for uniform atom weights)
inline double wasserstein_1d(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw config_error("wasserstein_1d: empty sample");
    std::vector<double> sa = a, sb = b;
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    const double wa = 1.0 / double(sa.size());
    const double wb = 1.0 / double(sb.size());
    double dist = 0.0;
    std::size_t i = 0, j = 0;
    double ra = wa, rb = wb;
    while (i < sa.size() && j < sb.size()) {
        const double take = std::min(ra, rb);
        dist += take * std::fabs(sa[i] - sb[j]);
        ra -= take;
        rb -= take;
        if (ra <= 1e-15) {
            ++i;
            ra = wa;
        }
        if (rb <= 1e-15) {
            ++j;
            rb = wb;
        }
    }
    return dist;
}

struct KidResult {
    double mean = 0.0;
    double std = 0.0;
    int subset_size = 0;
    int n_subsets = 0;
};

// Kernel distance on image features: unbiased MMD^2 with the cubic polynomial
// kernel (x.y/d + 1)^3, averaged over random subsets drawn without
// replacement within each subset.
inline KidResult kid(const FeatureSet& real, const FeatureSet& gen, int subset_size,
                     int n_subsets, Rng& rng) {
    if (subset_size < 2) throw config_error("kid: subset_size must be >= 2");
    if (n_subsets < 1) throw config_error("kid: n_subsets must be >= 1");
    if (real.size() < std::size_t(subset_size) || gen.size() < std::size_t(subset_size))
        throw config_error("kid: subset_size exceeds a feature set; have " +
                           std::to_string(real.size()) + " real / " + std::to_string(gen.size()) +
                           " gen, need >= " + std::to_string(subset_size));
    const double d = double(real.front().size());
    auto poly = [&](const std::vector<double>& a, const std::vector<double>& b) {
        const double z = detail::dot(a, b) / d + 1.0;
        return z * z * z;
    };

    auto draw = [&](const FeatureSet& src) {
        std::vector<std::size_t> idx(src.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        // partial Fisher-Yates for the first subset_size slots
        for (int i = 0; i < subset_size; ++i) {
            const std::size_t j = std::size_t(rng.uniform_int(i, std::int64_t(idx.size()) - 1));
            std::swap(idx[std::size_t(i)], idx[j]);
        }
        FeatureSet out(static_cast<std::size_t>(subset_size));
        for (int i = 0; i < subset_size; ++i) out[std::size_t(i)] = src[idx[std::size_t(i)]];
        return out;
    };

    std::vector<double> vals;
    vals.reserve(std::size_t(n_subsets));
    for (int s = 0; s < n_subsets; ++s)
        vals.push_back(detail::mmd2_unbiased(draw(real), draw(gen), poly));

    KidResult res;
    res.subset_size = subset_size;
    res.n_subsets = n_subsets;
    for (double v : vals) res.mean += v;
    res.mean /= double(vals.size());
    if (vals.size() > 1) {
        double acc = 0.0;
        for (double v : vals) acc += (v - res.mean) * (v - res.mean);
        res.std = std::sqrt(acc / double(vals.size() - 1));
    }
    return res;
}

// ---------------------------------------------------------------------------
// feature extraction

// Deterministic image embedding. Implementations must be pure functions of
// the image; dim() is fixed per instance.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual int dim() const = 0;
    virtual std::vector<double> embed(const Tensor& image) const = 0;

    FeatureSet embed_all(const std::vector<Tensor>& images) const {
        FeatureSet out;
        out.reserve(images.size());
        for (const auto& im : images) out.push_back(embed(im));
        return out;
    }
};

// Desk-scale stand-in for a pretrained perceptual network: two fixed
// random-weight 3x3 stride-2 convolutions with SiLU, channel-averaged, plus a
// 16-bin intensity histogram. d = 8 + 16 + 16 = 40.
class ToyFeatureExtractor final : public FeatureExtractor {
public:
    static constexpr int kHistBins = 16;
    static constexpr int kC1 = 8;
    static constexpr int kC2 = 16;

    ToyFeatureExtractor() {
        Rng rng(0x70f3a7u); // constant: features must not depend on run seeds
        w1_.resize(kC1 * 9);
        for (auto& w : w1_) w = rng.normal() * 0.35;
        w2_.resize(kC2 * kC1 * 9);
        for (auto& w : w2_) w = rng.normal() * 0.18;
    }

    std::string name() const override { return "toy"; }
    int dim() const override { return kC1 + kC2 + kHistBins; }

    std::vector<double> embed(const Tensor& image) const override {
        if (image.c() != 1) throw shape_error("ToyFeatureExtractor: expected 1xHxW image");
        const int h = image.h(), w = image.w();
        const int h1 = (h + 1) / 2, w1 = (w + 1) / 2;
        const int h2 = (h1 + 1) / 2, w2 = (w1 + 1) / 2;

        std::vector<double> a1(std::size_t(kC1) * h1 * w1, 0.0);
        conv_silu(image.data(), 1, h, w, w1_.data(), kC1, a1.data(), h1, w1);
        std::vector<double> a2(std::size_t(kC2) * h2 * w2, 0.0);
        conv_silu(a1.data(), kC1, h1, w1, w2_.data(), kC2, a2.data(), h2, w2);

        std::vector<double> f;
        f.reserve(std::size_t(dim()));
        for (int c = 0; c < kC1; ++c) {
            double acc = 0.0;
            for (int i = 0; i < h1 * w1; ++i) acc += a1[std::size_t(c) * h1 * w1 + i];
            f.push_back(acc / double(h1 * w1));
        }
        for (int c = 0; c < kC2; ++c) {
            double acc = 0.0;
            for (int i = 0; i < h2 * w2; ++i) acc += a2[std::size_t(c) * h2 * w2 + i];
            f.push_back(acc / double(h2 * w2));
        }
        // histogram over [-1, 1]
        std::vector<double> hist(kHistBins, 0.0);
        for (std::size_t i = 0; i < image.size(); ++i) {
            int bin = int((image[i] + 1.0) / 2.0 * kHistBins);
            bin = std::clamp(bin, 0, kHistBins - 1);
            hist[std::size_t(bin)] += 1.0;
        }
        for (double v : hist) f.push_back(v / double(image.size()));
        return f;
    }

private:
    static void conv_silu(const double* in, int cin, int h, int w, const double* weights,
                          int cout, double* out, int oh, int ow) {
        for (int oc = 0; oc < cout; ++oc) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ic = 0; ic < cin; ++ic) {
                        const double* wk = weights + (std::size_t(oc) * cin + ic) * 9;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = 2 * oy + ky - 1;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int ix = 2 * ox + kx - 1;
                                if (ix < 0 || ix >= w) continue;
                                acc += wk[ky * 3 + kx] * in[(std::size_t(ic) * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(std::size_t(oc) * oh + oy) * ow + ox] = acc / (1.0 + std::exp(-acc));
                }
            }
        }
    }

    std::vector<double> w1_, w2_;
};

// normalized feature distance: |f(a) - f(b)|_2 / sqrt(d)
inline double perceptual_distance(const Tensor& a, const Tensor& b,
                                  const FeatureExtractor& extractor) {
    if (!a.same_shape(b)) throw shape_error("perceptual_distance: image size mismatch");
    const auto fa = extractor.embed(a);
    const auto fb = extractor.embed(b);
    return std::sqrt(detail::sq_dist(fa, fb) / double(extractor.dim()));
}

// ---------------------------------------------------------------------------
// precomputed external features (real Inception/LPIPS embeddings supplied
// from outside): u32 count, u32 d, then count*d float32 little-endian

inline void write_feature_file(const std::string& path, const FeatureSet& feats);
inline FeatureSet read_feature_file(const std::string& path);

} // namespace jointdiff

#include <cstdio>

namespace jointdiff {

inline void write_feature_file(const std::string& path, const FeatureSet& feats) {
    if (feats.empty()) throw config_error("write_feature_file: empty feature set");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("write_feature_file: cannot open " + path);
    const std::uint32_t count = std::uint32_t(feats.size());
    const std::uint32_t d = std::uint32_t(feats.front().size());
    std::fwrite(&count, sizeof(count), 1, f);
    std::fwrite(&d, sizeof(d), 1, f);
    for (const auto& v : feats) {
        if (v.size() != d) {
            std::fclose(f);
            throw shape_error("write_feature_file: ragged feature set");
        }
        for (double x : v) {
            const float fx = float(x);
            std::fwrite(&fx, sizeof(fx), 1, f);
        }
    }
    std::fclose(f);
}

inline FeatureSet read_feature_file(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("read_feature_file: cannot open " + path);
    std::uint32_t count = 0, d = 0;
    if (std::fread(&count, sizeof(count), 1, f) != 1 || std::fread(&d, sizeof(d), 1, f) != 1) {
        std::fclose(f);
        throw parse_error("read_feature_file: truncated header in " + path);
    }
    FeatureSet feats(count, std::vector<double>(d));
    for (auto& v : feats) {
        for (auto& x : v) {
            float fx = 0.0f;
            if (std::fread(&fx, sizeof(fx), 1, f) != 1) {
                std::fclose(f);
                throw integrity_error("read_feature_file: truncated payload in " + path);
            }
            x = double(fx);
        }
    }
    std::fclose(f);
    return feats;
}

} // namespace jointdiff

#endif // JOINTDIFF_METRICS_HPP
