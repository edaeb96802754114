#ifndef JOINTDIFF_EVALUATE_HPP
#define JOINTDIFF_EVALUATE_HPP

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "jointdiff/config.hpp"
#include "jointdiff/data.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/metrics.hpp"
#include "jointdiff/morphometry.hpp"
#include "jointdiff/rng.hpp"

namespace jointdiff {

// extractor registry; "external:<path>" is handled at the call sites that own
// precomputed feature files
inline std::unique_ptr<FeatureExtractor> make_extractor(const std::string& name) {
    if (name == "toy") return std::make_unique<ToyFeatureExtractor>();
    throw config_error("unknown feature extractor: " + name +
                       " (available: toy; precomputed features go through --*-features)");
}

// all lesion-instance shape features of an archive, one 9-vector per instance
inline FeatureSet archive_shape_features(const SliceArchive& archive, const MetricConfig& cfg) {
    FeatureSet feats;
    for (std::size_t i = 0; i < archive.records.size(); ++i) {
        if (archive.records[i].pathology == 0) continue;
        Tensor mask = archive.load_mask(i);
        for (const auto& inst :
             connected_components(mask, cfg.connectivity, cfg.min_lesion_area)) {
            const auto f = shape_features(inst).to_array();
            feats.emplace_back(f.begin(), f.end());
        }
    }
    return feats;
}

inline std::vector<Tensor> archive_images(const SliceArchive& archive) {
    std::vector<Tensor> images;
    images.reserve(archive.records.size());
    for (std::size_t i = 0; i < archive.records.size(); ++i)
        images.push_back(archive.load_image(i));
    return images;
}

struct MetricRow {
    std::string metric;
    double value = 0.0;
    double std_dev = 0.0;
    int n_real = 0;
    int n_gen = 0;
    std::string extractor;
    std::uint64_t seed = 0;

    std::string csv_line() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%d,%d,%s,%llu", metric.c_str(), value,
                      std_dev, n_real, n_gen, extractor.c_str(),
                      static_cast<unsigned long long>(seed));
        return buf;
    }

    static std::string csv_header() { return "metric,value,std,n_real,n_gen,extractor,seed"; }
};

struct EvalResult {
    KidResult kid;
    double lpips_proxy = std::nan("");
    double mmd_mf_value = std::nan("");
    std::array<double, ShapeFeatures::kCount> wasserstein{};
    int n_real_images = 0, n_gen_images = 0;
    int n_real_instances = 0, n_gen_instances = 0;
    std::string extractor_name;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;

    std::vector<MetricRow> rows() const {
        std::vector<MetricRow> out;
        auto push = [&](const std::string& name, double value, double sd, int nr, int ng) {
            MetricRow r;
            r.metric = name;
            r.value = value;
            r.std_dev = sd;
            r.n_real = nr;
            r.n_gen = ng;
            r.extractor = extractor_name;
            r.seed = seed;
            out.push_back(r);
        };
        push("kid", kid.mean, kid.std, n_real_images, n_gen_images);
        push("lpips_proxy", lpips_proxy, 0.0, n_real_images, n_gen_images);
        push("mmd_mf", mmd_mf_value, 0.0, n_real_instances, n_gen_instances);
        for (int i = 0; i < ShapeFeatures::kCount; ++i)
            push("wasserstein_" + ShapeFeatures::names()[std::size_t(i)],
                 wasserstein[std::size_t(i)], 0.0, n_real_instances, n_gen_instances);
        return out;
    }
};

// image metrics (KID, perceptual proxy) from precomputed feature sets plus
// mask morphometry between two archives
inline EvalResult evaluate_features_and_masks(const FeatureSet& real_feats,
                                              const FeatureSet& gen_feats,
                                              const FeatureSet& real_shape,
                                              const FeatureSet& gen_shape,
                                              const MetricConfig& cfg,
                                              const std::string& extractor_name) {
    EvalResult res;
    res.extractor_name = extractor_name;
    res.seed = cfg.seed;
    res.n_real_images = int(real_feats.size());
    res.n_gen_images = int(gen_feats.size());
    res.n_real_instances = int(real_shape.size());
    res.n_gen_instances = int(gen_shape.size());

    Rng rng(mix_seed(cfg.seed, 0x6b6964u));
    res.kid = kid(real_feats, gen_feats, cfg.kid_subset_size, cfg.kid_n_subsets, rng);

    // perceptual proxy: mean normalized feature distance over random pairs
    Rng prng(mix_seed(cfg.seed, 0x707273u));
    const double d = double(real_feats.front().size());
    double acc = 0.0;
    for (int k = 0; k < cfg.perceptual_pairs; ++k) {
        const auto& a = gen_feats[std::size_t(prng.uniform_int(0, std::int64_t(gen_feats.size()) - 1))];
        const auto& b = real_feats[std::size_t(prng.uniform_int(0, std::int64_t(real_feats.size()) - 1))];
        double sq = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
        acc += std::sqrt(sq / d);
    }
    res.lpips_proxy = acc / double(cfg.perceptual_pairs);

    if (real_shape.size() >= 2 && gen_shape.size() >= 2) {
        auto mmd = mmd_mf(real_shape, gen_shape);
        res.mmd_mf_value = mmd.value;
        for (std::size_t fi : mmd.dropped_features)
            res.warnings.push_back("mmd_mf dropped zero-variance feature " +
                                   ShapeFeatures::names()[fi]);
        for (int i = 0; i < ShapeFeatures::kCount; ++i) {
            std::vector<double> a, b;
            for (const auto& v : real_shape) a.push_back(v[std::size_t(i)]);
            for (const auto& v : gen_shape) b.push_back(v[std::size_t(i)]);
            res.wasserstein[std::size_t(i)] = wasserstein_1d(a, b);
        }
    } else {
        res.warnings.push_back("too few lesion instances for mask morphometry (real=" +
                               std::to_string(real_shape.size()) + ", gen=" +
                               std::to_string(gen_shape.size()) + ")");
        res.wasserstein.fill(std::nan(""));
    }
    return res;
}

inline EvalResult evaluate_archives(const SliceArchive& real, const SliceArchive& gen,
                                    const MetricConfig& cfg, const FeatureExtractor& extractor) {
    const auto real_feats = extractor.embed_all(archive_images(real));
    const auto gen_feats = extractor.embed_all(archive_images(gen));
    const auto real_shape = archive_shape_features(real, cfg);
    const auto gen_shape = archive_shape_features(gen, cfg);
    return evaluate_features_and_masks(real_feats, gen_feats, real_shape, gen_shape, cfg,
                                       extractor.name());
}

// the same protocol between two disjoint halves of the real archive
inline EvalResult real_vs_real_baseline(const SliceArchive& real, const MetricConfig& cfg,
                                        const FeatureExtractor& extractor, std::uint64_t seed) {
    if (real.records.size() < 4)
        throw config_error("real_vs_real_baseline: need at least 4 records");

    std::vector<std::size_t> idx(real.records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(mix_seed(seed, 0x725f72u));
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);
    const std::size_t half = idx.size() / 2;

    auto subset_feats = [&](std::size_t lo, std::size_t hi) {
        FeatureSet feats;
        for (std::size_t k = lo; k < hi; ++k)
            feats.push_back(extractor.embed(real.load_image(idx[k])));
        return feats;
    };
    auto subset_shape = [&](std::size_t lo, std::size_t hi) {
        FeatureSet feats;
        for (std::size_t k = lo; k < hi; ++k) {
            const std::size_t i = idx[k];
            if (real.records[i].pathology == 0) continue;
            Tensor mask = real.load_mask(i);
            for (const auto& inst :
                 connected_components(mask, cfg.connectivity, cfg.min_lesion_area)) {
                const auto f = shape_features(inst).to_array();
                feats.emplace_back(f.begin(), f.end());
            }
        }
        return feats;
    };

    MetricConfig baseline_cfg = cfg;
    baseline_cfg.seed = mix_seed(seed, 0x62736cu);
    baseline_cfg.kid_subset_size = std::min<int>(cfg.kid_subset_size, int(half));
    return evaluate_features_and_masks(subset_feats(0, half), subset_feats(half, idx.size()),
                                       subset_shape(0, half), subset_shape(half, idx.size()),
                                       baseline_cfg, extractor.name());
}

inline void write_metric_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write metric csv: " + path);
    out << MetricRow::csv_header() << "\n";
    for (const auto& r : rows) out << r.csv_line() << "\n";
}

} // namespace jointdiff

#endif // JOINTDIFF_EVALUATE_HPP
