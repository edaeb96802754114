#ifndef JOINTDIFF_EXPERIMENT_HPP
#define JOINTDIFF_EXPERIMENT_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "jointdiff/config.hpp"
#include "jointdiff/evaluate.hpp"
#include "jointdiff/sampler.hpp"
#include "jointdiff/stats.hpp"
#include "jointdiff/trainer.hpp"

namespace jointdiff {

inline constexpr const char* kLibraryVersion = "0.1.0";

// ---------------------------------------------------------------------------
// generated-sample archives

inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("file_hash: cannot open " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= std::uint8_t(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

// sample n_per_token draws for each token and write them as an archive with a
// provenance block
inline void sample_to_archive(const DenoiserModel& model_ema, const NoiseSchedule& sched,
                              const SamplerConfig& scfg,
                              const std::vector<ConditionToken>& tokens, int n_per_token,
                              std::uint64_t seed, const std::string& out_dir, int n_z,
                              const std::map<std::string, std::string>& provenance,
                              int threads = 1) {
    if (tokens.empty()) throw usage_error("sample_to_archive: at least one token is required");
    const int hw = model_ema.config().image_size;

    struct Job {
        ConditionToken token;
        std::uint64_t seed;
        int index;
    };
    std::vector<Job> jobs;
    int index = 0;
    for (const auto& tok : tokens)
        for (int k = 0; k < n_per_token; ++k) {
            jobs.push_back({tok, mix_seed(seed, std::uint64_t(index)), index});
            ++index;
        }

    std::vector<SliceData> slices(jobs.size());
    const int n_threads = std::max(1, std::min<int>(threads, int(jobs.size())));
    auto run_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            Rng rng(jobs[i].seed);
            auto out = sample(model_ema, jobs[i].token, scfg, sched, rng);
            SliceData sd;
            char name[32];
            std::snprintf(name, sizeof(name), "gen%05d_tok%03d", jobs[i].index,
                          jobs[i].token.token());
            sd.record.subject_id = name;
            sd.record.z_index = jobs[i].token.z_bin;
            sd.record.z_total = jobs[i].token.n_z;
            sd.record.z_bin = jobs[i].token.z_bin;
            sd.image.reserve(out.sample.image.size());
            sd.mask.reserve(out.sample.mask.size());
            bool any_lesion = false;
            for (std::size_t k = 0; k < out.sample.image.size(); ++k)
                sd.image.push_back(float(out.sample.image[k]));
            for (std::size_t k = 0; k < out.sample.mask.size(); ++k) {
                sd.mask.push_back(float(out.sample.mask[k]));
                any_lesion = any_lesion || out.sample.mask[k] > 0.0;
            }
            sd.record.pathology = any_lesion ? 1 : 0;
            slices[i] = std::move(sd);
        }
    };
    if (n_threads == 1) {
        run_range(0, jobs.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (jobs.size() + n_threads - 1) / n_threads;
        for (int k = 0; k < n_threads; ++k) {
            const std::size_t lo = std::size_t(k) * chunk;
            const std::size_t hi = std::min(jobs.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, lo, hi);
        }
        for (auto& th : pool) th.join();
    }

    auto meta = provenance;
    meta["seed"] = std::to_string(seed);
    meta["steps"] = std::to_string(scfg.steps);
    meta["eta"] = std::to_string(scfg.eta);
    meta["target"] = target_name(scfg.target);
    write_archive(out_dir, hw, hw, n_z, std::move(slices), meta);
}

// token pool for evaluation sampling: empirical (z_bin, pathology) pairs of
// the reference records, or the uniform grid
inline std::vector<ConditionToken> token_pool(const std::vector<SliceRecord>& records, int n_z,
                                              const std::string& distribution) {
    std::vector<ConditionToken> pool;
    if (distribution == "uniform") {
        for (int p = 0; p < 2; ++p)
            for (int z = 0; z < n_z; ++z) pool.push_back(make_token(z, p, n_z));
    } else {
        for (const auto& r : records) pool.push_back(make_token(r.z_bin, r.pathology, n_z));
    }
    if (pool.empty()) throw config_error("token_pool: no tokens available");
    return pool;
}

// ---------------------------------------------------------------------------
// sweep cells

struct CellKey {
    PredictionTarget target = PredictionTarget::X0;
    double p = 2.0;
    int replica = 0;

    std::string dir_name() const {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s_p%.1f_r%d", target_name(target), p, replica);
        return buf;
    }
};

struct CellResult {
    CellKey key;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalResult eval;

    static std::string csv_header() {
        std::string h = "target,p,replica,seed,status,kid_mean,kid_std,lpips_proxy,mmd_mf";
        for (const auto& n : ShapeFeatures::names()) h += ",w_" + n;
        return h;
    }

    std::string csv_line() const {
        char head[128];
        std::snprintf(head, sizeof(head), "%s,%.17g,%d,%llu,%s", target_name(key.target), key.p,
                      key.replica, static_cast<unsigned long long>(seed), ok ? "ok" : "failed");
        std::string line = head;
        char num[40];
        auto add = [&](double v) {
            std::snprintf(num, sizeof(num), ",%.17g", v);
            line += num;
        };
        add(eval.kid.mean);
        add(eval.kid.std);
        add(eval.lpips_proxy);
        add(eval.mmd_mf_value);
        for (double w : eval.wasserstein) add(w);
        return line;
    }
};

inline std::uint64_t cell_seed(std::uint64_t base, const CellKey& key) {
    const std::uint64_t tag =
        std::uint64_t(key.target == PredictionTarget::Epsilon ? 1
                      : key.target == PredictionTarget::Velocity ? 2 : 3);
    return mix_seed(mix_seed(base, tag * 1000003ULL + std::uint64_t(key.p * 10.0)),
                    std::uint64_t(key.replica));
}

// train + sample + evaluate one grid cell in its own directory
inline CellResult run_cell(const ExperimentConfig& base_cfg, const SliceArchive& archive,
                           const CellKey& key, const std::string& cell_dir, int threads) {
    CellResult res;
    res.key = key;
    res.seed = cell_seed(base_cfg.train.seed, key);
    try {
        ExperimentConfig cfg = base_cfg;
        cfg.train.target = key.target;
        cfg.train.loss.p = key.p;
        cfg.train.seed = res.seed;
        cfg.train.split_seed = base_cfg.split_seed;
        cfg.train.threads = threads;
        cfg.sampler.target = key.target;
        cfg.validate();

        write_resolved_config(cfg, cell_dir + "/config_resolved.json");

        DenoiserModel model(cfg.unet);
        Trainer trainer(model, cfg.train, config_hash(cfg));
        auto train_res = trainer.run(archive, cell_dir);

        // sample from the EMA weights of the best epoch
        auto best = Checkpoint::load(cell_dir + "/best.ckpt");
        DenoiserModel ema_model(cfg.unet);
        ema_model.params() = best.extract_store("ema", ema_model.params());

        auto split = subject_split(archive.records, cfg.train.val_fraction,
                                   cfg.train.split_seed ? cfg.train.split_seed : cfg.train.seed);
        std::vector<SliceRecord> val_records;
        for (std::size_t i : split.val) val_records.push_back(archive.records[i]);

        auto pool = token_pool(val_records, archive.n_z, cfg.sweep.token_distribution);
        Rng trng(mix_seed(res.seed, 0x746f6bu));
        std::vector<ConditionToken> tokens;
        for (int i = 0; i < cfg.sweep.n_eval_samples; ++i)
            tokens.push_back(pool[std::size_t(trng.uniform_int(0, std::int64_t(pool.size()) - 1))]);

        const std::string gen_dir = cell_dir + "/samples";
        sample_to_archive(ema_model, trainer.schedule(), cfg.sampler, tokens, 1, res.seed,
                          gen_dir, archive.n_z,
                          {{"checkpoint_hash", std::to_string(file_hash(cell_dir + "/best.ckpt"))},
                           {"best_epoch", std::to_string(train_res.best_epoch)}},
                          threads);

        // evaluate generated samples against the held-out real split
        std::vector<SliceData> val_slices;
        for (std::size_t i : split.val) {
            SliceData sd;
            sd.record = archive.records[i];
            Tensor img = archive.load_image(i), mask = archive.load_mask(i);
            for (std::size_t k = 0; k < img.size(); ++k) sd.image.push_back(float(img[k]));
            for (std::size_t k = 0; k < mask.size(); ++k) sd.mask.push_back(float(mask[k]));
            val_slices.push_back(std::move(sd));
        }
        const std::string val_dir = cell_dir + "/heldout";
        write_archive(val_dir, archive.height, archive.width, archive.n_z, std::move(val_slices));

        auto extractor = make_extractor(cfg.metrics.extractor);
        MetricConfig mcfg = cfg.metrics;
        mcfg.seed = mix_seed(res.seed, 0x6d6574u);
        mcfg.kid_subset_size = std::min<int>(
            mcfg.kid_subset_size, int(std::min(split.val.size(), std::size_t(tokens.size()))));
        auto gen_archive = read_archive(gen_dir);
        auto val_archive = read_archive(val_dir);
        res.eval = evaluate_archives(val_archive, gen_archive, mcfg, *extractor);
        write_metric_csv(cell_dir + "/metrics.csv", res.eval.rows());
        res.ok = true;
    } catch (const std::exception& e) {
        res.ok = false;
        res.error = e.what();
    }
    return res;
}

// ---------------------------------------------------------------------------
// statistics block: a pure function of the per-replica metric table

struct StatRow {
    std::string test;    // kruskal_wallis | dunn | friedman | nemenyi | cliffs_delta
    std::string metric;  // kid_mean | lpips_proxy | mmd_mf
    std::string scope;   // targets | <target> | pair names
    double statistic = std::nan("");
    double p = std::nan("");
    double adjusted_p = std::nan("");
    double effect_size = std::nan("");
    bool gated = false; // true when the omnibus test was NOT significant
    bool significant = false;

    static std::string csv_header() {
        return "test,metric,scope,statistic,p,adjusted_p,effect_size,gated,significant";
    }

    std::string csv_line() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.17g,%.17g,%.17g,%.17g,%d,%d", test.c_str(),
                      metric.c_str(), scope.c_str(), statistic, p, adjusted_p, effect_size,
                      gated ? 1 : 0, significant ? 1 : 0);
        return buf;
    }
};

inline constexpr double kStatsAlpha = 0.05;

namespace detail {

inline double cell_metric(const CellResult& c, const std::string& metric) {
    if (metric == "kid_mean") return c.eval.kid.mean;
    if (metric == "lpips_proxy") return c.eval.lpips_proxy;
    if (metric == "mmd_mf") return c.eval.mmd_mf_value;
    throw config_error("unknown report metric: " + metric);
}

} // namespace detail

// KW/Dunn across prediction targets pooling replicas and p, Friedman/Nemenyi
// across p within each target, Cliff's delta for target pairs
inline std::vector<StatRow> stats_block(const std::vector<CellResult>& cells,
                                        const std::vector<PredictionTarget>& targets,
                                        const std::vector<double>& p_values, int replicas) {
    std::vector<StatRow> rows;
    const std::vector<std::string> metrics{"kid_mean", "lpips_proxy", "mmd_mf"};

    for (const auto& metric : metrics) {
        // pooled per-target groups
        std::vector<std::vector<double>> groups(targets.size());
        bool complete = true;
        for (const auto& c : cells) {
            if (!c.ok) {
                complete = false;
                continue;
            }
            const auto it = std::find(targets.begin(), targets.end(), c.key.target);
            if (it == targets.end()) continue;
            const double v = detail::cell_metric(c, metric);
            if (std::isnan(v)) {
                complete = false;
                continue;
            }
            groups[std::size_t(it - targets.begin())].push_back(v);
        }
        bool usable = targets.size() >= 2;
        for (const auto& g : groups) usable = usable && g.size() >= 1;
        std::size_t total = 0;
        for (const auto& g : groups) total += g.size();
        if (!usable || total < 3) continue;

        const auto kw = kruskal_wallis(groups);
        StatRow kwrow;
        kwrow.test = "kruskal_wallis";
        kwrow.metric = metric;
        kwrow.scope = "targets";
        kwrow.statistic = kw.H;
        kwrow.p = kw.p;
        kwrow.significant = kw.p <= kStatsAlpha;
        kwrow.gated = !kwrow.significant || !complete;
        rows.push_back(kwrow);

        // Dunn post-hoc with BH correction across the pairs of this metric
        auto dunn = dunn_posthoc(groups);
        std::vector<double> praw;
        for (const auto& d : dunn) praw.push_back(d.p);
        auto bh = bh_fdr(praw, kStatsAlpha);
        for (std::size_t k = 0; k < dunn.size(); ++k) {
            StatRow dr;
            dr.test = "dunn";
            dr.metric = metric;
            dr.scope = std::string(target_name(targets[dunn[k].i])) + "_vs_" +
                       target_name(targets[dunn[k].j]);
            dr.statistic = dunn[k].z;
            dr.p = dunn[k].p;
            dr.adjusted_p = bh.adjusted[k];
            dr.effect_size = cliffs_delta(groups[dunn[k].i], groups[dunn[k].j]);
            dr.significant = bh.reject[k];
            dr.gated = kwrow.gated;
            rows.push_back(dr);

            StatRow cd = dr;
            cd.test = "cliffs_delta";
            cd.statistic = dr.effect_size;
            cd.p = std::nan("");
            cd.adjusted_p = std::nan("");
            cd.significant = false;
            rows.push_back(cd);
        }

        // Friedman + Nemenyi across p within each target (replicas as rows)
        for (const auto& target : targets) {
            std::vector<std::vector<double>> matrix;
            bool target_complete = true;
            for (int r = 0; r < replicas; ++r) {
                std::vector<double> row;
                for (double p : p_values) {
                    const CellResult* found = nullptr;
                    for (const auto& c : cells)
                        if (c.ok && c.key.target == target && c.key.p == p && c.key.replica == r)
                            found = &c;
                    if (!found) {
                        target_complete = false;
                        break;
                    }
                    const double v = detail::cell_metric(*found, metric);
                    if (std::isnan(v)) {
                        target_complete = false;
                        break;
                    }
                    row.push_back(v);
                }
                if (!target_complete) break;
                matrix.push_back(std::move(row));
            }
            if (!target_complete || matrix.size() < 2 || p_values.size() < 2) continue;

            const auto fr = friedman(matrix);
            StatRow frow;
            frow.test = "friedman";
            frow.metric = metric;
            frow.scope = target_name(target);
            frow.statistic = fr.chi2;
            frow.p = fr.p;
            frow.significant = fr.p <= kStatsAlpha;
            frow.gated = !frow.significant;
            rows.push_back(frow);

            const auto nem = nemenyi(matrix);
            for (std::size_t i = 0; i < p_values.size(); ++i) {
                for (std::size_t j = i + 1; j < p_values.size(); ++j) {
                    StatRow nr;
                    nr.test = "nemenyi";
                    nr.metric = metric;
                    char scope[64];
                    std::snprintf(scope, sizeof(scope), "%s:p%.1f_vs_p%.1f",
                                  target_name(target), p_values[i], p_values[j]);
                    nr.scope = scope;
                    nr.statistic = std::fabs(nem.mean_ranks[i] - nem.mean_ranks[j]);
                    nr.effect_size = nem.critical_difference;
                    nr.significant = nem.significant[i][j];
                    nr.gated = frow.gated;
                    rows.push_back(nr);
                }
            }
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// report rendering

struct AggregateCell {
    PredictionTarget target;
    double p = 0.0;
    int n = 0;
    double kid_mean = std::nan(""), kid_std = std::nan("");
    double lpips_mean = std::nan(""), lpips_std = std::nan("");
    double mmd_mean = std::nan(""), mmd_std = std::nan("");
};

inline std::vector<AggregateCell> aggregate_cells(const std::vector<CellResult>& cells,
                                                  const std::vector<PredictionTarget>& targets,
                                                  const std::vector<double>& p_values) {
    std::vector<AggregateCell> out;
    for (auto target : targets) {
        for (double p : p_values) {
            AggregateCell agg;
            agg.target = target;
            agg.p = p;
            std::vector<double> kidv, lpipsv, mmdv;
            for (const auto& c : cells) {
                if (!c.ok || c.key.target != target || c.key.p != p) continue;
                kidv.push_back(c.eval.kid.mean);
                lpipsv.push_back(c.eval.lpips_proxy);
                mmdv.push_back(c.eval.mmd_mf_value);
            }
            agg.n = int(kidv.size());
            auto mean_std = [](const std::vector<double>& v, double& m, double& s) {
                if (v.empty()) return;
                m = 0.0;
                for (double x : v) m += x;
                m /= double(v.size());
                s = 0.0;
                if (v.size() > 1) {
                    for (double x : v) s += (x - m) * (x - m);
                    s = std::sqrt(s / double(v.size() - 1));
                }
            };
            mean_std(kidv, agg.kid_mean, agg.kid_std);
            mean_std(lpipsv, agg.lpips_mean, agg.lpips_std);
            mean_std(mmdv, agg.mmd_mean, agg.mmd_std);
            out.push_back(agg);
        }
    }
    return out;
}

// aligned text table shaped like the similarity-metrics grid, plus the
// directional note (recorded for inspection, never a gate)
inline std::string render_report_table(const std::vector<AggregateCell>& aggs,
                                       const std::vector<CellResult>& cells) {
    std::ostringstream os;
    os << "target    p     KID(mean+/-std)        LPIPS-proxy            MMD-MF\n";
    os << "------------------------------------------------------------------------\n";
    char line[192];
    for (const auto& a : aggs) {
        std::snprintf(line, sizeof(line), "%-8s  %-4.1f  %9.5f +/- %-8.5f %9.5f +/- %-8.5f %9.5f +/- %-8.5f\n",
                      target_name(a.target), a.p, a.kid_mean, a.kid_std, a.lpips_mean,
                      a.lpips_std, a.mmd_mean, a.mmd_std);
        os << line;
    }
    int failed = 0;
    for (const auto& c : cells)
        if (!c.ok) ++failed;
    if (failed > 0) os << "incomplete cells: " << failed << "\n";

    // directional note: which target wins each metric on the aggregate means
    for (const std::string metric : {"kid", "lpips", "mmd_mf"}) {
        const AggregateCell* best = nullptr;
        for (const auto& a : aggs) {
            const double v = metric == "kid" ? a.kid_mean
                             : metric == "lpips" ? a.lpips_mean : a.mmd_mean;
            const double bv = !best ? std::nan("")
                              : metric == "kid" ? best->kid_mean
                              : metric == "lpips" ? best->lpips_mean : best->mmd_mean;
            if (!std::isnan(v) && (best == nullptr || v < bv)) best = &a;
        }
        if (best) {
            std::snprintf(line, sizeof(line), "best %-12s %s (p=%.1f)   [recorded, not a gate]\n",
                          (metric + ":").c_str(), target_name(best->target), best->p);
            os << line;
        }
    }
    return os.str();
}

inline void write_cell_csv(const std::string& path, const std::vector<CellResult>& cells) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write per-replica csv: " + path);
    out << CellResult::csv_header() << "\n";
    for (const auto& c : cells) out << c.csv_line() << "\n";
}

inline void write_stats_csv(const std::string& path, const std::vector<StatRow>& rows) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write stats csv: " + path);
    out << StatRow::csv_header() << "\n";
    for (const auto& r : rows) out << r.csv_line() << "\n";
}

inline void write_aggregate_csv(const std::string& path, const std::vector<AggregateCell>& aggs) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write aggregate csv: " + path);
    out << "target,p,n,kid_mean,kid_std,lpips_mean,lpips_std,mmd_mean,mmd_std\n";
    char buf[256];
    for (const auto& a : aggs) {
        std::snprintf(buf, sizeof(buf), "%s,%.17g,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                      target_name(a.target), a.p, a.n, a.kid_mean, a.kid_std, a.lpips_mean,
                      a.lpips_std, a.mmd_mean, a.mmd_std);
        out << buf << "\n";
    }
}

// parse the per-replica CSV back into cell results (report regeneration)
inline std::vector<CellResult> read_cell_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("per-replica csv not found: " + path);
    std::string line;
    if (!std::getline(in, line)) throw parse_error("empty per-replica csv: " + path);
    if (line != CellResult::csv_header())
        throw parse_error("unexpected per-replica csv header: " + line);

    std::vector<CellResult> cells;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != std::size_t(9 + ShapeFeatures::kCount))
            throw parse_error("per-replica csv " + path + ":" + std::to_string(line_no) +
                              ": wrong field count");
        CellResult c;
        try {
            c.key.target = target_from_name(fields[0]);
            c.key.p = std::stod(fields[1]);
            c.key.replica = std::stoi(fields[2]);
            c.seed = std::stoull(fields[3]);
            c.ok = fields[4] == "ok";
            c.eval.kid.mean = std::stod(fields[5]);
            c.eval.kid.std = std::stod(fields[6]);
            c.eval.lpips_proxy = std::stod(fields[7]);
            c.eval.mmd_mf_value = std::stod(fields[8]);
            for (int i = 0; i < ShapeFeatures::kCount; ++i)
                c.eval.wasserstein[std::size_t(i)] = std::stod(fields[std::size_t(9 + i)]);
        } catch (const std::exception&) {
            throw parse_error("per-replica csv " + path + ":" + std::to_string(line_no) +
                              ": malformed value");
        }
        cells.push_back(std::move(c));
    }
    return cells;
}

// canonical grid implied by a set of cells: targets in enum order, p values
// ascending, replicas = max replica index + 1
struct ReportGrid {
    std::vector<PredictionTarget> targets;
    std::vector<double> p_values;
    int replicas = 0;
};

inline ReportGrid derive_grid(const std::vector<CellResult>& cells) {
    ReportGrid g;
    for (auto t : {PredictionTarget::Epsilon, PredictionTarget::Velocity, PredictionTarget::X0})
        for (const auto& c : cells)
            if (c.key.target == t) {
                g.targets.push_back(t);
                break;
            }
    for (const auto& c : cells)
        if (std::find(g.p_values.begin(), g.p_values.end(), c.key.p) == g.p_values.end())
            g.p_values.push_back(c.key.p);
    std::sort(g.p_values.begin(), g.p_values.end());
    for (const auto& c : cells) g.replicas = std::max(g.replicas, c.key.replica + 1);
    return g;
}

// regenerate aggregate + stats + table; a pure function of the per-replica rows
inline void write_report(const std::string& out_dir, const std::vector<CellResult>& cells) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    write_cell_csv(out_dir + "/per_replica.csv", cells);
    const auto grid = derive_grid(cells);
    const auto aggs = aggregate_cells(cells, grid.targets, grid.p_values);
    write_aggregate_csv(out_dir + "/aggregate.csv", aggs);
    const auto stats = stats_block(cells, grid.targets, grid.p_values, grid.replicas);
    write_stats_csv(out_dir + "/stats.csv", stats);
    std::ofstream table(out_dir + "/report.txt");
    table << render_report_table(aggs, cells);
}

// ---------------------------------------------------------------------------
// the full sweep

struct SweepResult {
    std::vector<CellResult> cells;
    int failed = 0;
};

inline SweepResult run_sweep(const ExperimentConfig& cfg, const SliceArchive& archive,
                             const std::string& out_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(out_dir);
    write_resolved_config(cfg, out_dir + "/config_resolved.json");

    std::vector<CellKey> keys;
    for (auto target : cfg.sweep.targets)
        for (double p : cfg.sweep.p_values)
            for (int r = 0; r < cfg.sweep.replicas; ++r) keys.push_back({target, p, r});

    std::vector<CellResult> cells(keys.size());
    const int jobs = std::max(1, std::min<int>(cfg.sweep.jobs, int(keys.size())));
    // one worker per cell keeps each run single-threaded and deterministic
    const int cell_threads = jobs > 1 ? 1 : cfg.train.threads;

    auto worker = [&](int widx) {
        for (std::size_t idx = std::size_t(widx); idx < keys.size(); idx += std::size_t(jobs)) {
            const std::string cell_dir = out_dir + "/cells/" + keys[idx].dir_name();
            fs::create_directories(cell_dir);
            cells[idx] = run_cell(cfg, archive, keys[idx], cell_dir, cell_threads);
        }
    };
    if (jobs == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < jobs; ++k) pool.emplace_back(worker, k);
        for (auto& th : pool) th.join();
    }

    SweepResult res;
    res.cells = cells;
    for (const auto& c : cells)
        if (!c.ok) ++res.failed;

    write_report(out_dir, cells);
    if (res.failed > 0) {
        std::ofstream fail(out_dir + "/failures.txt");
        for (const auto& c : cells)
            if (!c.ok) fail << c.key.dir_name() << ": " << c.error << "\n";
    }
    return res;
}

} // namespace jointdiff

#endif // JOINTDIFF_EXPERIMENT_HPP
