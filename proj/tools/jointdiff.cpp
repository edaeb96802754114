// Command-line entry points: toy-data generation, slice ingestion, training,
// conditional sampling, evaluation, the target x Lp sweep, and report
// regeneration. Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 partial sweep.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "jointdiff/config.hpp"
#include "jointdiff/data.hpp"
#include "jointdiff/evaluate.hpp"
#include "jointdiff/experiment.hpp"
#include "jointdiff/sampler.hpp"
#include "jointdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace jointdiff;

namespace {

ExperimentConfig load_config_with_overrides(const std::string& path,
                                            const std::vector<std::string>& overrides) {
    json j;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw io_error("config file not found: " + path);
        try {
            in >> j;
        } catch (const json::parse_error& e) {
            throw parse_error("config " + path + ": " + e.what());
        }
    } else {
        j = json::object();
    }
    for (const auto& o : overrides) apply_override(j, o);
    try {
        auto cfg = config_from_json(j);
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        throw config_error("config: " + std::string(e.what()));
    }
}

// resolve the training archive: an explicit directory wins, otherwise the toy
// dataset is generated under the run directory
SliceArchive resolve_archive(const ExperimentConfig& cfg, const std::string& archive_flag,
                             const std::string& run_dir) {
    if (!archive_flag.empty()) return read_archive(archive_flag);
    if (cfg.data_source == "archive") return read_archive(cfg.archive_path);
    const std::string toy_dir = run_dir + "/toy_archive";
    if (!fs::exists(toy_dir + "/manifest.txt")) generate_toy_dataset(cfg.toy, toy_dir);
    return read_archive(toy_dir);
}

std::vector<ConditionToken> parse_tokens(const std::string& spec, int n_z) {
    std::vector<ConditionToken> tokens;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos)
            throw usage_error("token must look like z_bin:pathology, got: " + item);
        try {
            tokens.push_back(make_token(std::stoi(item.substr(0, colon)),
                                        std::stoi(item.substr(colon + 1)), n_z));
        } catch (const std::invalid_argument&) {
            throw usage_error("non-numeric token component in: " + item);
        }
    }
    if (tokens.empty()) throw usage_error("no tokens given");
    return tokens;
}

int cmd_generate_toy(const std::string& config_path, const std::vector<std::string>& overrides,
                     const std::string& out) {
    auto cfg = load_config_with_overrides(config_path, overrides);
    generate_toy_dataset(cfg.toy, out);
    auto archive = read_archive(out);
    std::printf("wrote %zu slices (%dx%d) to %s\n", archive.records.size(), archive.height,
                archive.width, out.c_str());
    return 0;
}

int cmd_ingest(const std::string& input_dir, const std::string& meta_path, const std::string& out,
               int height, int width, int n_z, double lo_pct, double hi_pct) {
    std::ifstream meta(meta_path);
    if (!meta) throw io_error("metadata table not found: " + meta_path);

    auto read_raw = [&](const std::string& rel) {
        const std::string path = input_dir + "/" + rel;
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw io_error("payload not found: " + path);
        std::vector<float> buf(std::size_t(height) * width);
        const std::size_t got = std::fread(buf.data(), sizeof(float), buf.size(), f);
        std::fclose(f);
        if (got != buf.size()) throw integrity_error("payload wrong size: " + path);
        return buf;
    };

    std::vector<SliceData> slices;
    std::string line;
    int line_no = 0;
    while (std::getline(meta, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        SliceData sd;
        std::string image_file, mask_file;
        if (!(ss >> sd.record.subject_id >> sd.record.z_index >> sd.record.z_total >>
              sd.record.pathology >> image_file))
            throw parse_error("metadata " + meta_path + ":" + std::to_string(line_no) +
                              ": expected subject z_index z_total pathology image [mask]");
        ss >> mask_file;
        sd.record.z_bin = compute_z_bin(sd.record.z_index, sd.record.z_total, n_z);

        auto raw = read_raw(image_file);
        Tensor img = Tensor::plane(height, width);
        for (std::size_t i = 0; i < raw.size(); ++i) img[i] = double(raw[i]);
        Tensor norm = percentile_normalize(img, lo_pct, hi_pct);
        for (std::size_t i = 0; i < norm.size(); ++i) sd.image.push_back(float(norm[i]));

        if (!mask_file.empty()) {
            auto mraw = read_raw(mask_file);
            for (float v : mraw) sd.mask.push_back(v > 0.0f ? 1.0f : -1.0f);
        } else {
            sd.mask.assign(std::size_t(height) * width, -1.0f);
        }
        slices.push_back(std::move(sd));
    }
    if (slices.empty()) throw config_error("metadata table holds no records");
    const std::size_t count = slices.size();
    write_archive(out, height, width, n_z, std::move(slices),
                  {{"source", "ingest"}, {"meta", meta_path}});
    std::printf("ingested %zu slices into %s\n", count, out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& archive_flag, const std::string& out, const std::string& resume,
              int session_epochs) {
    auto cfg = load_config_with_overrides(config_path, overrides);
    fs::create_directories(out);
    auto archive = resolve_archive(cfg, archive_flag, out);
    write_resolved_config(cfg, out + "/config_resolved.json");

    DenoiserModel model(cfg.unet);
    Trainer trainer(model, cfg.train, config_hash(cfg));
    auto res = trainer.run(archive, out, resume, session_epochs);
    std::printf("trained %d epochs; best epoch %zu (val %.6g)\nbest checkpoint: %s\n",
                res.epochs_run, res.best_epoch, res.best_val, res.best_checkpoint.c_str());
    return 0;
}

int cmd_sample(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& checkpoint, const std::string& token_spec, int n_per_token,
               std::uint64_t seed, const std::string& out, bool use_live) {
    auto cfg = load_config_with_overrides(config_path, overrides);
    if (token_spec.empty())
        throw usage_error("sampling requires --tokens; unconditional sampling is not supported");
    const int n_z = cfg.toy.n_z;
    auto tokens = parse_tokens(token_spec, n_z);

    auto ck = Checkpoint::load(checkpoint);
    DenoiserModel model(cfg.unet);
    model.params() = ck.extract_store(use_live ? "params" : "ema", model.params());

    auto sched = cosine_schedule(cfg.train.timesteps, cfg.train.schedule_s);
    SamplerConfig scfg = cfg.sampler;
    scfg.target = cfg.train.target;
    sample_to_archive(model, sched, scfg, tokens, n_per_token, seed, out, n_z,
                      {{"checkpoint_hash", std::to_string(file_hash(checkpoint))},
                       {"weights", use_live ? "live" : "ema"}},
                      cfg.train.threads);
    std::printf("wrote %zu samples to %s\n", tokens.size() * std::size_t(n_per_token),
                out.c_str());
    return 0;
}

int cmd_evaluate(const std::string& real_dir, const std::string& gen_dir, const std::string& out,
                 std::uint64_t seed, const std::string& real_features,
                 const std::string& gen_features, bool with_baseline,
                 const std::vector<std::string>& overrides) {
    auto cfg = load_config_with_overrides("", overrides);
    MetricConfig mcfg = cfg.metrics;
    mcfg.seed = seed;

    auto real = read_archive(real_dir);
    auto gen = read_archive(gen_dir);

    EvalResult eval;
    std::string extractor_used;
    if (!real_features.empty() || !gen_features.empty()) {
        if (real_features.empty() || gen_features.empty())
            throw usage_error(
                "external-features mode needs both --real-features and --gen-features");
        auto rf = read_feature_file(real_features);
        auto gf = read_feature_file(gen_features);
        mcfg.kid_subset_size =
            std::min<int>(mcfg.kid_subset_size, int(std::min(rf.size(), gf.size())));
        eval = evaluate_features_and_masks(rf, gf, archive_shape_features(real, mcfg),
                                           archive_shape_features(gen, mcfg), mcfg, "external");
        extractor_used = "external";
    } else {
        auto extractor = make_extractor(mcfg.extractor);
        mcfg.kid_subset_size = std::min<int>(
            mcfg.kid_subset_size, int(std::min(real.records.size(), gen.records.size())));
        eval = evaluate_archives(real, gen, mcfg, *extractor);
        extractor_used = extractor->name();
    }

    auto rows = eval.rows();
    if (with_baseline && real_features.empty()) {
        auto extractor = make_extractor(mcfg.extractor);
        auto baseline = real_vs_real_baseline(real, mcfg, *extractor, seed);
        for (auto row : baseline.rows()) {
            row.metric = "baseline_" + row.metric;
            rows.push_back(row);
        }
    }
    for (const auto& w : eval.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());

    if (out.empty()) {
        std::printf("%s\n", MetricRow::csv_header().c_str());
        for (const auto& r : rows) std::printf("%s\n", r.csv_line().c_str());
    } else {
        write_metric_csv(out, rows);
        std::printf("wrote %zu metric rows to %s (extractor %s)\n", rows.size(), out.c_str(),
                    extractor_used.c_str());
    }
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& archive_flag, const std::string& out) {
    auto cfg = load_config_with_overrides(config_path, overrides);
    fs::create_directories(out);
    auto archive = resolve_archive(cfg, archive_flag, out);
    auto res = run_sweep(cfg, archive, out);
    std::printf("sweep finished: %zu cells, %d failed; report in %s\n", res.cells.size(),
                res.failed, out.c_str());
    return res.failed == 0 ? 0 : 3;
}

int cmd_report(const std::string& cells_csv, const std::string& out) {
    auto cells = read_cell_csv(cells_csv);
    write_report(out, cells);
    std::printf("report regenerated in %s from %zu cells\n", out.c_str(), cells.size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint image-mask diffusion laboratory"};
    app.require_subcommand(1);

    std::string config_path, archive_flag, out_dir, resume, checkpoint, token_spec;
    std::string real_dir, gen_dir, real_features, gen_features, meta_path, input_dir, cells_csv;
    std::vector<std::string> overrides;
    int session_epochs = -1, n_per_token = 1, height = 32, width = 32, n_z = 30;
    double lo_pct = 0.05, hi_pct = 99.5;
    std::uint64_t seed = 1;
    bool use_live = false, no_baseline = false;

    auto add_config = [&](CLI::App* cmd, bool required) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config (json)");
        if (required) opt->required();
        cmd->add_option("--set", overrides, "override a config field, e.g. train.lr=2e-4");
    };

    auto* gen_toy = app.add_subcommand("generate-toy", "generate the synthetic slice archive");
    add_config(gen_toy, false);
    gen_toy->add_option("--out", out_dir, "output archive directory")->required();

    auto* ingest = app.add_subcommand("ingest", "build an archive from pre-extracted slices");
    ingest->add_option("--input-dir", input_dir, "directory holding raw float32 payloads")
        ->required();
    ingest
        ->add_option("--meta", meta_path,
                     "metadata table: subject z_index z_total pathology image [mask]")
        ->required();
    ingest->add_option("--out", out_dir, "output archive directory")->required();
    ingest->add_option("--height", height, "slice height")->required();
    ingest->add_option("--width", width, "slice width")->required();
    ingest->add_option("--n-z", n_z, "z bin count");
    ingest->add_option("--lo-pct", lo_pct, "low percentile for intensity scaling");
    ingest->add_option("--hi-pct", hi_pct, "high percentile for intensity scaling");

    auto* train = app.add_subcommand("train", "train one configuration");
    add_config(train, true);
    train->add_option("--archive", archive_flag, "training archive (overrides config)");
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--session-epochs", session_epochs, "epoch budget for this invocation");

    auto* sample_cmd = app.add_subcommand("sample", "draw conditional samples from a checkpoint");
    add_config(sample_cmd, true);
    sample_cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    sample_cmd->add_option("--tokens", token_spec, "comma list of z_bin:pathology conditions");
    sample_cmd->add_option("--n-per-token", n_per_token, "samples per condition");
    sample_cmd->add_option("--seed", seed, "sampling seed");
    sample_cmd->add_option("--out", out_dir, "output archive directory")->required();
    sample_cmd->add_flag("--live", use_live, "sample from live weights instead of EMA");

    auto* eval_cmd = app.add_subcommand("evaluate", "compute the metric suite between archives");
    eval_cmd->add_option("--real", real_dir, "real archive")->required();
    eval_cmd->add_option("--gen", gen_dir, "generated archive")->required();
    eval_cmd->add_option("--out", out_dir, "metric csv (stdout when omitted)");
    eval_cmd->add_option("--seed", seed, "evaluation seed");
    eval_cmd->add_option("--real-features", real_features, "precomputed real feature file");
    eval_cmd->add_option("--gen-features", gen_features, "precomputed generated feature file");
    eval_cmd->add_flag("--no-baseline", no_baseline, "skip the real-vs-real baseline row");
    eval_cmd->add_option("--set", overrides, "override metric config fields");

    auto* sweep_cmd = app.add_subcommand("sweep", "run the target x Lp grid and report");
    add_config(sweep_cmd, true);
    sweep_cmd->add_option("--archive", archive_flag, "training archive (overrides config)");
    sweep_cmd->add_option("--out", out_dir, "sweep output directory")->required();

    auto* report_cmd = app.add_subcommand("report", "regenerate the report from per-replica rows");
    report_cmd->add_option("--cells", cells_csv, "per_replica.csv from a sweep")->required();
    report_cmd->add_option("--out", out_dir, "report output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_toy->parsed()) return cmd_generate_toy(config_path, overrides, out_dir);
        if (ingest->parsed())
            return cmd_ingest(input_dir, meta_path, out_dir, height, width, n_z, lo_pct, hi_pct);
        if (train->parsed())
            return cmd_train(config_path, overrides, archive_flag, out_dir, resume,
                             session_epochs);
        if (sample_cmd->parsed())
            return cmd_sample(config_path, overrides, checkpoint, token_spec, n_per_token, seed,
                              out_dir, use_live);
        if (eval_cmd->parsed())
            return cmd_evaluate(real_dir, gen_dir, out_dir, seed, real_features, gen_features,
                                !no_baseline, overrides);
        if (sweep_cmd->parsed()) return cmd_sweep(config_path, overrides, archive_flag, out_dir);
        if (report_cmd->parsed()) return cmd_report(cells_csv, out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.is_validation() ? 1 : 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
