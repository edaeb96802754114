#ifndef JOINTDIFF_CONFIG_HPP
#define JOINTDIFF_CONFIG_HPP

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "jointdiff/data.hpp"
#include "jointdiff/diffusion.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/sampler.hpp"
#include "jointdiff/trainer.hpp"
#include "jointdiff/unet.hpp"

namespace jointdiff {

using json = nlohmann::json;

struct MetricConfig {
    int kid_subset_size = 50;
    int kid_n_subsets = 20;
    int perceptual_pairs = 200;
    int min_lesion_area = 5;
    int connectivity = 8;
    std::string extractor = "toy";
    std::uint64_t seed = 1;

    void validate() const {
        if (kid_subset_size < 2 || kid_n_subsets < 1 || perceptual_pairs < 1)
            throw config_error("metrics: counts must be positive (kid_subset_size >= 2)");
        if (connectivity != 4 && connectivity != 8)
            throw config_error("metrics.connectivity: must be 4 or 8");
        if (min_lesion_area < 1) throw config_error("metrics.min_lesion_area: must be >= 1");
    }
};

struct SweepConfig {
    std::vector<PredictionTarget> targets{PredictionTarget::Epsilon, PredictionTarget::Velocity,
                                          PredictionTarget::X0};
    std::vector<double> p_values{1.5, 2.0, 2.5};
    int replicas = 3;
    int jobs = 1;
    int n_eval_samples = 64;
    std::string token_distribution = "empirical"; // or "uniform"

    void validate() const {
        if (targets.empty() || p_values.empty())
            throw config_error("sweep: targets and p_values must be non-empty");
        if (replicas < 1 || jobs < 1 || n_eval_samples < 2)
            throw config_error("sweep: replicas/jobs/n_eval_samples out of range");
        if (token_distribution != "empirical" && token_distribution != "uniform")
            throw config_error("sweep.token_distribution: must be empirical or uniform");
    }
};

struct ExperimentConfig {
    std::string data_source = "toy"; // "toy" or "archive"
    std::string archive_path;
    ToyConfig toy;
    UNetConfig unet = UNetConfig::desk();
    TrainConfig train;
    SamplerConfig sampler;
    MetricConfig metrics;
    SweepConfig sweep;
    std::uint64_t split_seed = 1; // shared across sweep cells

    void validate() const {
        if (data_source != "toy" && data_source != "archive")
            throw config_error("data.source: must be toy or archive");
        if (data_source == "archive" && archive_path.empty())
            throw config_error("data.archive: path required when source is archive");
        unet.validate();
        train.validate();
        sampler.validate(train.timesteps);
        metrics.validate();
        sweep.validate();
        if (data_source == "toy" && (toy.h != toy.w || toy.h != unet.image_size))
            throw config_error("unet.image_size must match the (square) toy slice size");
    }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization with unknown-key rejection

namespace detail {

inline void check_keys(const json& j, const std::string& section,
                       const std::set<std::string>& allowed) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw config_error("unknown config field: " + section + "." + key);
}

template <class T>
void get_to_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace detail

inline json to_json(const ExperimentConfig& cfg) {
    json j;
    j["data"]["source"] = cfg.data_source;
    j["data"]["archive"] = cfg.archive_path;
    j["data"]["toy"] = {{"n_subjects", cfg.toy.n_subjects},
                        {"slices_per_subject", cfg.toy.slices_per_subject},
                        {"h", cfg.toy.h},
                        {"w", cfg.toy.w},
                        {"lesion_prob", cfg.toy.lesion_prob},
                        {"n_z", cfg.toy.n_z},
                        {"seed", cfg.toy.seed}};
    j["split_seed"] = cfg.split_seed;
    j["unet"] = {{"image_size", cfg.unet.image_size},
                 {"level_channels", cfg.unet.level_channels},
                 {"norm_groups", cfg.unet.norm_groups},
                 {"attention_levels", cfg.unet.attention_levels},
                 {"attention_head_channels", cfg.unet.attention_head_channels},
                 {"embed_dim", cfg.unet.embed_dim},
                 {"embed_pe_dim", cfg.unet.embed_pe_dim}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"lr_floor", cfg.train.lr_floor},
                  {"clip_norm", cfg.train.clip_norm},
                  {"ema_decay", cfg.train.ema_decay},
                  {"patience", cfg.train.patience},
                  {"batch_size", cfg.train.batch_size},
                  {"max_epochs", cfg.train.max_epochs},
                  {"seed", cfg.train.seed},
                  {"target", target_name(cfg.train.target)},
                  {"loss_p", cfg.train.loss.p},
                  {"val_fraction", cfg.train.val_fraction},
                  {"threads", cfg.train.threads},
                  {"timesteps", cfg.train.timesteps},
                  {"schedule_s", cfg.train.schedule_s},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"adam_eps", cfg.train.adam_eps},
                  {"weight_decay", cfg.train.weight_decay}};
    j["sampler"] = {{"steps", cfg.sampler.steps}, {"eta", cfg.sampler.eta}};
    j["metrics"] = {{"kid_subset_size", cfg.metrics.kid_subset_size},
                    {"kid_n_subsets", cfg.metrics.kid_n_subsets},
                    {"perceptual_pairs", cfg.metrics.perceptual_pairs},
                    {"min_lesion_area", cfg.metrics.min_lesion_area},
                    {"connectivity", cfg.metrics.connectivity},
                    {"extractor", cfg.metrics.extractor},
                    {"seed", cfg.metrics.seed}};
    json targets = json::array();
    for (auto t : cfg.sweep.targets) targets.push_back(target_name(t));
    j["sweep"] = {{"targets", targets},
                  {"p_values", cfg.sweep.p_values},
                  {"replicas", cfg.sweep.replicas},
                  {"jobs", cfg.sweep.jobs},
                  {"n_eval_samples", cfg.sweep.n_eval_samples},
                  {"token_distribution", cfg.sweep.token_distribution}};
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    detail::check_keys(j, "", {"data", "split_seed", "unet", "train", "sampler", "metrics", "sweep"});

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d, "data", {"source", "archive", "toy"});
        detail::get_to_if(d, "source", cfg.data_source);
        detail::get_to_if(d, "archive", cfg.archive_path);
        if (d.contains("toy")) {
            const auto& t = d.at("toy");
            detail::check_keys(t, "data.toy",
                               {"n_subjects", "slices_per_subject", "h", "w", "lesion_prob",
                                "n_z", "seed"});
            detail::get_to_if(t, "n_subjects", cfg.toy.n_subjects);
            detail::get_to_if(t, "slices_per_subject", cfg.toy.slices_per_subject);
            detail::get_to_if(t, "h", cfg.toy.h);
            detail::get_to_if(t, "w", cfg.toy.w);
            detail::get_to_if(t, "lesion_prob", cfg.toy.lesion_prob);
            detail::get_to_if(t, "n_z", cfg.toy.n_z);
            detail::get_to_if(t, "seed", cfg.toy.seed);
        }
    }
    detail::get_to_if(j, "split_seed", cfg.split_seed);

    if (j.contains("unet")) {
        const auto& u = j.at("unet");
        detail::check_keys(u, "unet",
                           {"image_size", "level_channels", "norm_groups", "attention_levels",
                            "attention_head_channels", "embed_dim", "embed_pe_dim"});
        detail::get_to_if(u, "image_size", cfg.unet.image_size);
        detail::get_to_if(u, "level_channels", cfg.unet.level_channels);
        detail::get_to_if(u, "norm_groups", cfg.unet.norm_groups);
        detail::get_to_if(u, "attention_levels", cfg.unet.attention_levels);
        detail::get_to_if(u, "attention_head_channels", cfg.unet.attention_head_channels);
        detail::get_to_if(u, "embed_dim", cfg.unet.embed_dim);
        detail::get_to_if(u, "embed_pe_dim", cfg.unet.embed_pe_dim);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, "train",
                           {"lr", "lr_floor", "clip_norm", "ema_decay", "patience", "batch_size",
                            "max_epochs", "seed", "target", "loss_p", "val_fraction", "threads",
                            "timesteps", "schedule_s", "beta1", "beta2", "adam_eps",
                            "weight_decay"});
        detail::get_to_if(t, "lr", cfg.train.lr);
        detail::get_to_if(t, "lr_floor", cfg.train.lr_floor);
        detail::get_to_if(t, "clip_norm", cfg.train.clip_norm);
        detail::get_to_if(t, "ema_decay", cfg.train.ema_decay);
        detail::get_to_if(t, "patience", cfg.train.patience);
        detail::get_to_if(t, "batch_size", cfg.train.batch_size);
        detail::get_to_if(t, "max_epochs", cfg.train.max_epochs);
        detail::get_to_if(t, "seed", cfg.train.seed);
        if (t.contains("target")) cfg.train.target = target_from_name(t.at("target"));
        detail::get_to_if(t, "loss_p", cfg.train.loss.p);
        detail::get_to_if(t, "val_fraction", cfg.train.val_fraction);
        detail::get_to_if(t, "threads", cfg.train.threads);
        detail::get_to_if(t, "timesteps", cfg.train.timesteps);
        detail::get_to_if(t, "schedule_s", cfg.train.schedule_s);
        detail::get_to_if(t, "beta1", cfg.train.beta1);
        detail::get_to_if(t, "beta2", cfg.train.beta2);
        detail::get_to_if(t, "adam_eps", cfg.train.adam_eps);
        detail::get_to_if(t, "weight_decay", cfg.train.weight_decay);
    }

    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        detail::check_keys(s, "sampler", {"steps", "eta"});
        detail::get_to_if(s, "steps", cfg.sampler.steps);
        detail::get_to_if(s, "eta", cfg.sampler.eta);
    }

    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        detail::check_keys(m, "metrics",
                           {"kid_subset_size", "kid_n_subsets", "perceptual_pairs",
                            "min_lesion_area", "connectivity", "extractor", "seed"});
        detail::get_to_if(m, "kid_subset_size", cfg.metrics.kid_subset_size);
        detail::get_to_if(m, "kid_n_subsets", cfg.metrics.kid_n_subsets);
        detail::get_to_if(m, "perceptual_pairs", cfg.metrics.perceptual_pairs);
        detail::get_to_if(m, "min_lesion_area", cfg.metrics.min_lesion_area);
        detail::get_to_if(m, "connectivity", cfg.metrics.connectivity);
        detail::get_to_if(m, "extractor", cfg.metrics.extractor);
        detail::get_to_if(m, "seed", cfg.metrics.seed);
    }

    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        detail::check_keys(s, "sweep",
                           {"targets", "p_values", "replicas", "jobs", "n_eval_samples",
                            "token_distribution"});
        if (s.contains("targets")) {
            cfg.sweep.targets.clear();
            for (const auto& t : s.at("targets"))
                cfg.sweep.targets.push_back(target_from_name(t.get<std::string>()));
        }
        detail::get_to_if(s, "p_values", cfg.sweep.p_values);
        detail::get_to_if(s, "replicas", cfg.sweep.replicas);
        detail::get_to_if(s, "jobs", cfg.sweep.jobs);
        detail::get_to_if(s, "n_eval_samples", cfg.sweep.n_eval_samples);
        detail::get_to_if(s, "token_distribution", cfg.sweep.token_distribution);
    }

    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("config file not found: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw parse_error("config " + path + ": " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const json::exception& e) {
        throw config_error("config " + path + ": " + e.what());
    }
}

// canonical serialization (nlohmann::json orders keys) and its hash; the hash
// goes into checkpoints so resumes can verify config identity
inline std::string canonical_config_string(const ExperimentConfig& cfg) {
    return to_json(cfg).dump(2);
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string s = canonical_config_string(cfg);
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= std::uint8_t(c);
        h *= 1099511628211ULL;
    }
    return h;
}

inline void write_resolved_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write resolved config: " + path);
    out << canonical_config_string(cfg) << "\n";
}

// dotted-path override, e.g. "train.lr=2e-4" or "sweep.replicas=2"
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw usage_error("override must look like section.key=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    json* node = &j;
    std::size_t pos = 0;
    while (true) {
        const auto dot = path.find('.', pos);
        const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (key.empty()) throw usage_error("empty key in override: " + assignment);
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

} // namespace jointdiff

#endif // JOINTDIFF_CONFIG_HPP
