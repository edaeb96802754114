#ifndef JOINTDIFF_TRAINER_HPP
#define JOINTDIFF_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "jointdiff/checkpoint.hpp"
#include "jointdiff/data.hpp"
#include "jointdiff/diffusion.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/rng.hpp"
#include "jointdiff/schedule.hpp"
#include "jointdiff/unet.hpp"

namespace jointdiff {

struct TrainConfig {
    double lr = 1e-4;
    double lr_floor = 1e-6;
    double clip_norm = 1.0;
    double ema_decay = 0.999;
    int patience = 25;
    int batch_size = 32;
    int max_epochs = 100;
    std::uint64_t seed = 1;
    std::uint64_t split_seed = 0; // 0: fall back to seed; sweeps share one split
    PredictionTarget target = PredictionTarget::X0;
    LpConfig loss{2.0};
    double val_fraction = 0.25;
    int threads = 1;

    // diffusion schedule
    int timesteps = 1000;
    double schedule_s = 0.008;

    // AdamW
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (!(lr > 0.0) || !(lr_floor >= 0.0) || lr_floor > lr)
            throw config_error("TrainConfig: need 0 <= lr_floor <= lr, lr > 0");
        if (!(clip_norm > 0.0)) throw config_error("TrainConfig: clip_norm must be > 0");
        if (!(ema_decay >= 0.0 && ema_decay <= 1.0))
            throw config_error("TrainConfig: ema_decay must be in [0, 1]");
        if (patience < 1) throw config_error("TrainConfig: patience must be >= 1");
        if (batch_size < 1 || max_epochs < 1 || threads < 1 || timesteps < 1)
            throw config_error("TrainConfig: counts must be positive");
        if (!(loss.p > 0.0)) throw config_error("TrainConfig: loss exponent must be > 0");
        if (!(val_fraction > 0.0 && val_fraction < 1.0))
            throw config_error("TrainConfig: val_fraction must be in (0, 1)");
    }
};

// ---------------------------------------------------------------------------
// cosine learning-rate annealing

inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0,
                        double lr_floor) {
    if (total_steps == 0 || step >= total_steps) return lr_floor;
    const double phase = M_PI * double(step) / double(total_steps);
    return lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + std::cos(phase));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay; moments are stored float32 so the
// optimizer round-trips through checkpoints bit-exactly

class AdamW {
public:
    AdamW() = default;
    AdamW(const ParamStore& params, const TrainConfig& cfg)
        : m_(params.clone()), v_(params.clone()), cfg_(cfg) {
        zero_store(m_);
        zero_store(v_);
    }

    std::uint64_t step_count() const { return step_; }
    void set_step_count(std::uint64_t s) { step_ = s; }
    ParamStore& moment1() { return m_; }
    ParamStore& moment2() { return v_; }
    const ParamStore& moment1() const { return m_; }
    const ParamStore& moment2() const { return v_; }

    void apply(ParamStore& params, const GradStore& grads, double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (std::size_t id = 0; id < params.count(); ++id) {
            auto& p = params.at(id).data;
            auto& m = m_.at(id).data;
            auto& v = v_.at(id).data;
            const auto& g = grads.at(id);
            for (std::size_t j = 0; j < p.size(); ++j) {
                const double gj = g[j];
                const double mj = cfg_.beta1 * double(m[j]) + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * double(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
                m[j] = float(mj);
                v[j] = float(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                const double pj = double(p[j]);
                p[j] = float(pj - lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) +
                                        cfg_.weight_decay * pj));
            }
        }
    }

private:
    static void zero_store(ParamStore& s) {
        for (std::size_t i = 0; i < s.count(); ++i)
            std::fill(s.at(i).data.begin(), s.at(i).data.end(), 0.0f);
    }

    ParamStore m_, v_;
    TrainConfig cfg_;
    std::uint64_t step_ = 0;
};

// scale gradients so the global norm is at most clip; returns the pre-clip norm
inline double clip_global_norm(GradStore& grads, double clip) {
    const double norm = std::sqrt(grads.squared_norm());
    if (std::isfinite(clip) && norm > clip && norm > 0.0) grads.scale(clip / norm);
    return norm;
}

// ---------------------------------------------------------------------------
// EMA of weights

struct EMAState {
    ParamStore shadow;
    double decay = 0.999;
};

inline EMAState make_ema(const ParamStore& params, double decay) {
    return EMAState{params.clone(), decay};
}

inline void ema_update(EMAState& ema, const ParamStore& params) {
    if (!ema.shadow.same_layout(params)) throw shape_error("ema_update: layout mismatch");
    for (std::size_t id = 0; id < params.count(); ++id) {
        auto& s = ema.shadow.at(id).data;
        const auto& p = params.at(id).data;
        for (std::size_t j = 0; j < s.size(); ++j)
            s[j] = float(ema.decay * double(s[j]) + (1.0 - ema.decay) * double(p[j]));
    }
}

// ---------------------------------------------------------------------------
// early stopping

struct EarlyStopDecision {
    bool stop = false;
    std::size_t best_epoch = 0;
    double best_value = std::numeric_limits<double>::infinity();
};

// stop when no new minimum appeared within the last `patience` epochs
inline EarlyStopDecision early_stop_check(const std::vector<double>& history, int patience) {
    if (history.empty()) throw config_error("early_stop_check: empty history");
    EarlyStopDecision d;
    for (std::size_t i = 0; i < history.size(); ++i) {
        if (history[i] < d.best_value) {
            d.best_value = history[i];
            d.best_epoch = i;
        }
    }
    d.stop = (history.size() - 1 - d.best_epoch) >= std::size_t(patience);
    return d;
}

// ---------------------------------------------------------------------------
// subject-level oversampling

// per-subject draw weights balancing lesion vs non-lesion draw mass
inline std::vector<double> oversample_weights(
    const std::vector<std::pair<std::string, bool>>& subjects) {
    std::size_t lesion = 0, control = 0;
    for (const auto& [id, has] : subjects) (has ? lesion : control) += 1;
    if (lesion == 0 || control == 0)
        throw config_error("oversample_weights: need at least one subject of each class");
    std::vector<double> w(subjects.size());
    for (std::size_t i = 0; i < subjects.size(); ++i)
        w[i] = subjects[i].second ? 0.5 / double(lesion) : 0.5 / double(control);
    return w;
}

// ---------------------------------------------------------------------------
// one optimization step over an explicit batch

struct TrainStepResult {
    double loss = 0.0;
    double grad_norm = 0.0; // before clipping
    std::vector<int> t_values;
};

namespace detail {

struct SampleWork {
    const JointSample* sample;
    ConditionToken token;
    int t;
    Tensor eps;
};

} // namespace detail

inline TrainStepResult train_step(DenoiserModel& model, AdamW& opt, EMAState& ema,
                                  const std::vector<const JointSample*>& batch,
                                  const std::vector<ConditionToken>& tokens,
                                  const NoiseSchedule& sched, const TrainConfig& cfg, Rng& rng,
                                  double lr, std::uint64_t step_index) {
    if (batch.empty() || batch.size() != tokens.size())
        throw config_error("train_step: batch and tokens must be non-empty and aligned");

    // draw all stochastic inputs sequentially so the rng stream is identical
    // for any thread count
    std::vector<detail::SampleWork> work(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        work[i].sample = batch[i];
        work[i].token = tokens[i];
        work[i].t = int(rng.uniform_int(1, sched.T));
        work[i].eps = Tensor::plane(batch[i]->h(), batch[i]->w());
        rng.fill_normal(work[i].eps.data(), work[i].eps.size());
    }

    const int n_threads = std::max(1, std::min<int>(cfg.threads, int(batch.size())));
    std::vector<GradStore> partial;
    partial.reserve(std::size_t(n_threads));
    for (int k = 0; k < n_threads; ++k) partial.emplace_back(model.params());
    std::vector<double> losses(batch.size(), 0.0);
    std::vector<std::string> failures(static_cast<std::size_t>(n_threads));

    auto run_range = [&](int k, std::size_t lo, std::size_t hi) {
        try {
            for (std::size_t i = lo; i < hi; ++i) {
                const auto& w = work[i];
                Tensor x0 = w.sample->stacked();
                Tensor xt = forward_diffuse(x0, w.t, w.eps, sched);
                Tensor target = compute_target(x0, w.eps, w.t, sched, cfg.target);
                DenoiserModel::Cache cache;
                Tensor pred = model.forward(xt, w.t, sched.T, w.token, cache);
                losses[i] = lp_loss(pred, target, cfg.loss);
                Tensor gout = lp_loss_grad(pred, target, cfg.loss, 1.0 / double(batch.size()));
                model.backward(partial[std::size_t(k)], cache, gout);
            }
        } catch (const std::exception& e) {
            failures[std::size_t(k)] = e.what();
        }
    };

    if (n_threads == 1) {
        run_range(0, 0, batch.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (batch.size() + n_threads - 1) / n_threads;
        for (int k = 0; k < n_threads; ++k) {
            const std::size_t lo = std::size_t(k) * chunk;
            const std::size_t hi = std::min(batch.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, k, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    for (const auto& f : failures)
        if (!f.empty()) throw numeric_error("train_step " + std::to_string(step_index) + ": " + f);

    TrainStepResult res;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        res.loss += losses[i];
        res.t_values.push_back(work[i].t);
    }
    res.loss /= double(batch.size());
    if (!std::isfinite(res.loss)) {
        std::string ts;
        for (int t : res.t_values) ts += std::to_string(t) + " ";
        throw numeric_error("train_step " + std::to_string(step_index) +
                            ": non-finite loss; t values: " + ts);
    }

    GradStore& grads = partial[0];
    for (int k = 1; k < n_threads; ++k) grads.add(partial[std::size_t(k)]);
    if (!grads.all_finite())
        throw numeric_error("train_step " + std::to_string(step_index) + ": non-finite gradients");

    res.grad_norm = clip_global_norm(grads, cfg.clip_norm);
    opt.apply(model.params(), grads, lr);
    ema_update(ema, model.params());
    return res;
}

// ---------------------------------------------------------------------------
// the full training run over an archive

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    bool ema_applied = true;

    std::string line() const {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%d\t%.17g\t%.17g\t%.17g\t%d", epoch, train_loss,
                      val_loss, lr, ema_applied ? 1 : 0);
        return buf;
    }
};

struct TrainResult {
    int epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<EpochLog> log;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

class Trainer {
public:
    Trainer(DenoiserModel& model, const TrainConfig& cfg, std::uint64_t config_hash = 0)
        : model_(model), cfg_(cfg), config_hash_(config_hash) {
        cfg.validate();
        sched_ = cosine_schedule(cfg.timesteps, cfg.schedule_s);
    }

    const NoiseSchedule& schedule() const { return sched_; }

    // `session_epoch_cap` bounds how many epochs this invocation may run
    // (process-restart semantics for resume tests and budgeted sessions); the
    // LR schedule always spans cfg.max_epochs
    TrainResult run(const SliceArchive& archive, const std::string& run_dir,
                    const std::string& resume_from = "", int session_epoch_cap = -1) {
        namespace fs = std::filesystem;
        fs::create_directories(run_dir);

        load_data(archive);

        AdamW opt(model_.params(), cfg_);
        EMAState ema = make_ema(model_.params(), cfg_.ema_decay);
        Rng rng(mix_seed(cfg_.seed, 0x7261u));

        int start_epoch = 0;
        std::uint64_t global_step = 0;
        std::vector<double> val_history;
        ParamStore best_params = model_.params().clone();
        ParamStore best_ema = ema.shadow.clone();
        std::size_t best_epoch = 0;
        double best_val = std::numeric_limits<double>::infinity();
        std::vector<EpochLog> log;

        if (!resume_from.empty()) {
            auto ck = Checkpoint::load(resume_from);
            if (ck.config_hash != config_hash_)
                throw config_error("resume checkpoint was produced by a different config");
            model_.params() = ck.extract_store("params", model_.params());
            ema.shadow = ck.extract_store("ema", ema.shadow);
            opt.moment1() = ck.extract_store("adam_m", opt.moment1());
            opt.moment2() = ck.extract_store("adam_v", opt.moment2());
            best_params = ck.extract_store("best", best_params);
            best_ema = ck.extract_store("best_ema", best_ema);
            opt.set_step_count(ck.step);
            global_step = ck.step;
            start_epoch = int(ck.epoch);
            best_epoch = ck.best_epoch;
            best_val = ck.best_val;
            rng = Rng::from_state(ck.rng_state);
            val_history = read_val_history(run_dir, start_epoch, log);
            // drop any log line past the checkpoint (crash between log append
            // and checkpoint write)
            std::ofstream trunc(run_dir + "/metrics.tsv");
            for (const auto& el : log) trunc << el.line() << "\n";
        } else {
            Rng init_rng(mix_seed(cfg_.seed, 0x696eu));
            model_.init_weights(init_rng);
            ema = make_ema(model_.params(), cfg_.ema_decay);
            best_params = model_.params().clone();
            best_ema = ema.shadow.clone();
            // truncate any stale log
            std::ofstream(run_dir + "/metrics.tsv").close();
        }

        const std::size_t steps_per_epoch =
            (train_idx_.size() + std::size_t(cfg_.batch_size) - 1) / std::size_t(cfg_.batch_size);
        const std::uint64_t total_steps = std::uint64_t(cfg_.max_epochs) * steps_per_epoch;

        TrainResult result;
        result.log = log;

        const int epoch_end = session_epoch_cap < 0
                                  ? cfg_.max_epochs
                                  : std::min(cfg_.max_epochs, start_epoch + session_epoch_cap);
        for (int epoch = start_epoch; epoch < epoch_end; ++epoch) {
            double train_loss = 0.0;
            double last_lr = cfg_.lr;
            for (std::size_t s = 0; s < steps_per_epoch; ++s) {
                last_lr = cosine_lr(global_step, total_steps, cfg_.lr, cfg_.lr_floor);
                auto [batch, tokens] = draw_batch(rng);
                auto step_res =
                    train_step(model_, opt, ema, batch, tokens, sched_, cfg_, rng, last_lr,
                               global_step);
                train_loss += step_res.loss;
                ++global_step;
            }
            train_loss /= double(steps_per_epoch);

            const double val_loss = validation_loss(epoch);
            val_history.push_back(val_loss);

            EpochLog el;
            el.epoch = epoch;
            el.train_loss = train_loss;
            el.val_loss = val_loss;
            el.lr = last_lr;
            result.log.push_back(el);
            append_log(run_dir, el);

            if (val_loss < best_val) {
                best_val = val_loss;
                best_epoch = std::size_t(epoch);
                best_params = model_.params().clone();
                best_ema = ema.shadow.clone();
            }

            // rolling checkpoint carries everything a resume needs
            Checkpoint ck;
            ck.config_hash = config_hash_;
            ck.epoch = std::uint64_t(epoch) + 1;
            ck.step = global_step;
            ck.best_epoch = best_epoch;
            ck.best_val = best_val;
            ck.rng_state = rng.state();
            ck.add_store("params", model_.params());
            ck.add_store("ema", ema.shadow);
            ck.add_store("adam_m", opt.moment1());
            ck.add_store("adam_v", opt.moment2());
            ck.add_store("best", best_params);
            ck.add_store("best_ema", best_ema);
            ck.save(run_dir + "/last.ckpt");

            result.epochs_run = epoch + 1;
            auto decision = early_stop_check(val_history, cfg_.patience);
            if (decision.stop) break;
        }

        // best-epoch checkpoint (live + EMA)
        Checkpoint best_ck;
        best_ck.config_hash = config_hash_;
        best_ck.epoch = best_epoch;
        best_ck.step = global_step;
        best_ck.best_epoch = best_epoch;
        best_ck.best_val = best_val;
        best_ck.rng_state = rng.state();
        best_ck.add_store("params", best_params);
        best_ck.add_store("ema", best_ema);
        best_ck.save(run_dir + "/best.ckpt");

        result.best_epoch = best_epoch;
        result.best_val = best_val;
        result.best_checkpoint = run_dir + "/best.ckpt";
        result.last_checkpoint = run_dir + "/last.ckpt";
        return result;
    }

private:
    void load_data(const SliceArchive& archive) {
        if (archive.height != model_.config().image_size ||
            archive.width != model_.config().image_size)
            throw config_error("archive slice size " + std::to_string(archive.height) + "x" +
                               std::to_string(archive.width) + " does not match model image_size " +
                               std::to_string(model_.config().image_size));

        samples_.clear();
        tokens_.clear();
        samples_.reserve(archive.records.size());
        for (std::size_t i = 0; i < archive.records.size(); ++i) {
            samples_.push_back(archive.load_joint(i));
            const auto& r = archive.records[i];
            tokens_.push_back(make_token(r.z_bin, r.pathology, archive.n_z));
        }

        auto split = subject_split(archive.records, cfg_.val_fraction,
                                   cfg_.split_seed ? cfg_.split_seed : cfg_.seed);
        train_idx_ = split.train;
        val_idx_ = split.val;

        // subject-level oversampling on the training split only
        std::map<std::string, bool> subject_lesion;
        std::map<std::string, int> subject_slices;
        for (std::size_t i : train_idx_) {
            const auto& r = archive.records[i];
            subject_lesion[r.subject_id] =
                subject_lesion[r.subject_id] || (r.pathology == 1);
            subject_slices[r.subject_id] += 1;
        }
        std::vector<std::pair<std::string, bool>> subjects(subject_lesion.begin(),
                                                           subject_lesion.end());
        const auto weights = oversample_weights(subjects);
        std::map<std::string, double> subject_weight;
        for (std::size_t i = 0; i < subjects.size(); ++i)
            subject_weight[subjects[i].first] = weights[i];

        // per-slice weight: subject mass spread over its slices
        train_cdf_.clear();
        double acc = 0.0;
        for (std::size_t i : train_idx_) {
            const auto& r = archive.records[i];
            acc += subject_weight[r.subject_id] / double(subject_slices[r.subject_id]);
            train_cdf_.push_back(acc);
        }
        for (auto& c : train_cdf_) c /= acc;
    }

    std::pair<std::vector<const JointSample*>, std::vector<ConditionToken>> draw_batch(Rng& rng) {
        std::vector<const JointSample*> batch;
        std::vector<ConditionToken> tokens;
        const int n = std::min<int>(cfg_.batch_size, int(train_idx_.size()));
        for (int i = 0; i < n; ++i) {
            const double u = rng.uniform01();
            const std::size_t pos = std::size_t(
                std::lower_bound(train_cdf_.begin(), train_cdf_.end(), u) - train_cdf_.begin());
            const std::size_t idx = train_idx_[std::min(pos, train_idx_.size() - 1)];
            batch.push_back(&samples_[idx]);
            tokens.push_back(tokens_[idx]);
        }
        return {batch, tokens};
    }

    // full deterministic pass over the validation split; the (t, eps) draw is
    // a fixed function of (seed, epoch)
    double validation_loss(int epoch) {
        Rng vrng(mix_seed(cfg_.seed ^ 0x76616cull, std::uint64_t(epoch)));
        std::vector<int> ts(val_idx_.size());
        std::vector<Tensor> epss;
        epss.reserve(val_idx_.size());
        for (std::size_t i = 0; i < val_idx_.size(); ++i) {
            ts[i] = int(vrng.uniform_int(1, sched_.T));
            Tensor eps = Tensor::plane(model_.config().image_size, model_.config().image_size);
            vrng.fill_normal(eps.data(), eps.size());
            epss.push_back(std::move(eps));
        }

        std::vector<double> losses(val_idx_.size(), 0.0);
        const int n_threads = std::max(1, std::min<int>(cfg_.threads, int(val_idx_.size())));
        auto run_range = [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) {
                const std::size_t idx = val_idx_[i];
                Tensor x0 = samples_[idx].stacked();
                Tensor xt = forward_diffuse(x0, ts[i], epss[i], sched_);
                Tensor target = compute_target(x0, epss[i], ts[i], sched_, cfg_.target);
                DenoiserModel::Cache cache;
                Tensor pred = model_.forward(xt, ts[i], sched_.T, tokens_[idx], cache);
                losses[i] = lp_loss(pred, target, cfg_.loss);
            }
        };
        if (n_threads == 1) {
            run_range(0, val_idx_.size());
        } else {
            std::vector<std::thread> pool;
            const std::size_t chunk = (val_idx_.size() + n_threads - 1) / n_threads;
            for (int k = 0; k < n_threads; ++k) {
                const std::size_t lo = std::size_t(k) * chunk;
                const std::size_t hi = std::min(val_idx_.size(), lo + chunk);
                if (lo >= hi) break;
                pool.emplace_back(run_range, lo, hi);
            }
            for (auto& th : pool) th.join();
        }
        double acc = 0.0;
        for (double l : losses) acc += l;
        return acc / double(losses.size());
    }

    static void append_log(const std::string& run_dir, const EpochLog& el) {
        std::ofstream out(run_dir + "/metrics.tsv", std::ios::app);
        if (!out) throw io_error("cannot append to metrics log in " + run_dir);
        out << el.line() << "\n";
    }

    // on resume, replay the persisted log to rebuild the early-stop history
    static std::vector<double> read_val_history(const std::string& run_dir, int epochs,
                                                std::vector<EpochLog>& log) {
        std::vector<double> hist;
        std::ifstream in(run_dir + "/metrics.tsv");
        if (!in) throw io_error("resume requires the existing metrics log in " + run_dir);
        std::string line;
        while (std::getline(in, line) && int(hist.size()) < epochs) {
            EpochLog el;
            int ema_flag = 1;
            if (std::sscanf(line.c_str(), "%d\t%lg\t%lg\t%lg\t%d", &el.epoch, &el.train_loss,
                            &el.val_loss, &el.lr, &ema_flag) != 5)
                throw parse_error("corrupt metrics log line: " + line);
            el.ema_applied = ema_flag != 0;
            hist.push_back(el.val_loss);
            log.push_back(el);
        }
        if (int(hist.size()) != epochs)
            throw integrity_error("metrics log shorter than checkpoint epoch count");
        return hist;
    }

    DenoiserModel& model_;
    TrainConfig cfg_;
    std::uint64_t config_hash_ = 0;
    NoiseSchedule sched_;

    std::vector<JointSample> samples_;
    std::vector<ConditionToken> tokens_;
    std::vector<std::size_t> train_idx_, val_idx_;
    std::vector<double> train_cdf_;
};

} // namespace jointdiff

#endif // JOINTDIFF_TRAINER_HPP
