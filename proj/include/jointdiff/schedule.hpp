#ifndef JOINTDIFF_SCHEDULE_HPP
#define JOINTDIFF_SCHEDULE_HPP

#include <cmath>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"

namespace jointdiff {

// Cosine noise schedule over T discrete timesteps. Timesteps are 1-based;
// alpha_bar[0] == 1 is the terminal boundary used by the sampler.
struct NoiseSchedule {
    int T = 0;
    double s = 0.0;
    std::vector<double> alpha_bar; // length T+1, alpha_bar[0] = 1
    std::vector<double> alpha;     // length T+1, index 0 unused
    std::vector<double> beta;      // length T+1, index 0 unused

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw range_error("timestep t=" + std::to_string(t) +
                              " outside [1, " + std::to_string(T) + "]");
    }
};

inline NoiseSchedule cosine_schedule(int T, double s = 0.008) {
    if (T < 1) throw config_error("cosine_schedule: T must be >= 1");
    if (s < 0.0) throw config_error("cosine_schedule: offset s must be >= 0");

    auto f = [&](double t) {
        const double x = ((t / T + s) / (1.0 + s)) * M_PI / 2.0;
        const double c = std::cos(x);
        return c * c;
    };

    NoiseSchedule sched;
    sched.T = T;
    sched.s = s;
    sched.alpha_bar.resize(std::size_t(T) + 1);
    sched.alpha.resize(std::size_t(T) + 1, 0.0);
    sched.beta.resize(std::size_t(T) + 1, 0.0);

    const double f0 = f(0.0);
    sched.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        double ab = f(double(t)) / f0;
        double b = 1.0 - ab / sched.alpha_bar[t - 1];
        if (b > 0.999) b = 0.999; // clip extreme late-schedule steps
        sched.beta[t] = b;
        sched.alpha[t] = 1.0 - b;
        sched.alpha_bar[t] = sched.alpha_bar[t - 1] * sched.alpha[t];
    }

    for (int t = 1; t <= T; ++t) {
        if (!(sched.alpha_bar[t] < sched.alpha_bar[t - 1]))
            throw numeric_error("cosine_schedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
        if (!(sched.beta[t] > 0.0 && sched.beta[t] <= 0.999))
            throw numeric_error("cosine_schedule: beta out of (0, 0.999] at t=" + std::to_string(t));
    }
    if (!(sched.alpha_bar[T] > 0.0))
        throw numeric_error("cosine_schedule: alpha_bar[T] must stay positive");
    return sched;
}

} // namespace jointdiff

#endif // JOINTDIFF_SCHEDULE_HPP
