#ifndef JOINTDIFF_STATS_HPP
#define JOINTDIFF_STATS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"

namespace jointdiff {

// ---------------------------------------------------------------------------
// special functions (df is tiny everywhere, so a local implementation of the
// regularized incomplete gamma is enough)

namespace detail {

inline double gamma_p_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < 500; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

// regularized upper incomplete gamma Q(a, x)
inline double gamma_q(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw range_error("gamma_q: invalid arguments");
    if (x == 0.0) return 1.0;
    if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
    return gamma_q_contfrac(a, x);
}

} // namespace detail

// survival function of the chi-square distribution with df degrees of freedom
inline double chi2_sf(double x, int df) {
    if (df < 1) throw range_error("chi2_sf: df must be >= 1");
    if (x <= 0.0) return 1.0;
    return detail::gamma_q(0.5 * df, 0.5 * x);
}

// two-sided normal p-value
inline double normal_two_sided_p(double z) {
    return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

// ---------------------------------------------------------------------------
// ranking

// mid-ranks (1-based); ties share the average of the ranks they span
inline std::vector<double> mid_ranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = 0.5 * double(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

// sum of (t^3 - t) over tie groups
inline double tie_cubic_sum(const std::vector<double>& values) {
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    double acc = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = double(j - i + 1);
        acc += t * t * t - t;
        i = j + 1;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Kruskal-Wallis H-test with tie correction

struct KruskalWallisResult {
    double H = 0.0;
    double p = 1.0;
    int df = 0;
    bool degenerate = false; // all values identical
};

inline KruskalWallisResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw config_error("kruskal_wallis: need >= 2 groups");
    std::vector<double> pooled;
    for (const auto& g : groups) {
        if (g.empty()) throw config_error("kruskal_wallis: empty group");
        pooled.insert(pooled.end(), g.begin(), g.end());
    }
    const double N = double(pooled.size());
    if (pooled.size() < 3) throw config_error("kruskal_wallis: need >= 3 total observations");

    const auto ranks = mid_ranks(pooled);
    KruskalWallisResult res;
    res.df = int(groups.size()) - 1;

    double stat = 0.0;
    std::size_t offset = 0;
    for (const auto& g : groups) {
        double rsum = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) rsum += ranks[offset + i];
        stat += rsum * rsum / double(g.size());
        offset += g.size();
    }
    double H = 12.0 / (N * (N + 1.0)) * stat - 3.0 * (N + 1.0);

    const double correction = 1.0 - tie_cubic_sum(pooled) / (N * N * N - N);
    if (correction <= 0.0) {
        res.H = 0.0;
        res.p = 1.0;
        res.degenerate = true;
        return res;
    }
    res.H = H / correction;
    res.p = chi2_sf(res.H, res.df);
    return res;
}

// ---------------------------------------------------------------------------
// Dunn's post-hoc test

struct DunnPair {
    std::size_t i = 0, j = 0;
    double z = 0.0;
    double p = 1.0;
};

inline std::vector<DunnPair> dunn_posthoc(const std::vector<std::vector<double>>& groups) {
    if (groups.size() < 2) throw config_error("dunn_posthoc: need >= 2 groups");
    std::vector<double> pooled;
    for (const auto& g : groups) {
        if (g.empty()) throw config_error("dunn_posthoc: empty group");
        pooled.insert(pooled.end(), g.begin(), g.end());
    }
    const double N = double(pooled.size());
    const auto ranks = mid_ranks(pooled);

    std::vector<double> mean_rank(groups.size(), 0.0);
    std::size_t offset = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        double rsum = 0.0;
        for (std::size_t i = 0; i < groups[gi].size(); ++i) rsum += ranks[offset + i];
        mean_rank[gi] = rsum / double(groups[gi].size());
        offset += groups[gi].size();
    }

    const double tie_term = tie_cubic_sum(pooled) / (12.0 * (N - 1.0));
    const double base_var = N * (N + 1.0) / 12.0 - tie_term;

    std::vector<DunnPair> pairs;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        for (std::size_t j = i + 1; j < groups.size(); ++j) {
            DunnPair pr;
            pr.i = i;
            pr.j = j;
            const double se = std::sqrt(base_var * (1.0 / double(groups[i].size()) +
                                                    1.0 / double(groups[j].size())));
            if (se > 0.0) {
                pr.z = (mean_rank[i] - mean_rank[j]) / se;
                pr.p = normal_two_sided_p(pr.z);
            } else {
                pr.z = 0.0;
                pr.p = 1.0;
            }
            pairs.push_back(pr);
        }
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Benjamini-Hochberg FDR (step-up)

struct BhResult {
    std::vector<double> adjusted;
    std::vector<bool> reject;
};

inline BhResult bh_fdr(const std::vector<double>& pvals, double alpha = 0.05) {
    const std::size_t m = pvals.size();
    for (double p : pvals)
        if (!(p >= 0.0 && p <= 1.0)) throw range_error("bh_fdr: p-values must be in [0,1]");

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });

    BhResult res;
    res.adjusted.assign(m, 1.0);
    res.reject.assign(m, false);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double candidate = double(m) * pvals[order[k]] / double(k + 1);
        running = std::min(running, std::min(candidate, 1.0));
        res.adjusted[order[k]] = running;
    }
    for (std::size_t i = 0; i < m; ++i) res.reject[i] = res.adjusted[i] <= alpha;
    return res;
}

// ---------------------------------------------------------------------------
// Friedman test (repeated measures; rows = replicas, columns = treatments)

struct FriedmanResult {
    double chi2 = 0.0;
    double p = 1.0;
    int df = 0;
    std::vector<double> mean_ranks; // per treatment
};

inline FriedmanResult friedman(const std::vector<std::vector<double>>& matrix) {
    if (matrix.size() < 2) throw config_error("friedman: need >= 2 replicas");
    const std::size_t k = matrix.front().size();
    if (k < 2) throw config_error("friedman: need >= 2 treatments");
    for (const auto& row : matrix)
        if (row.size() != k) throw shape_error("friedman: ragged matrix");

    const double n = double(matrix.size());
    std::vector<double> rank_sum(k, 0.0);
    for (const auto& row : matrix) {
        const auto ranks = mid_ranks(row);
        for (std::size_t j = 0; j < k; ++j) rank_sum[j] += ranks[j];
    }

    double stat = 0.0;
    for (double r : rank_sum) stat += r * r;
    FriedmanResult res;
    res.df = int(k) - 1;
    res.chi2 = 12.0 / (n * double(k) * double(k + 1)) * stat - 3.0 * n * double(k + 1);
    if (res.chi2 < 0.0 && res.chi2 > -1e-12) res.chi2 = 0.0;
    res.p = chi2_sf(res.chi2, res.df);
    res.mean_ranks.resize(k);
    for (std::size_t j = 0; j < k; ++j) res.mean_ranks[j] = rank_sum[j] / n;
    return res;
}

// ---------------------------------------------------------------------------
// Nemenyi post-hoc (critical difference on mean ranks)

struct NemenyiResult {
    double critical_difference = 0.0;
    std::vector<double> mean_ranks;
    std::vector<std::vector<bool>> significant; // k x k, |dR| >= CD
};

// q_alpha(0.05) for the Nemenyi test, k = 2..10: studentized-range upper
// quantiles at infinite df divided by sqrt(2), from standard published tables
inline double nemenyi_q05(int k) {
    static const double table[] = {1.960, 2.343, 2.569, 2.728, 2.850,
                                   2.949, 3.031, 3.102, 3.164};
    if (k < 2 || k > 10)
        throw config_error("nemenyi: embedded q table covers k in [2, 10], got k=" + std::to_string(k));
    return table[k - 2];
}

inline NemenyiResult nemenyi(const std::vector<std::vector<double>>& matrix) {
    const auto fr = friedman(matrix);
    const int k = int(fr.mean_ranks.size());
    const double n = double(matrix.size());

    NemenyiResult res;
    res.mean_ranks = fr.mean_ranks;
    res.critical_difference = nemenyi_q05(k) * std::sqrt(double(k) * (k + 1.0) / (6.0 * n));
    res.significant.assign(std::size_t(k), std::vector<bool>(std::size_t(k), false));
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            if (i != j)
                res.significant[std::size_t(i)][std::size_t(j)] =
                    std::fabs(fr.mean_ranks[std::size_t(i)] - fr.mean_ranks[std::size_t(j)]) >=
                    res.critical_difference;
    return res;
}

// ---------------------------------------------------------------------------
// Cliff's delta

inline double cliffs_delta(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.empty() || y.empty()) throw config_error("cliffs_delta: empty sample");
    long long greater = 0, less = 0;
    for (double a : x) {
        for (double b : y) {
            if (a > b) ++greater;
            else if (a < b) ++less;
        }
    }
    return double(greater - less) / (double(x.size()) * double(y.size()));
}

} // namespace jointdiff

#endif // JOINTDIFF_STATS_HPP
