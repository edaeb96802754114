#ifndef JOINTDIFF_CONDITIONING_HPP
#define JOINTDIFF_CONDITIONING_HPP

#include <cmath>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// Axial-position bin plus pathology class, flattened to one token id.
struct ConditionToken {
    int z_bin = 0;
    int pathology = 0;
    int n_z = 30;

    int token() const { return z_bin + pathology * n_z; }
};

inline ConditionToken make_token(int z_bin, int pathology, int n_z = 30) {
    if (n_z < 1) throw config_error("make_token: N_z must be >= 1");
    if (z_bin < 0 || z_bin >= n_z)
        throw range_error("make_token: z_bin " + std::to_string(z_bin) +
                          " outside [0, " + std::to_string(n_z) + ")");
    if (pathology != 0 && pathology != 1)
        throw range_error("make_token: pathology must be 0 or 1");
    return ConditionToken{z_bin, pathology, n_z};
}

inline ConditionToken decode_token(int token, int n_z = 30) {
    if (token < 0 || token >= 2 * n_z)
        throw range_error("decode_token: token " + std::to_string(token) +
                          " outside [0, " + std::to_string(2 * n_z) + ")");
    return ConditionToken{token % n_z, token / n_z, n_z};
}

// Sinusoidal positional encoding, half sines then half cosines, geometric
// frequencies w_i = 1/10000^(2i/d_pe).
inline std::vector<double> sinpe(double position, int d_pe) {
    if (d_pe <= 0 || d_pe % 2 != 0)
        throw config_error("sinpe: d_pe must be a positive even count");
    std::vector<double> out(static_cast<std::size_t>(d_pe));
    const int half = d_pe / 2;
    for (int i = 0; i < half; ++i) {
        const double w = 1.0 / std::pow(10000.0, 2.0 * i / double(d_pe));
        out[std::size_t(i)] = std::sin(position * w);
        out[std::size_t(half + i)] = std::cos(position * w);
    }
    return out;
}

// Learnable pieces of the conditioning pathway. Tensors live in the model's
// ParamStore; this struct only holds their ids.
//   pathology table E_p : 2 x d
//   linear_c           : d x (d + d_pe) plus bias d   (condition embedding)
//   mlp_t              : d_pe -> d -> d with SiLU between (time embedding)
struct EmbeddingParams {
    int d = 0;
    int d_pe = 0;
    std::size_t pathology_table = 0;
    std::size_t cond_w = 0, cond_b = 0;
    std::size_t time_w1 = 0, time_b1 = 0, time_w2 = 0, time_b2 = 0;

    static EmbeddingParams build(ParamStore& store, int d, int d_pe) {
        if (d <= 0 || d_pe <= 0 || d_pe % 2 != 0)
            throw config_error("EmbeddingParams: invalid widths d=" + std::to_string(d) +
                               " d_pe=" + std::to_string(d_pe));
        EmbeddingParams p;
        p.d = d;
        p.d_pe = d_pe;
        p.pathology_table = store.add("embed.pathology_table", {2, d});
        p.cond_w = store.add("embed.cond.w", {d, d + d_pe});
        p.cond_b = store.add("embed.cond.b", {d});
        p.time_w1 = store.add("embed.time.w1", {d, d_pe});
        p.time_b1 = store.add("embed.time.b1", {d});
        p.time_w2 = store.add("embed.time.w2", {d, d});
        p.time_b2 = store.add("embed.time.b2", {d});
        return p;
    }
};

namespace detail {
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}
} // namespace detail

struct CondEmbeddingCache {
    ConditionToken tok;
    std::vector<double> concat; // [E_p[p] || SinPE(z_bin)], length d + d_pe
};

// c_emb = Linear([E_p[pathology] || SinPE(z_bin)])
inline std::vector<double> cond_embedding(const ConditionToken& tok, const ParamStore& store,
                                          const EmbeddingParams& ep,
                                          CondEmbeddingCache* cache = nullptr) {
    if (tok.z_bin < 0 || tok.z_bin >= tok.n_z || (tok.pathology != 0 && tok.pathology != 1))
        throw range_error("cond_embedding: invalid token");
    const int d = ep.d, d_pe = ep.d_pe;
    std::vector<double> concat(static_cast<std::size_t>(d + d_pe));
    const ParamTensor& table = store.at(ep.pathology_table);
    for (int i = 0; i < d; ++i)
        concat[std::size_t(i)] = table.data[std::size_t(tok.pathology) * d + i];
    const auto pe = sinpe(double(tok.z_bin), d_pe);
    for (int i = 0; i < d_pe; ++i) concat[std::size_t(d + i)] = pe[std::size_t(i)];

    const ParamTensor& w = store.at(ep.cond_w);
    const ParamTensor& b = store.at(ep.cond_b);
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int o = 0; o < d; ++o) {
        double acc = b.data[std::size_t(o)];
        const float* wr = w.data.data() + std::size_t(o) * (d + d_pe);
        for (int i = 0; i < d + d_pe; ++i) acc += double(wr[i]) * concat[std::size_t(i)];
        out[std::size_t(o)] = acc;
    }
    if (cache) {
        cache->tok = tok;
        cache->concat = std::move(concat);
    }
    return out;
}

inline void cond_embedding_backward(const std::vector<double>& grad_out,
                                    const CondEmbeddingCache& cache,
                                    const ParamStore& store, const EmbeddingParams& ep,
                                    GradStore& grads) {
    const int d = ep.d, d_pe = ep.d_pe;
    const ParamTensor& w = store.at(ep.cond_w);
    auto& gw = grads.at(ep.cond_w);
    auto& gb = grads.at(ep.cond_b);
    auto& gtable = grads.at(ep.pathology_table);
    std::vector<double> gconcat(static_cast<std::size_t>(d + d_pe), 0.0);
    for (int o = 0; o < d; ++o) {
        const double g = grad_out[std::size_t(o)];
        gb[std::size_t(o)] += g;
        const float* wr = w.data.data() + std::size_t(o) * (d + d_pe);
        double* gwr = gw.data() + std::size_t(o) * (d + d_pe);
        for (int i = 0; i < d + d_pe; ++i) {
            gwr[i] += g * cache.concat[std::size_t(i)];
            gconcat[std::size_t(i)] += g * double(wr[i]);
        }
    }
    // SinPE block is constant; only the pathology row receives gradient
    for (int i = 0; i < d; ++i)
        gtable[std::size_t(cache.tok.pathology) * d + i] += gconcat[std::size_t(i)];
}

struct TimeEmbeddingCache {
    std::vector<double> pe;     // SinPE(t)
    std::vector<double> pre1;   // w1*pe + b1 (pre-activation)
    std::vector<double> hidden; // silu(pre1)
};

// t_emb = MLP(SinPE(t)), 2 layers with SiLU between
inline std::vector<double> time_embedding(int t, int T, const ParamStore& store,
                                          const EmbeddingParams& ep,
                                          TimeEmbeddingCache* cache = nullptr) {
    if (t < 1 || t > T)
        throw range_error("time_embedding: t=" + std::to_string(t) +
                          " outside [1, " + std::to_string(T) + "]");
    const int d = ep.d, d_pe = ep.d_pe;
    auto pe = sinpe(double(t), d_pe);

    const ParamTensor& w1 = store.at(ep.time_w1);
    const ParamTensor& b1 = store.at(ep.time_b1);
    const ParamTensor& w2 = store.at(ep.time_w2);
    const ParamTensor& b2 = store.at(ep.time_b2);

    std::vector<double> pre1(static_cast<std::size_t>(d)), hidden(static_cast<std::size_t>(d)), out(static_cast<std::size_t>(d));
    for (int o = 0; o < d; ++o) {
        double acc = b1.data[std::size_t(o)];
        const float* wr = w1.data.data() + std::size_t(o) * d_pe;
        for (int i = 0; i < d_pe; ++i) acc += double(wr[i]) * pe[std::size_t(i)];
        pre1[std::size_t(o)] = acc;
        hidden[std::size_t(o)] = detail::silu(acc);
    }
    for (int o = 0; o < d; ++o) {
        double acc = b2.data[std::size_t(o)];
        const float* wr = w2.data.data() + std::size_t(o) * d;
        for (int i = 0; i < d; ++i) acc += double(wr[i]) * hidden[std::size_t(i)];
        out[std::size_t(o)] = acc;
    }
    if (cache) {
        cache->pe = std::move(pe);
        cache->pre1 = std::move(pre1);
        cache->hidden = std::move(hidden);
    }
    return out;
}

inline void time_embedding_backward(const std::vector<double>& grad_out,
                                    const TimeEmbeddingCache& cache,
                                    const ParamStore& store, const EmbeddingParams& ep,
                                    GradStore& grads) {
    const int d = ep.d, d_pe = ep.d_pe;
    const ParamTensor& w2 = store.at(ep.time_w2);
    auto& gw2 = grads.at(ep.time_w2);
    auto& gb2 = grads.at(ep.time_b2);
    std::vector<double> ghidden(static_cast<std::size_t>(d), 0.0);
    for (int o = 0; o < d; ++o) {
        const double g = grad_out[std::size_t(o)];
        gb2[std::size_t(o)] += g;
        const float* wr = w2.data.data() + std::size_t(o) * d;
        double* gwr = gw2.data() + std::size_t(o) * d;
        for (int i = 0; i < d; ++i) {
            gwr[i] += g * cache.hidden[std::size_t(i)];
            ghidden[std::size_t(i)] += g * double(wr[i]);
        }
    }
    auto& gw1 = grads.at(ep.time_w1);
    auto& gb1 = grads.at(ep.time_b1);
    for (int o = 0; o < d; ++o) {
        const double g = ghidden[std::size_t(o)] * detail::silu_grad(cache.pre1[std::size_t(o)]);
        gb1[std::size_t(o)] += g;
        double* gwr = gw1.data() + std::size_t(o) * d_pe;
        for (int i = 0; i < d_pe; ++i) gwr[i] += g * cache.pe[std::size_t(i)];
    }
}

// e = t_emb + c_emb
inline std::vector<double> combine_embeddings(const std::vector<double>& t_emb,
                                              const std::vector<double>& c_emb) {
    if (t_emb.size() != c_emb.size())
        throw shape_error("combine_embeddings: width mismatch");
    std::vector<double> e(t_emb.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = t_emb[i] + c_emb[i];
    return e;
}

} // namespace jointdiff

#endif // JOINTDIFF_CONDITIONING_HPP
