#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "jointdiff/conditioning.hpp"
#include "jointdiff/rng.hpp"

using namespace jointdiff;

namespace {

void randomize(ParamStore& store, Rng& rng, double scale = 0.5) {
    for (std::size_t i = 0; i < store.count(); ++i)
        for (auto& v : store.at(i).data) v = float(rng.uniform(-scale, scale));
}

} // namespace

TEST_CASE("token encoding matches the worked examples") {
    CHECK(make_token(0, 0, 30).token() == 0);
    CHECK(make_token(29, 1, 30).token() == 59);
    CHECK(make_token(5, 1, 30).token() == 35);
}

TEST_CASE("token encode/decode is a bijection over all 60 conditions") {
    for (int z = 0; z < 30; ++z) {
        for (int p : {0, 1}) {
            const int tok = make_token(z, p, 30).token();
            CHECK(tok >= 0);
            CHECK(tok < 60);
            auto back = decode_token(tok, 30);
            CHECK(back.z_bin == z);
            CHECK(back.pathology == p);
        }
    }
}

TEST_CASE("token range errors") {
    CHECK_THROWS_AS(make_token(-1, 0, 30), Error);
    CHECK_THROWS_AS(make_token(30, 0, 30), Error);
    CHECK_THROWS_AS(make_token(3, 2, 30), Error);
    CHECK_THROWS_AS(decode_token(60, 30), Error);
    CHECK_THROWS_AS(decode_token(-1, 30), Error);
}

TEST_CASE("sinpe at position zero and range bounds") {
    auto v = sinpe(0.0, 8);
    for (int i = 0; i < 4; ++i) CHECK(v[std::size_t(i)] == 0.0);
    for (int i = 4; i < 8; ++i) CHECK(v[std::size_t(i)] == 1.0);

    Rng rng(1);
    for (int rep = 0; rep < 100; ++rep) {
        auto u = sinpe(rng.uniform(-50.0, 50.0), 16);
        for (double x : u) {
            CHECK(x <= 1.0);
            CHECK(x >= -1.0);
        }
    }
}

TEST_CASE("sinpe at position one matches sin(1)/cos(1) in the i=0 slots") {
    auto v = sinpe(1.0, 32);
    CHECK(v[0] == doctest::Approx(0.84147).epsilon(1e-5));
    CHECK(v[16] == doctest::Approx(0.54030).epsilon(1e-5));
}

TEST_CASE("sinpe rejects odd widths") {
    CHECK_THROWS_AS(sinpe(1.0, 7), Error);
    CHECK_THROWS_AS(sinpe(1.0, 0), Error);
}

TEST_CASE("sinpe smoothness: small position change moves the encoding by at most sum(w_i)*delta") {
    const int d_pe = 32;
    const double delta = 1e-3;
    double bound = 0.0;
    for (int i = 0; i < d_pe / 2; ++i) bound += 1.0 / std::pow(10000.0, 2.0 * i / d_pe);
    bound *= delta * std::sqrt(2.0); // sin and cos components share each w_i

    for (double z : {0.0, 3.0, 17.5, 29.0}) {
        auto a = sinpe(z, d_pe);
        auto b = sinpe(z + delta, d_pe);
        double norm = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) norm += (a[i] - b[i]) * (a[i] - b[i]);
        CHECK(std::sqrt(norm) <= bound + 1e-12);
    }
}

TEST_CASE("cond embedding determinism and pathology sensitivity") {
    ParamStore store;
    auto ep = EmbeddingParams::build(store, 16, 8);
    Rng rng(42);
    randomize(store, rng);

    auto tok = make_token(7, 1, 30);
    auto e1 = cond_embedding(tok, store, ep);
    auto e2 = cond_embedding(tok, store, ep);
    CHECK(e1 == e2);

    auto other = cond_embedding(make_token(7, 0, 30), store, ep);
    double diff = 0.0;
    for (std::size_t i = 0; i < e1.size(); ++i) diff += std::fabs(e1[i] - other[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("cond embedding with identity-on-PE linear returns SinPE padded") {
    const int d = 16, d_pe = 8;
    ParamStore store;
    auto ep = EmbeddingParams::build(store, d, d_pe);
    // E_p = 0; W maps the PE block of the concat to the first d_pe outputs
    auto& w = store.at(ep.cond_w);
    for (int i = 0; i < d_pe; ++i) w.data[std::size_t(i) * (d + d_pe) + d + i] = 1.0f;

    auto out = cond_embedding(make_token(11, 0, 30), store, ep);
    auto pe = sinpe(11.0, d_pe);
    for (int i = 0; i < d_pe; ++i)
        CHECK(out[std::size_t(i)] == doctest::Approx(pe[std::size_t(i)]).epsilon(1e-12));
    for (int i = d_pe; i < d; ++i) CHECK(out[std::size_t(i)] == 0.0);
}

TEST_CASE("time embedding determinism, zero weights, and range check") {
    ParamStore store;
    auto ep = EmbeddingParams::build(store, 12, 6);
    Rng rng(9);
    randomize(store, rng);

    auto a = time_embedding(37, 1000, store, ep);
    auto b = time_embedding(37, 1000, store, ep);
    CHECK(a == b);

    CHECK_THROWS_AS(time_embedding(0, 1000, store, ep), Error);
    CHECK_THROWS_AS(time_embedding(1001, 1000, store, ep), Error);

    ParamStore zero_store;
    auto ep2 = EmbeddingParams::build(zero_store, 12, 6);
    auto z = time_embedding(37, 1000, zero_store, ep2);
    for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("time embedding backward matches finite differences over all weights") {
    const int d = 6, d_pe = 4;
    ParamStore store;
    auto ep = EmbeddingParams::build(store, d, d_pe);
    Rng rng(77);
    randomize(store, rng, 0.8);

    // scalar objective: fixed random linear functional of the embedding
    std::vector<double> w_obj(d);
    for (auto& v : w_obj) v = rng.uniform(-1.0, 1.0);
    auto objective = [&](const ParamStore& s) {
        auto e = time_embedding(5, 50, s, ep);
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += w_obj[std::size_t(i)] * e[std::size_t(i)];
        return acc;
    };

    TimeEmbeddingCache cache;
    time_embedding(5, 50, store, ep, &cache);
    GradStore grads(store);
    time_embedding_backward(w_obj, cache, store, ep, grads);

    const float h = 1e-3f;
    for (std::size_t id : {ep.time_w1, ep.time_b1, ep.time_w2, ep.time_b2}) {
        auto& tensor = store.at(id);
        for (std::size_t j = 0; j < tensor.size(); ++j) {
            const float keep = tensor.data[j];
            tensor.data[j] = keep + h;
            const double up = objective(store);
            tensor.data[j] = keep - h;
            const double dn = objective(store);
            tensor.data[j] = keep;
            const double fd = (up - dn) / (2.0 * double(h));
            const double an = grads.at(id)[j];
            CHECK(std::fabs(an - fd) / std::max(1e-6, std::fabs(fd)) < 1e-4);
        }
    }
}

TEST_CASE("cond embedding backward matches finite differences") {
    const int d = 6, d_pe = 4;
    ParamStore store;
    auto ep = EmbeddingParams::build(store, d, d_pe);
    Rng rng(78);
    randomize(store, rng, 0.8);
    auto tok = make_token(4, 1, 30);

    std::vector<double> w_obj(d);
    for (auto& v : w_obj) v = rng.uniform(-1.0, 1.0);
    auto objective = [&](const ParamStore& s) {
        auto e = cond_embedding(tok, s, ep);
        double acc = 0.0;
        for (int i = 0; i < d; ++i) acc += w_obj[std::size_t(i)] * e[std::size_t(i)];
        return acc;
    };

    CondEmbeddingCache cache;
    cond_embedding(tok, store, ep, &cache);
    GradStore grads(store);
    cond_embedding_backward(w_obj, cache, store, ep, grads);

    const float h = 1e-3f;
    for (std::size_t id : {ep.pathology_table, ep.cond_w, ep.cond_b}) {
        auto& tensor = store.at(id);
        for (std::size_t j = 0; j < tensor.size(); ++j) {
            const float keep = tensor.data[j];
            tensor.data[j] = keep + h;
            const double up = objective(store);
            tensor.data[j] = keep - h;
            const double dn = objective(store);
            tensor.data[j] = keep;
            const double fd = (up - dn) / (2.0 * double(h));
            const double an = grads.at(id)[j];
            if (fd == 0.0 && an == 0.0) continue; // untouched pathology row
            CHECK(std::fabs(an - fd) / std::max(1e-6, std::fabs(fd)) < 1e-4);
        }
    }
}

TEST_CASE("combine embeddings") {
    std::vector<double> v{1.0, 2.0}, w{3.0, 4.0}, zero{0.0, 0.0};
    CHECK(combine_embeddings(v, w) == std::vector<double>{4.0, 6.0});
    CHECK(combine_embeddings(v, zero) == v);
    CHECK(combine_embeddings(v, w) == combine_embeddings(w, v));
    std::vector<double> bad{1.0};
    CHECK_THROWS_AS(combine_embeddings(v, bad), Error);
}
