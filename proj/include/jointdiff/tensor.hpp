#ifndef JOINTDIFF_TENSOR_HPP
#define JOINTDIFF_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "jointdiff/error.hpp"

namespace jointdiff {

// Dense C x H x W value tensor used for activations and samples. Vectors are
// (n,1,1), planes are (1,H,W). Data-plane math runs in double (Tensor); the
// network hot path uses the float32 instantiation (TensorF). Learned
// parameters live in ParamStore as float32 (the checkpoint storage type).
template <class S>
class BasicTensor {
public:
    using scalar_type = S;

    BasicTensor() = default;
    BasicTensor(int c, int h, int w, S fill = S(0))
        : c_(c), h_(h), w_(w), data_(std::size_t(c) * h * w, fill) {}

    static BasicTensor vec(int n, S fill = S(0)) { return BasicTensor(n, 1, 1, fill); }
    static BasicTensor plane(int h, int w, S fill = S(0)) { return BasicTensor(1, h, w, fill); }

    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }
    std::size_t size() const { return data_.size(); }
    std::size_t plane_size() const { return std::size_t(h_) * w_; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S* channel(int ci) { return data_.data() + std::size_t(ci) * plane_size(); }
    const S* channel(int ci) const { return data_.data() + std::size_t(ci) * plane_size(); }

    S& at(int ci, int y, int x) { return data_[(std::size_t(ci) * h_ + y) * w_ + x]; }
    S at(int ci, int y, int x) const { return data_[(std::size_t(ci) * h_ + y) * w_ + x]; }

    S& operator[](std::size_t i) { return data_[i]; }
    S operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const BasicTensor& o) const {
        return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    int c_ = 0, h_ = 0, w_ = 0;
    std::vector<S> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

template <class A, class B>
BasicTensor<B> tensor_cast(const BasicTensor<A>& src, B) {
    BasicTensor<B> out(src.c(), src.h(), src.w());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = B(src[i]);
    return out;
}

inline TensorF to_float(const Tensor& t) { return tensor_cast(t, float()); }
inline Tensor to_double(const TensorF& t) { return tensor_cast(t, double()); }

template <class S>
void require_same_shape(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* where) {
    if (!a.same_shape(b))
        throw shape_error(std::string(where) + ": shape mismatch (" +
                          std::to_string(a.c()) + "x" + std::to_string(a.h()) + "x" + std::to_string(a.w()) + " vs " +
                          std::to_string(b.c()) + "x" + std::to_string(b.h()) + "x" + std::to_string(b.w()) + ")");
}

// One learnable array. float32 storage is the serialization contract; math
// promotes to double on read.
struct ParamTensor {
    std::vector<int> dims;
    std::vector<float> data;

    std::size_t size() const { return data.size(); }
};

// Ordered, named collection of all learnable arrays of a model. Order is
// construction order and defines the layout of gradient/optimizer buffers.
class ParamStore {
public:
    std::size_t add(const std::string& name, std::vector<int> dims) {
        std::size_t n = 1;
        for (int d : dims) n *= std::size_t(d);
        if (index_.count(name))
            throw config_error("duplicate parameter name: " + name);
        index_[name] = items_.size();
        names_.push_back(name);
        ParamTensor t;
        t.dims = std::move(dims);
        t.data.assign(n, 0.0f);
        items_.push_back(std::move(t));
        return items_.size() - 1;
    }

    std::size_t count() const { return items_.size(); }
    ParamTensor& at(std::size_t id) { return items_[id]; }
    const ParamTensor& at(std::size_t id) const { return items_[id]; }
    const std::string& name(std::size_t id) const { return names_[id]; }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw config_error("unknown parameter name: " + name);
        return it->second;
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& t : items_) n += t.size();
        return n;
    }

    // layout-compatible deep copy (EMA shadow, best-epoch snapshot)
    ParamStore clone() const { return *this; }

    bool same_layout(const ParamStore& o) const {
        if (items_.size() != o.items_.size()) return false;
        for (std::size_t i = 0; i < items_.size(); ++i)
            if (names_[i] != o.names_[i] || items_[i].dims != o.items_[i].dims) return false;
        return true;
    }

private:
    std::vector<ParamTensor> items_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Gradient buffers parallel to a ParamStore, accumulated in double.
class GradStore {
public:
    GradStore() = default;
    explicit GradStore(const ParamStore& params) {
        bufs_.resize(params.count());
        for (std::size_t i = 0; i < params.count(); ++i)
            bufs_[i].assign(params.at(i).size(), 0.0);
    }

    std::vector<double>& at(std::size_t id) { return bufs_[id]; }
    const std::vector<double>& at(std::size_t id) const { return bufs_[id]; }
    std::size_t count() const { return bufs_.size(); }

    void zero() {
        for (auto& b : bufs_) std::fill(b.begin(), b.end(), 0.0);
    }

    void add(const GradStore& o) {
        for (std::size_t i = 0; i < bufs_.size(); ++i)
            for (std::size_t j = 0; j < bufs_[i].size(); ++j)
                bufs_[i][j] += o.bufs_[i][j];
    }

    void scale(double s) {
        for (auto& b : bufs_)
            for (auto& v : b) v *= s;
    }

    double squared_norm() const {
        double acc = 0.0;
        for (const auto& b : bufs_)
            for (double v : b) acc += v * v;
        return acc;
    }

    bool all_finite() const {
        for (const auto& b : bufs_)
            for (double v : b)
                if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::vector<std::vector<double>> bufs_;
};

} // namespace jointdiff

#endif // JOINTDIFF_TENSOR_HPP
