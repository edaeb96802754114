#ifndef JOINTDIFF_DIFFUSION_HPP
#define JOINTDIFF_DIFFUSION_HPP

#include <cmath>
#include <string>

#include "jointdiff/error.hpp"
#include "jointdiff/schedule.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// Network output target: injected noise, velocity, or the clean sample.
enum class PredictionTarget { Epsilon, Velocity, X0 };

inline const char* target_name(PredictionTarget t) {
    switch (t) {
        case PredictionTarget::Epsilon:  return "epsilon";
        case PredictionTarget::Velocity: return "velocity";
        case PredictionTarget::X0:       return "x0";
    }
    return "?";
}

inline PredictionTarget target_from_name(const std::string& s) {
    if (s == "epsilon" || s == "eps") return PredictionTarget::Epsilon;
    if (s == "velocity" || s == "v") return PredictionTarget::Velocity;
    if (s == "x0") return PredictionTarget::X0;
    throw config_error("unknown prediction target: " + s);
}

// Image+mask pair diffused as one 2-channel sample. Data-space masks hold
// only -1/+1; along sampling trajectories the mask channel is continuous.
struct JointSample {
    Tensor image; // 1 x H x W
    Tensor mask;  // 1 x H x W

    int h() const { return image.h(); }
    int w() const { return image.w(); }

    Tensor stacked() const {
        require_same_shape(image, mask, "JointSample");
        Tensor x(2, image.h(), image.w());
        for (std::size_t i = 0; i < image.size(); ++i) x[i] = image[i];
        double* m = x.channel(1);
        for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i];
        return x;
    }

    static JointSample from_stacked(const Tensor& x) {
        if (x.c() != 2) throw shape_error("JointSample: expected 2 channels");
        JointSample js;
        js.image = Tensor::plane(x.h(), x.w());
        js.mask = Tensor::plane(x.h(), x.w());
        for (std::size_t i = 0; i < js.image.size(); ++i) js.image[i] = x.channel(0)[i];
        for (std::size_t i = 0; i < js.mask.size(); ++i) js.mask[i] = x.channel(1)[i];
        return js;
    }
};

struct LpConfig {
    double p = 2.0; // study values {1.5, 2.0, 2.5}
};

// ---------------------------------------------------------------------------
// forward process

// q(x_t | x_0): x_t[c] = sqrt(ab)*x0[c] + sqrt(1-ab)*eps. The SAME H x W
// noise field is applied to both channels so image and mask stay spatially
// coupled along the trajectory.
inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    sched.check_t(t);
    if (x0.c() != 2) throw shape_error("forward_diffuse: x0 must be 2xHxW");
    if (eps.c() != 1 || eps.h() != x0.h() || eps.w() != x0.w())
        throw shape_error("forward_diffuse: eps must be a single HxW field matching x0");

    const double ab = sched.alpha_bar[t];
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    Tensor xt(2, x0.h(), x0.w());
    const std::size_t n = x0.plane_size();
    for (int c = 0; c < 2; ++c) {
        const double* src = x0.channel(c);
        double* dst = xt.channel(c);
        const double* e = eps.data();
        for (std::size_t i = 0; i < n; ++i) dst[i] = sa * src[i] + sb * e[i];
    }
    return xt;
}

// training target for the configured parameterization, broadcast to 2 channels
inline Tensor compute_target(const Tensor& x0, const Tensor& eps, int t,
                             const NoiseSchedule& sched, PredictionTarget target) {
    sched.check_t(t);
    if (x0.c() != 2) throw shape_error("compute_target: x0 must be 2xHxW");
    if (eps.c() != 1 || eps.h() != x0.h() || eps.w() != x0.w())
        throw shape_error("compute_target: eps must be a single HxW field matching x0");

    Tensor out(2, x0.h(), x0.w());
    const std::size_t n = x0.plane_size();
    switch (target) {
        case PredictionTarget::Epsilon:
            for (int c = 0; c < 2; ++c) {
                double* dst = out.channel(c);
                for (std::size_t i = 0; i < n; ++i) dst[i] = eps.data()[i];
            }
            break;
        case PredictionTarget::X0:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x0[i];
            break;
        case PredictionTarget::Velocity: {
            const double ab = sched.alpha_bar[t];
            const double sa = std::sqrt(ab);
            const double sb = std::sqrt(1.0 - ab);
            for (int c = 0; c < 2; ++c) {
                const double* src = x0.channel(c);
                double* dst = out.channel(c);
                for (std::size_t i = 0; i < n; ++i)
                    dst[i] = sa * eps.data()[i] - sb * src[i];
            }
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// prediction algebra (inversions used by the sampler)

inline Tensor predict_x0(const Tensor& model_out, const Tensor& x_t, int t,
                         const NoiseSchedule& sched, PredictionTarget target) {
    sched.check_t(t);
    require_same_shape(model_out, x_t, "predict_x0");
    const double ab = sched.alpha_bar[t];
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);

    Tensor out(x_t.c(), x_t.h(), x_t.w());
    switch (target) {
        case PredictionTarget::X0:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = model_out[i];
            break;
        case PredictionTarget::Epsilon:
            if (ab <= 0.0)
                throw numeric_error("predict_x0: alpha_bar[t]=0 makes the epsilon inversion singular");
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = (x_t[i] - sb * model_out[i]) / sa;
            break;
        case PredictionTarget::Velocity:
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = sa * x_t[i] - sb * model_out[i];
            break;
    }
    return out;
}

inline Tensor predict_eps(const Tensor& model_out, const Tensor& x_t, int t,
                          const NoiseSchedule& sched, PredictionTarget target) {
    sched.check_t(t);
    require_same_shape(model_out, x_t, "predict_eps");
    const double ab = sched.alpha_bar[t];
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);

    Tensor out(x_t.c(), x_t.h(), x_t.w());
    switch (target) {
        case PredictionTarget::Epsilon:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = model_out[i];
            break;
        case PredictionTarget::X0:
            if (ab >= 1.0)
                throw numeric_error("predict_eps: alpha_bar[t]=1 makes the x0 inversion singular");
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = (x_t[i] - sa * model_out[i]) / sb;
            break;
        case PredictionTarget::Velocity:
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = sb * x_t[i] + sa * model_out[i];
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lp objective

// mean over all elements of |pred - target|^p
inline double lp_loss(const Tensor& pred, const Tensor& target, const LpConfig& cfg) {
    require_same_shape(pred, target, "lp_loss");
    if (!(cfg.p > 0.0)) throw config_error("lp_loss: p must be > 0");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - target[i];
        if (!std::isfinite(r)) throw numeric_error("lp_loss: non-finite residual");
        acc += std::pow(std::fabs(r), cfg.p);
    }
    return acc / double(pred.size());
}

// d lp_loss / d pred; the derivative of |r|^p at r=0 is taken as 0. `scale`
// folds an extra factor into the output (batch-mean normalization).
inline Tensor lp_loss_grad(const Tensor& pred, const Tensor& target,
                           const LpConfig& cfg, double scale = 1.0) {
    require_same_shape(pred, target, "lp_loss_grad");
    if (!(cfg.p > 0.0)) throw config_error("lp_loss_grad: p must be > 0");
    Tensor g(pred.c(), pred.h(), pred.w());
    const double inv_n = scale / double(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = pred[i] - target[i];
        if (r == 0.0) {
            g[i] = 0.0;
        } else {
            const double mag = cfg.p * std::pow(std::fabs(r), cfg.p - 1.0);
            g[i] = (r > 0.0 ? mag : -mag) * inv_n;
        }
    }
    return g;
}

} // namespace jointdiff

#endif // JOINTDIFF_DIFFUSION_HPP
