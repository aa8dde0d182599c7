#ifndef GCO_DIFFUSION_HPP
#define GCO_DIFFUSION_HPP

// Forward diffusion, the eps-prediction loss, and DDIM transitions.
// Templated on the element type: float on the training path, double where
// tests need tight tolerances. Schedule coefficients are always double.

#include <functional>

#include "gco/schedule.hpp"
#include "gco/tensor.hpp"

namespace gco {

// z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
template <typename T>
TensorT<T> forward_diffuse(const TensorT<T>& z0, const TensorT<T>& eps, int t,
                           const NoiseSchedule& sched) {
    if (!z0.same_shape(eps))
        throw ValidationError("forward_diffuse: z0 " + z0.shape_str() + " vs eps " + eps.shape_str());
    double ab = sched.alpha_bar(t);
    double c0 = std::sqrt(ab);
    double c1 = std::sqrt(1.0 - ab);
    TensorT<T> out = z0;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < out.numel(); i++)
        out.v[i] = static_cast<T>(c0 * static_cast<double>(z0.v[i]) + c1 * static_cast<double>(eps.v[i]));
    return out;
}

// Mean squared error between predicted and true noise; optional region mask
// restricts the mean to unmasked (weight > 0) elements.
template <typename T>
double eps_mse_loss(const TensorT<T>& pred, const TensorT<T>& truth, const TensorT<T>* mask = nullptr) {
    if (!pred.same_shape(truth))
        throw ValidationError("eps_mse_loss: shape mismatch " + pred.shape_str() + " vs " + truth.shape_str());
    if (mask) {
        if (!mask->same_shape(pred)) throw ValidationError("eps_mse_loss: mask shape mismatch");
        double acc = 0.0, wsum = 0.0;
        for (int64_t i = 0; i < pred.numel(); i++) {
            double w = static_cast<double>(mask->v[i]);
            double d = static_cast<double>(pred.v[i]) - static_cast<double>(truth.v[i]);
            acc += w * d * d;
            wsum += w;
        }
        if (wsum <= 0.0) throw ValidationError("eps_mse_loss: empty mask");
        return acc / wsum;
    }
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); i++) {
        double d = static_cast<double>(pred.v[i]) - static_cast<double>(truth.v[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
}

// zhat_0 = (z_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)
template <typename T>
TensorT<T> predict_z0(const TensorT<T>& z_t, const TensorT<T>& pred_eps, int t,
                      const NoiseSchedule& sched) {
    if (!z_t.same_shape(pred_eps)) throw ValidationError("predict_z0: shape mismatch");
    double ab = sched.alpha_bar(t);
    double c0 = 1.0 / std::sqrt(ab);
    double c1 = std::sqrt(1.0 - ab);
    TensorT<T> out = z_t;
    for (int64_t i = 0; i < out.numel(); i++)
        out.v[i] = static_cast<T>((static_cast<double>(z_t.v[i]) - c1 * static_cast<double>(pred_eps.v[i])) * c0);
    return out;
}

// One DDIM transition t -> t_prev (t_prev = 0 lands on the clean estimate).
// eta = 0 is fully deterministic; eta > 0 adds the DDIM stochastic term and
// needs an rng.
template <typename T>
TensorT<T> ddim_step(const TensorT<T>& z_t, const TensorT<T>& pred_eps, int t, int t_prev,
                     double eta, const NoiseSchedule& sched, Rng* rng = nullptr) {
    if (t_prev >= t) throw ValidationError("ddim_step: t_prev must be < t");
    if (eta < 0.0 || eta > 1.0) throw ValidationError("ddim_step: eta outside [0,1]");
    if (eta > 0.0 && !rng) throw ValidationError("ddim_step: eta > 0 requires an rng");
    double ab_t = sched.alpha_bar(t);
    double ab_p = sched.alpha_bar(t_prev);
    double sigma = 0.0;
    if (eta > 0.0)
        sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
    double c_z0 = std::sqrt(ab_p);
    double inv_sqrt_ab_t = 1.0 / std::sqrt(ab_t);
    double c1 = std::sqrt(1.0 - ab_t);
    TensorT<T> out = z_t;
    for (int64_t i = 0; i < out.numel(); i++) {
        double e = static_cast<double>(pred_eps.v[i]);
        double z0 = (static_cast<double>(z_t.v[i]) - c1 * e) * inv_sqrt_ab_t;
        double x = c_z0 * z0 + dir * e;
        if (sigma > 0.0) x += sigma * rng->normal();
        out.v[i] = static_cast<T>(x);
    }
    return out;
}

// Evenly strided timestep subsequence T = ts[0] > ts[1] > ... > ts.back() >= 1,
// followed by a final transition to 0.
inline std::vector<int> ddim_timesteps(int T, int n_steps) {
    if (n_steps < 1) throw ValidationError("sample_loop: n_steps must be >= 1");
    if (n_steps > T) throw ValidationError("sample_loop: n_steps exceeds schedule length");
    std::vector<int> ts(n_steps);
    for (int i = 0; i < n_steps; i++) {
        double f = n_steps == 1 ? 1.0 : static_cast<double>(n_steps - 1 - i) / (n_steps - 1);
        ts[i] = 1 + static_cast<int>(std::llround(f * (T - 1)));
    }
    // enforce strict decrease for degenerate T/n_steps combinations
    for (int i = 1; i < n_steps; i++)
        if (ts[i] >= ts[i - 1]) ts[i] = ts[i - 1] - 1;
    while (!ts.empty() && ts.back() < 1) ts.pop_back();
    return ts;
}

template <typename T>
using DenoiseFn = std::function<TensorT<T>(const TensorT<T>& z, int t)>;

// DDIM sampling loop from pure noise. Deterministic for eta = 0; eta > 0
// draws the stochastic term from a stream seeded with `seed`.
template <typename T>
TensorT<T> sample_loop(const DenoiseFn<T>& denoiser, const TensorT<T>& init_noise, int n_steps,
                       const NoiseSchedule& sched, double eta = 0.0, uint64_t seed = 0) {
    std::vector<int> ts = ddim_timesteps(sched.T, n_steps);
    Rng rng(derive_seed(seed, 0x5a4d7c1e));
    TensorT<T> z = init_noise;
    for (size_t i = 0; i < ts.size(); i++) {
        int t = ts[i];
        int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
        TensorT<T> eps = denoiser(z, t);
        if (!eps.same_shape(z)) throw ValidationError("sample_loop: denoiser changed the shape");
        z = ddim_step(z, eps, t, t_prev, eta, sched, eta > 0.0 ? &rng : nullptr);
    }
    return z;
}

} // namespace gco

#endif
