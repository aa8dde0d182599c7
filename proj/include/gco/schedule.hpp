#ifndef GCO_SCHEDULE_HPP
#define GCO_SCHEDULE_HPP

#include <vector>

#include "gco/common.hpp"

namespace gco {

// Variance schedule {beta_t, alpha_t, alpha_bar_t}, t = 1..T (index 0 is t=1).
// All schedule math is kept in 64-bit.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { check(t); return betas[t - 1]; }
    double alpha(int t) const { check(t); return alphas[t - 1]; }
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;  // convention: abar_0 = 1 so t=0 means "clean"
        check(t);
        return alpha_bars[t - 1];
    }

    void check(int t) const {
        if (t < 1 || t > T)
            throw ValidationError("schedule: step index " + std::to_string(t) +
                                  " outside [1," + std::to_string(T) + "]");
    }
};

inline NoiseSchedule build_schedule_from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ValidationError("schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    s.alphas.resize(s.T);
    s.alpha_bars.resize(s.T);
    double prod = 1.0;
    for (int i = 0; i < s.T; i++) {
        double b = s.betas[i];
        if (!(b > 0.0 && b < 1.0))
            throw ValidationError("schedule: beta[" + std::to_string(i + 1) + "]=" +
                                  std::to_string(b) + " outside (0,1)");
        s.alphas[i] = 1.0 - b;
        prod *= s.alphas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

inline NoiseSchedule build_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 1) throw ValidationError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ValidationError("schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(T);
    if (T == 1) {
        betas[0] = beta_start;
    } else {
        for (int i = 0; i < T; i++)
            betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
    }
    return build_schedule_from_betas(std::move(betas));
}

} // namespace gco

#endif
