#pragma once

// Loss-vs-compute curve machinery: cross-run lower envelope extraction and
// power-law fitting L(C) = (C / c_scale)^(-alpha) by least squares in logs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace slw {

struct CurvePoint {
    double compute = 0.0;  // FLOP (or PF-day; any consistent unit)
    double loss = 0.0;     // nats/token
};

struct PowerLawFit {
    double alpha = 0.0;    // positive exponent
    double c_scale = 0.0;  // compute at which predicted loss is 1
    double rmse_log = 0.0; // residual in log-loss
};

// Merge all runs by ascending compute and keep a point iff its loss is
// strictly below every kept point at smaller compute.
inline std::vector<CurvePoint> lower_envelope(const std::vector<std::vector<CurvePoint>>& runs) {
    std::vector<CurvePoint> all;
    for (const auto& run : runs) all.insert(all.end(), run.begin(), run.end());
    if (all.empty()) throw std::invalid_argument("lower_envelope: no points");
    std::stable_sort(all.begin(), all.end(),
                     [](const CurvePoint& a, const CurvePoint& b) { return a.compute < b.compute; });
    std::vector<CurvePoint> env;
    double best = std::numeric_limits<double>::infinity();
    for (const CurvePoint& p : all) {
        if (p.loss < best) {
            env.push_back(p);
            best = p.loss;
        }
    }
    return env;
}

inline PowerLawFit fit_power_law(const std::vector<CurvePoint>& points) {
    if (points.size() < 3) throw std::invalid_argument("fit_power_law: need at least 3 points");
    const std::size_t n = points.size();
    double sx = 0, sy = 0;
    for (const auto& p : points) {
        if (!(p.compute > 0) || !(p.loss > 0))
            throw std::invalid_argument("fit_power_law: nonpositive coordinates");
        sx += std::log(p.compute);
        sy += std::log(p.loss);
    }
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0;
    for (const auto& p : points) {
        double dx = std::log(p.compute) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(p.loss) - my);
    }
    if (sxx <= 0) throw std::invalid_argument("fit_power_law: zero variance in log compute");
    const double slope = sxy / sxx;
    const double intercept = my - slope * mx;
    PowerLawFit fit;
    fit.alpha = -slope;
    if (!(fit.alpha > 0))
        throw std::invalid_argument("fit_power_law: nonpositive exponent (no scaling)");
    fit.c_scale = std::exp(intercept / fit.alpha);
    double sse = 0;
    for (const auto& p : points) {
        double r = std::log(p.loss) - (intercept + slope * std::log(p.compute));
        sse += r * r;
    }
    fit.rmse_log = std::sqrt(sse / n);
    return fit;
}

inline double predict_loss(const PowerLawFit& fit, double compute) {
    if (!(compute > 0)) throw std::invalid_argument("predict_loss: compute must be positive");
    return std::pow(compute / fit.c_scale, -fit.alpha);
}

// Warmup transients are not on the power law: drop each run's points below
// floor_fraction of that run's final compute before enveloping.
inline std::vector<CurvePoint> apply_compute_floor(const std::vector<CurvePoint>& run,
                                                   double floor_fraction) {
    if (run.empty()) return run;
    double floor = floor_fraction * run.back().compute;
    std::vector<CurvePoint> out;
    for (const auto& p : run)
        if (p.compute >= floor) out.push_back(p);
    return out;
}

}  // namespace slw
