#pragma once

// Central finite-difference gradient verification.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "slw/core.hpp"

namespace slw {

// f is a scalar function of the parameter array `point`. Compares central
// differences against `analytic` elementwise and returns the max relative
// error with denominator max(|analytic|, |numeric|, 1e-8).
inline double finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> point, const std::vector<double>& analytic,
                                double h) {
    if (h <= 0) throw std::invalid_argument("finite_diff_check: h must be positive");
    if (analytic.size() != point.size())
        throw std::invalid_argument("finite_diff_check: gradient length mismatch");
    double max_err = 0.0;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double orig = point[i];
        point[i] = orig + h;
        double fp = f(point);
        point[i] = orig - h;
        double fm = f(point);
        point[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::invalid_argument("finite_diff_check: non-finite function value");
        double numeric = (fp - fm) / (2.0 * h);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        max_err = std::max(max_err, std::fabs(numeric - analytic[i]) / denom);
    }
    return max_err;
}

}  // namespace slw
