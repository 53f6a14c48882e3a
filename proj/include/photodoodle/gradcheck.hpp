#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "photodoodle/errors.hpp"
#include "photodoodle/tensor.hpp"

namespace photodoodle {

/// Central-difference gradient check in f64.
/// `f` evaluates the scalar function, `analytic` is the gradient under test.
/// Returns max over coordinates of |analytic - cd| / (|analytic| + |cd| + 1e-12).
inline double finite_diff_check(const std::function<double(const Tensor<double>&)>& f,
                                const Tensor<double>& x, const Tensor<double>& analytic,
                                double h = 1e-5) {
    if (!x.same_shape(analytic))
        throw shape_error("finite_diff_check: gradient shape does not match input");
    double worst = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        Tensor<double> xp = x, xm = x;
        xp.data[i] += h;
        xm.data[i] -= h;
        double fp = f(xp);
        double fm = f(xm);
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw numeric_error("finite_diff_check: non-finite value at coordinate " +
                                std::to_string(i));
        double cd = (fp - fm) / (2.0 * h);
        double a = analytic.data[i];
        double rel = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace photodoodle
