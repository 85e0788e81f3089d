#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <limits>

namespace panelwald {

/// P(X <= x) for X ~ chi-square(df).
inline double chi2_cdf(double x, double df) {
    if (!(x > 0.0)) return 0.0;
    if (std::isinf(x)) return 1.0;
    return boost::math::gamma_p(0.5 * df, 0.5 * x);
}

/// Upper tail P(X > x), computed directly so small p-values keep their precision.
inline double chi2_sf(double x, double df) {
    if (std::isnan(x)) return std::numeric_limits<double>::quiet_NaN();
    if (!(x > 0.0)) return 1.0;
    if (std::isinf(x)) return 0.0;
    return boost::math::gamma_q(0.5 * df, 0.5 * x);
}

/// Two-sided normal p-value for a z statistic.
inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

}  // namespace panelwald
