#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dsnet/common.hpp"

namespace dsnet {

/// Rubin's-rule combination of one coefficient across imputations, on the
/// log-odds scale with normal-approximation intervals.
struct PooledEstimate {
    double estimate = 0.0;
    double within = 0.0;   // mean within-imputation variance
    double between = 0.0;  // between-imputation variance
    double variance = 0.0;
    double odds_ratio = 1.0;
    double ci_low = 1.0;
    double ci_high = 1.0;
};

/// estimate = mean(estimates); variance = W + (1 + 1/m) B with B the sample
/// variance of the estimates. m = 1 collapses to the within variance.
inline PooledEstimate rubin_pool(const std::vector<double>& estimates, const std::vector<double>& variances) {
    if (estimates.empty() || estimates.size() != variances.size())
        throw validation_error("rubin_pool: estimate/variance lengths differ or are empty");
    const std::size_t m = estimates.size();
    PooledEstimate p;
    p.estimate = mean(estimates);
    p.within = mean(variances);
    if (m > 1) {
        double ss = 0.0;
        for (double e : estimates) ss += (e - p.estimate) * (e - p.estimate);
        p.between = ss / static_cast<double>(m - 1);
    }
    p.variance = p.within + (1.0 + 1.0 / static_cast<double>(m)) * p.between;
    const double se = std::sqrt(p.variance);
    p.odds_ratio = std::exp(p.estimate);
    p.ci_low = std::exp(p.estimate - 1.96 * se);
    p.ci_high = std::exp(p.estimate + 1.96 * se);
    return p;
}

/// "0.82 (0.7, 0.95)" style: two decimals with trailing zeros trimmed.
inline std::string format_or_value(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    std::string s(buf);
    while (!s.empty() && s.find('.') != std::string::npos && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

inline std::string format_or(const PooledEstimate& p) {
    return format_or_value(p.odds_ratio) + " (" + format_or_value(p.ci_low) + ", " +
           format_or_value(p.ci_high) + ")";
}

}  // namespace dsnet
