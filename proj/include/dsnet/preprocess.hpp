#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "dsnet/common.hpp"

namespace dsnet {

/// Below-limit-of-detection handling: WOL keeps machine-reported values, WL
/// substitutes LOD/sqrt(2) below the threshold.
enum class LodPolicy { WOL, WL };

struct LodEntry {
    double threshold = 0.0;
    LodPolicy policy = LodPolicy::WOL;
};

/// Per-covariate LOD thresholds, keyed by column name.
struct LodTable {
    std::map<std::string, LodEntry> entries;

    void validate() const {
        for (const auto& [name, e] : entries)
            if (!(e.threshold > 0.0) || !std::isfinite(e.threshold))
                throw validation_error("lod: threshold for '" + name + "' must be positive and finite");
    }
};

struct StandardizedColumn {
    Vec values;
    double mean = 0.0;
    double sd = 1.0;  // sample standard deviation of log1p(x)
};

/// log(1+x) followed by standardization to mean zero and unit sample variance.
inline StandardizedColumn log_offset_standardize(const Vec& values, const std::string& name = "") {
    const auto label = name.empty() ? std::string("column") : "'" + name + "'";
    if (values.size() < 2) throw validation_error("log_offset_standardize: " + label + " has fewer than 2 values");
    StandardizedColumn out;
    out.values.resize(values.size());
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (!(values(i) >= 0.0)) throw validation_error("log_offset_standardize: " + label + " has negative value");
        out.values(i) = std::log1p(values(i));
    }
    out.mean = out.values.mean();
    const double ss = (out.values.array() - out.mean).square().sum();
    out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    if (!(out.sd > 0.0)) throw validation_error("log_offset_standardize: " + label + " has zero variance");
    out.values = (out.values.array() - out.mean) / out.sd;
    return out;
}

/// WL substitutes LOD/sqrt(2) below the threshold; WOL is the identity.
inline Vec apply_lod_substitution(const Vec& values, const LodEntry& entry) {
    if (entry.policy == LodPolicy::WOL) return values;
    if (!(entry.threshold > 0.0)) throw validation_error("apply_lod_substitution: threshold must be positive");
    Vec out = values;
    const double sub = entry.threshold / std::sqrt(2.0);
    for (Eigen::Index i = 0; i < out.size(); ++i)
        if (out(i) < entry.threshold) out(i) = sub;
    return out;
}

/// 1 iff value > threshold.
inline Vec binarize_nonlinear(const Vec& values, double threshold) {
    if (!std::isfinite(threshold)) throw validation_error("binarize_nonlinear: threshold must be finite");
    Vec out(values.size());
    for (Eigen::Index i = 0; i < values.size(); ++i) out(i) = values(i) > threshold ? 1.0 : 0.0;
    return out;
}

/// Generalized Box-Cox transform of the chemical-to-lipid ratio:
///   g(x, s; kappa) = BxCx(log(k_x + x) / log(1 + s), kappa)
/// with BxCx(y; kappa) = (y^kappa - 1)/kappa, continuous at kappa = 0.
inline double boxcox_generalized(double x, double s, double kappa, double k_x) {
    if (!(s > 0.0)) throw validation_error("boxcox_generalized: lipid value must be positive");
    const double num = std::log(k_x + x);
    if (!(num > 0.0))
        throw validation_error("boxcox_generalized: log(k_x + x) must be positive (x = " + std::to_string(x) + ")");
    const double y = num / std::log1p(s);
    if (!(y > 0.0)) throw validation_error("boxcox_generalized: ratio must be positive");
    if (kappa == 0.0) return std::log(y);
    return std::expm1(kappa * std::log(y)) / kappa;
}

}  // namespace dsnet
