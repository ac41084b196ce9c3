#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsnet/optimizer.hpp"

namespace dsnet {

/// Tuning grid over (alpha, nu_baseline) with permutation-selected nu per cell.
struct TuningGrid {
    std::vector<double> alphas = {1.0, 0.95, 0.8, 0.7, 0.6, 0.5};
    std::vector<double> nu_baselines = {15.0, 25.0, 50.0, 100.0};
    int permutations = 20;
    std::uint64_t seed = 1;

    void validate() const {
        if (alphas.empty() || nu_baselines.empty()) throw validation_error("tuning grid is empty");
        for (double a : alphas)
            if (!(a > 0.0 && a <= 1.0)) throw validation_error("tuning grid: alpha must be in (0,1]");
        for (double s : nu_baselines)
            if (!(s > 0.0)) throw validation_error("tuning grid: nu_baseline must be > 0");
        if (permutations < 1) throw validation_error("tuning grid: permutations must be >= 1");
    }
};

namespace detail {

/// Recovers the per-subject records from an augmented design (time-constant
/// covariates; covariate row taken from the subject's first pseudo-row).
inline std::vector<SurvivalObservation> extract_records(const AugmentedDesign& d) {
    std::vector<SurvivalObservation> recs(static_cast<std::size_t>(d.n_subjects));
    for (int i = 0; i < d.n_subjects; ++i) {
        const int first = d.row_start[static_cast<std::size_t>(i)];
        const int last = d.row_start[static_cast<std::size_t>(i) + 1] - 1;
        auto& r = recs[static_cast<std::size_t>(i)];
        r.subject_id = std::to_string(i);
        r.truncation = d.risk_time(first);
        r.time = d.risk_time(last);
        r.event = d.y(last) == 1.0;
        r.covariates = d.x.row(first).transpose();
    }
    return recs;
}

/// Reassigns outcome triplets (t, l, delta) across subjects (covariates stay)
/// and rebuilds the pseudo-observation design.
inline AugmentedDesign permute_outcomes(const AugmentedDesign& d, const std::vector<int>& perm,
                                        const RandomEffectSpec& spec) {
    auto recs = extract_records(d);
    std::vector<SurvivalObservation> shuffled = recs;
    for (int i = 0; i < d.n_subjects; ++i) {
        const auto& src = recs[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        auto& dst = shuffled[static_cast<std::size_t>(i)];
        dst.time = src.time;
        dst.truncation = src.truncation;
        dst.event = src.event;
    }
    return augment(shuffled, d.t_max, spec);
}

/// Smallest nu*alpha at which no variable enters, from the score at a fitted
/// null model: max_j |S_j| over singletons, ||S_g||_2 / sqrt(m_g) over groups.
inline double entry_scale(const Vec& score, const AugmentedDesign& d,
                          const std::vector<std::vector<int>>& groups) {
    double scale = 0.0;
    std::vector<char> grouped(static_cast<std::size_t>(d.p()), 0);
    for (const auto& g : groups) {
        double sn = 0.0;
        for (int j : g) {
            sn += score(1 + j) * score(1 + j);
            grouped[static_cast<std::size_t>(j)] = 1;
        }
        scale = std::max(scale, std::sqrt(sn / static_cast<double>(g.size())));
    }
    for (int j = 0; j < d.p(); ++j)
        if (!grouped[static_cast<std::size_t>(j)]) scale = std::max(scale, std::abs(score(1 + j)));
    return scale;
}

}  // namespace detail

struct NullFit {
    FitResult fit;
    double threshold = 0.0;  // entry scale (nu*alpha units)
};

/// Fits the model with beta pinned at zero (intercept + baseline + frailty)
/// and reports the entry threshold from the score at the fitted null.
inline NullFit fit_null_model(const AugmentedDesign& d, double nu_baseline,
                              const std::vector<std::vector<int>>& groups = {},
                              const FitControls& controls = FitControls(),
                              const std::optional<ModelParameters>& init = std::nullopt) {
    PenaltyConfig pen;
    pen.nu = 0.0;
    pen.alpha = 1.0;
    pen.nu_baseline = nu_baseline;
    FitControls ctrl = controls;
    ctrl.lock_beta = true;
    NullFit nf;
    nf.fit = fit(d, pen, init, ctrl);
    const Vec score = score_vector(d, nf.fit.params);
    nf.threshold = detail::entry_scale(score, d, groups);
    return nf;
}

/// The data's own entry threshold in nu units for a given alpha.
inline double entry_threshold(const AugmentedDesign& d, double alpha, double nu_baseline,
                              const std::vector<std::vector<int>>& groups = {},
                              const FitControls& controls = FitControls()) {
    const double scale = fit_null_model(d, nu_baseline, groups, controls).threshold;
    if (scale == 0.0) return 0.0;
    if (alpha <= 0.0) return std::numeric_limits<double>::infinity();
    return scale / alpha;
}

/// Permutation selection of nu: permutes the subject-level outcome triplets
/// K times (covariates fixed), computes the entry threshold of each permuted
/// dataset at its fitted null model and returns the median over permutations,
/// scaled by 1/alpha.
inline double permutation_select_nu(const AugmentedDesign& d, double alpha, double nu_baseline, int K,
                                    std::uint64_t seed, const std::vector<std::vector<int>>& groups = {},
                                    const FitControls& controls = FitControls(),
                                    const RandomEffectSpec& spec = RandomEffectSpec::intercept()) {
    if (K < 1) throw validation_error("permutation_select_nu: K must be >= 1");
    Rng rng(seed);
    std::vector<double> thresholds;
    thresholds.reserve(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        Rng stream = rng.split(static_cast<std::uint64_t>(k));
        const auto perm = stream.permutation(d.n_subjects);
        const AugmentedDesign pd = detail::permute_outcomes(d, perm, spec);
        thresholds.push_back(fit_null_model(pd, nu_baseline, groups, controls).threshold);
    }
    const double med = median(thresholds);
    if (med == 0.0) return 0.0;
    if (alpha <= 0.0) return std::numeric_limits<double>::infinity();
    return med / alpha;
}

/// BIC with the random effects plugged in:
///   -2 loglik(theta_hat) + df log(N_pseudo),
///   df = 1 + |active beta| + t_max + q(q+1)/2.
inline double bic(const FitResult& fit, const AugmentedDesign& d) {
    const double df = 1.0 + static_cast<double>(fit.selected.size()) + static_cast<double>(d.t_max) +
                      0.5 * static_cast<double>(d.q * (d.q + 1));
    return -2.0 * fit.log_lik + df * std::log(static_cast<double>(d.rows()));
}

struct GridCell {
    double alpha = 1.0;
    double nu_baseline = 1.0;
    double nu = 0.0;
    FitResult fit;
    double bic = std::numeric_limits<double>::quiet_NaN();
};

struct GridSearchResult {
    PenaltyConfig best;
    int best_index = -1;  // into path
    std::vector<GridCell> path;
    int nonconverged = 0;

    const FitResult& best_fit() const {
        if (best_index < 0) throw numeric_error("grid search: no converged cell");
        return path[static_cast<std::size_t>(best_index)].fit;
    }
};

/// Walks the (alpha, nu_baseline) grid: per cell selects nu by permutation
/// (entry thresholds are computed once per (permutation, nu_baseline) pair and
/// shared across alphas), fits warm-started from the previous cell, and picks
/// the BIC-minimizing converged cell. `nu_override` pins nu and skips the
/// permutation step.
inline GridSearchResult grid_search(const AugmentedDesign& d, const TuningGrid& grid,
                                    const FitControls& controls = FitControls(),
                                    const std::vector<std::vector<int>>& groups = {},
                                    std::optional<double> nu_override = std::nullopt,
                                    const RandomEffectSpec& spec = RandomEffectSpec::intercept()) {
    grid.validate();
    const std::size_t ns = grid.nu_baselines.size();

    // median entry scale per nu_baseline across permutations
    std::vector<double> med_scale(ns, 0.0);
    if (!nu_override) {
        std::vector<std::vector<double>> scales(ns);
        Rng rng(grid.seed);
        for (int k = 0; k < grid.permutations; ++k) {
            Rng stream = rng.split(static_cast<std::uint64_t>(k));
            const auto perm = stream.permutation(d.n_subjects);
            const AugmentedDesign pd = detail::permute_outcomes(d, perm, spec);
            std::optional<ModelParameters> warm;
            for (std::size_t s = 0; s < ns; ++s) {
                const NullFit nf = fit_null_model(pd, grid.nu_baselines[s], groups, controls, warm);
                scales[s].push_back(nf.threshold);
                warm = nf.fit.params;
            }
        }
        for (std::size_t s = 0; s < ns; ++s) med_scale[s] = median(scales[s]);
    }

    GridSearchResult out;
    std::optional<ModelParameters> warm;
    double best_bic = std::numeric_limits<double>::infinity();
    for (double alpha : grid.alphas) {
        for (std::size_t s = 0; s < ns; ++s) {
            GridCell cell;
            cell.alpha = alpha;
            cell.nu_baseline = grid.nu_baselines[s];
            cell.nu = nu_override ? *nu_override : med_scale[s] / alpha;
            PenaltyConfig pen;
            pen.nu = cell.nu;
            pen.alpha = alpha;
            pen.nu_baseline = cell.nu_baseline;
            pen.groups = groups;
            cell.fit = fit(d, pen, warm, controls);
            if (cell.fit.converged) {
                cell.bic = bic(cell.fit, d);
                if (cell.bic < best_bic) {
                    best_bic = cell.bic;
                    out.best_index = static_cast<int>(out.path.size());
                    out.best = pen;
                }
            } else {
                ++out.nonconverged;
            }
            warm = cell.fit.params;
            out.path.push_back(std::move(cell));
        }
    }
    if (out.best_index < 0) throw numeric_error("grid search: no cell converged");
    return out;
}

}  // namespace dsnet
