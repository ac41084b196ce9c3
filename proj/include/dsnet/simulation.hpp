#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsnet/tuning.hpp"

namespace dsnet {

/// Compound-symmetric covariate block: size m with pairwise correlation rho.
struct CovariateBlock {
    int size = 0;
    double rho = 0.0;
};

enum class GroupKind { cont, cat, mixed };

/// Grouped signal variables: per-group coefficient vectors over the generated
/// columns (dummy columns for categorical groups, uniform columns otherwise).
struct GroupSpec {
    GroupKind kind = GroupKind::cont;
    std::vector<Vec> betas;

    /// Whether the g-th group is generated as a categorical one-hot block.
    bool categorical(std::size_t g) const {
        switch (kind) {
            case GroupKind::cont: return false;
            case GroupKind::cat: return true;
            case GroupKind::mixed: return g == 0;
        }
        return false;
    }
};

/// One benchmark design: block-correlated covariates, sparse true signal, the
/// discrete hazard generator with subject frailty, calibrated right censoring
/// and optional 3-point left truncation.
struct SimulationDesign {
    int n = 250;
    int p = 150;
    int t_max = 10;
    std::vector<std::pair<int, double>> true_beta;  // ungrouped (column, value)
    Vec gamma;
    double frailty_sd = 1.0;
    double censoring_target = 0.2;
    bool truncated = true;
    std::vector<CovariateBlock> blocks;
    std::optional<GroupSpec> groups;
    std::uint64_t seed = 1;

    static Vec default_gamma() {
        Vec g(10);
        g << -9.00, -7.00, -4.97, -2.82, 0.34, 1.39, 2.35, 4.27, 6.18, 8.11;
        return g;
    }

    int block_columns() const {
        int s = 0;
        for (const auto& b : blocks) s += b.size;
        return s;
    }

    int group_columns() const {
        if (!groups) return 0;
        int s = 0;
        for (const auto& b : groups->betas) s += static_cast<int>(b.size());
        return s;
    }

    /// Column index sets of the groups (they follow the block columns).
    std::vector<std::vector<int>> group_index_sets() const {
        std::vector<std::vector<int>> sets;
        if (!groups) return sets;
        int col = block_columns();
        for (const auto& b : groups->betas) {
            std::vector<int> g(static_cast<std::size_t>(b.size()));
            for (std::size_t k = 0; k < g.size(); ++k) g[k] = col++;
            sets.push_back(std::move(g));
        }
        return sets;
    }

    /// Full length-p truth vector including grouped coefficients.
    Vec true_beta_vector() const {
        Vec beta = Vec::Zero(p);
        for (const auto& [j, v] : true_beta) beta(j) = v;
        if (groups) {
            int col = block_columns();
            for (const auto& b : groups->betas)
                for (Eigen::Index k = 0; k < b.size(); ++k) beta(col++) = b(k);
        }
        return beta;
    }

    /// Ungrouped true-support columns (for the non-group false negatives).
    std::vector<int> nongroup_support() const {
        std::vector<int> s;
        for (const auto& [j, v] : true_beta)
            if (v != 0.0) s.push_back(j);
        return s;
    }

    void validate() const {
        if (n < 1 || p < 1 || t_max < 1) throw validation_error("simulation design: bad sizes");
        if (gamma.size() != t_max) throw validation_error("simulation design: gamma length != t_max");
        for (const auto& b : blocks)
            if (b.size < 1 || !(b.rho >= 0.0 && b.rho < 1.0))
                throw validation_error("simulation design: block rho must be in [0,1)");
        if (block_columns() + group_columns() > p)
            throw validation_error("simulation design: structured columns exceed p");
        for (const auto& [j, v] : true_beta) {
            (void)v;
            if (j < 0 || j >= block_columns())
                throw validation_error("simulation design: true beta outside block columns");
        }
        if (!(censoring_target >= 0.0 && censoring_target < 1.0))
            throw validation_error("simulation design: censoring target must be in [0,1)");
        if (!(frailty_sd >= 0.0)) throw validation_error("simulation design: negative frailty sd");
    }
};

/// Scenario with two correlated blocks of size 3 (rho 0.7 and 0.4); the first
/// five block columns carry beta* = (-4,-4,-4,8,8), the sixth is a correlated
/// null variable.
inline SimulationDesign scenario_one(int n, double censoring_target, bool truncated, std::uint64_t seed) {
    SimulationDesign d;
    d.n = n;
    d.p = 150;
    d.t_max = 10;
    d.gamma = SimulationDesign::default_gamma();
    d.frailty_sd = 1.0;
    d.censoring_target = censoring_target;
    d.truncated = truncated;
    d.blocks = {{3, 0.7}, {3, 0.4}};
    d.true_beta = {{0, -4.0}, {1, -4.0}, {2, -4.0}, {3, 8.0}, {4, 8.0}};
    d.seed = seed;
    return d;
}

/// Scenario-one structure plus two signal groups of sizes 4 and 3 with
/// beta1* = (7,-5,7,-4) and beta2* = (5,-8,3).
inline SimulationDesign scenario_two(GroupKind kind, int n, double censoring_target, bool truncated,
                                     std::uint64_t seed) {
    SimulationDesign d = scenario_one(n, censoring_target, truncated, seed);
    GroupSpec g;
    g.kind = kind;
    Vec b1(4), b2(3);
    b1 << 7.0, -5.0, 7.0, -4.0;
    b2 << 5.0, -8.0, 3.0;
    g.betas = {b1, b2};
    d.groups = g;
    return d;
}

namespace detail {

/// One covariate row: block columns x = theta * z_shared + z with
/// theta = sqrt(rho / (1 - rho)), grouped columns (dummies or uniforms),
/// remaining columns iid U(0,1).
inline void fill_covariate_row(Eigen::Ref<Eigen::RowVectorXd> row, const SimulationDesign& d, Rng& rng) {
    int col = 0;
    for (const auto& b : d.blocks) {
        const double theta = std::sqrt(b.rho / (1.0 - b.rho));
        const double shared = rng.uniform();
        for (int k = 0; k < b.size; ++k) row(col++) = theta * shared + rng.uniform();
    }
    if (d.groups) {
        for (std::size_t g = 0; g < d.groups->betas.size(); ++g) {
            const int m = static_cast<int>(d.groups->betas[g].size());
            if (d.groups->categorical(g)) {
                const int level = rng.uniform_int(m + 1);  // last level = reference
                for (int k = 0; k < m; ++k) row(col++) = level == k ? 1.0 : 0.0;
            } else {
                for (int k = 0; k < m; ++k) row(col++) = rng.uniform();
            }
        }
    }
    for (; col < d.p; ++col) row(col) = rng.uniform();
}

}  // namespace detail

/// n x p covariate matrix for the design.
inline Mat gen_correlated_covariates(const SimulationDesign& d, Rng& rng) {
    d.validate();
    Mat x(d.n, d.p);
    for (int i = 0; i < d.n; ++i) detail::fill_covariate_row(x.row(i), d, rng);
    return x;
}

/// Grouped columns only (n x sum m_g), in group order.
inline Mat gen_group_covariates(const SimulationDesign& d, Rng& rng) {
    if (!d.groups) throw validation_error("gen_group_covariates: design has no groups");
    const Mat full = gen_correlated_covariates(d, rng);
    return full.middleCols(d.block_columns(), d.group_columns());
}

/// Diagnostics from the survival generator, exposed for tests and reports.
struct GenDebug {
    std::vector<int> true_time;    // 0 when the event lies beyond t_max
    std::vector<int> censor_time;  // drawn censoring cycle
    std::vector<double> frailty;
    long truncation_draws[3] = {0, 0, 0};  // all L draws incl. discarded candidates
    long discarded = 0;
};

/// Sequential Bernoulli draws through the discrete hazard with subject
/// frailty; independent geometric censoring at `censor_prob` capped at t_max
/// (and floored at 3 under truncation so L <= C always holds). Under
/// truncation, candidates with T < L are discarded and fully regenerated,
/// covariate row included.
inline std::vector<SurvivalObservation> gen_survival_times(Mat& covariates, const SimulationDesign& d, Rng& rng,
                                                           double censor_prob, GenDebug* debug = nullptr) {
    d.validate();
    if (covariates.rows() != d.n || covariates.cols() != d.p)
        throw validation_error("gen_survival_times: covariate matrix shape mismatch");
    const Vec beta = d.true_beta_vector();
    std::vector<SurvivalObservation> obs(static_cast<std::size_t>(d.n));
    if (debug) {
        debug->true_time.assign(static_cast<std::size_t>(d.n), 0);
        debug->censor_time.assign(static_cast<std::size_t>(d.n), 0);
        debug->frailty.assign(static_cast<std::size_t>(d.n), 0.0);
    }
    for (int i = 0; i < d.n; ++i) {
        for (;;) {
            const double r = d.frailty_sd * rng.normal();
            const double xb = covariates.row(i).dot(beta);
            int t_event = 0;  // 0 = beyond t_max
            for (int t = 1; t <= d.t_max; ++t) {
                if (rng.uniform() < hazard(d.gamma(t - 1) + xb + r)) {
                    t_event = t;
                    break;
                }
            }
            int censor = d.t_max;
            if (censor_prob > 0.0) {
                const double u = rng.uniform_pos();
                censor = 1 + static_cast<int>(std::floor(std::log(u) / std::log1p(-censor_prob)));
                censor = std::min(censor, d.t_max);
            }
            int entry = 1;
            if (d.truncated) {
                entry = 1 + rng.categorical({0.6, 0.2, 0.2});
                if (debug) ++debug->truncation_draws[entry - 1];
                censor = std::max(censor, 3);
                if (t_event != 0 && t_event < entry) {
                    // truncated out: regenerate the whole candidate
                    if (debug) ++debug->discarded;
                    detail::fill_covariate_row(covariates.row(i), d, rng);
                    continue;
                }
            }
            auto& o = obs[static_cast<std::size_t>(i)];
            o.subject_id = std::to_string(i);
            o.truncation = entry;
            o.event = t_event != 0 && t_event <= censor;
            o.time = o.event ? t_event : censor;
            o.covariates = covariates.row(i).transpose();
            if (debug) {
                debug->true_time[static_cast<std::size_t>(i)] = t_event;
                debug->censor_time[static_cast<std::size_t>(i)] = censor;
                debug->frailty[static_cast<std::size_t>(i)] = r;
            }
            break;
        }
    }
    return obs;
}

struct CensoringCalibration {
    double prob = 0.0;      // geometric parameter of C
    double achieved = 0.0;  // censored fraction on the pilot sample
};

/// Calibrates the geometric censoring parameter so the realized censoring
/// proportion over a pilot sample hits the design target within +-0.02.
/// Common random numbers across evaluations keep the search monotone.
/// Targets below the administrative-censoring floor return prob 0 (degenerate
/// C = t_max); targets above the achievable range are an error.
inline CensoringCalibration calibrate_censoring(const SimulationDesign& d, Rng& rng, int pilot_n = 10000) {
    d.validate();
    SimulationDesign pilot = d;
    pilot.n = pilot_n;
    const std::uint64_t eval_seed = rng.split(0x9eb1).seed();
    const auto censored_fraction = [&](double prob) {
        Rng local(eval_seed);
        Mat x = gen_correlated_covariates(pilot, local);
        const auto obs = gen_survival_times(x, pilot, local, prob);
        long c = 0;
        for (const auto& o : obs) c += o.event ? 0 : 1;
        return static_cast<double>(c) / static_cast<double>(pilot_n);
    };

    CensoringCalibration out;
    const double floor_frac = censored_fraction(0.0);
    if (d.censoring_target <= floor_frac) {
        out.prob = 0.0;
        out.achieved = floor_frac;
        return out;
    }
    double lo = 0.0, hi = 0.95;
    const double hi_frac = censored_fraction(hi);
    if (d.censoring_target > hi_frac + 0.02)
        throw numeric_error("calibrate_censoring: target censoring proportion is not achievable");
    double mid = 0.0, frac = floor_frac;
    for (int it = 0; it < 50 && std::abs(frac - d.censoring_target) > 0.005; ++it) {
        mid = 0.5 * (lo + hi);
        frac = censored_fraction(mid);
        (frac < d.censoring_target ? lo : hi) = mid;
    }
    out.prob = mid;
    out.achieved = frac;
    if (std::abs(out.achieved - d.censoring_target) > 0.02)
        throw numeric_error("calibrate_censoring: pilot proportion missed the target band");
    return out;
}

/// Selection and estimation error summaries for one replicate. Grouped dummies
/// count as individual variables; a group is captured when every member
/// coefficient is nonzero.
struct ReplicateMetrics {
    int fn = 0;
    int fp = 0;
    int ng_fn = 0;
    double sq_err = 0.0;
    std::vector<bool> group_captured;
};

inline ReplicateMetrics compute_metrics(const Vec& beta_hat, const SimulationDesign& d) {
    if (beta_hat.size() != d.p) throw validation_error("compute_metrics: coefficient length mismatch");
    const Vec truth = d.true_beta_vector();
    ReplicateMetrics m;
    for (int j = 0; j < d.p; ++j) {
        const bool true_nz = truth(j) != 0.0;
        const bool est_nz = beta_hat(j) != 0.0;
        if (true_nz && !est_nz) ++m.fn;
        if (!true_nz && est_nz) ++m.fp;
        const double e = beta_hat(j) - truth(j);
        m.sq_err += e * e;
    }
    for (int j : d.nongroup_support())
        if (beta_hat(j) == 0.0) ++m.ng_fn;
    for (const auto& g : d.group_index_sets()) {
        bool captured = true;
        for (int j : g) captured = captured && beta_hat(j) != 0.0;
        m.group_captured.push_back(captured);
    }
    return m;
}

inline ReplicateMetrics compute_metrics(const FitResult& fit, const SimulationDesign& d) {
    return compute_metrics(fit.params.beta, d);
}

struct ReplicateRecord {
    int replicate = 0;
    bool ok = false;
    std::string error;
    ReplicateMetrics metrics;
    double censored_frac = 0.0;
    double truncated_frac = 0.0;  // share of retained subjects entering late
    double discard_frac = 0.0;    // discarded candidates / (discarded + n)
    double alpha = 0.0, nu_baseline = 0.0, nu = 0.0;
    int selected_count = 0;
    int grid_nonconverged = 0;
};

struct ScenarioSummary {
    int replicates = 0;
    int failures = 0;
    double censor_prob = 0.0;
    double pilot_censoring = 0.0;
    double mean_fn = 0.0, sd_fn = 0.0;
    double mean_fp = 0.0, sd_fp = 0.0;
    double mean_ng_fn = 0.0, sd_ng_fn = 0.0;
    double med_sq_err = 0.0, sd_sq_err = 0.0;
    std::vector<double> group_capture_pct;
    double mean_censored = 0.0, mean_truncated_frac = 0.0, mean_discard_frac = 0.0;
    std::vector<ReplicateRecord> records;
};

struct ScenarioControls {
    TuningGrid grid;
    FitControls fit_controls;
    int threads = 0;
    std::string replicate_csv;  // empty = no file
    std::string summary_csv;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

/// Runs generate -> tune -> fit -> metrics per replicate with split seeds,
/// excludes failed replicates from the summaries and optionally writes the
/// per-replicate and summary CSV files.
inline ScenarioSummary run_scenario(const SimulationDesign& d, int replicates,
                                    const ScenarioControls& controls = ScenarioControls()) {
    d.validate();
    if (replicates < 1) throw validation_error("run_scenario: replicates must be >= 1");
    ScenarioSummary sum;
    sum.replicates = replicates;

    Rng calib_rng(derive_seed(d.seed, 0xca11));
    const auto calib = calibrate_censoring(d, calib_rng);
    sum.censor_prob = calib.prob;
    sum.pilot_censoring = calib.achieved;

    const auto group_sets = d.group_index_sets();
    sum.records.resize(static_cast<std::size_t>(replicates));
    parallel_for(
        replicates,
        [&](int r) {
            ReplicateRecord rec;
            rec.replicate = r;
            try {
                Rng rng(derive_seed(d.seed, 0x5e9d0000ULL + static_cast<std::uint64_t>(r)));
                Mat x = gen_correlated_covariates(d, rng);
                GenDebug dbg;
                const auto obs = gen_survival_times(x, d, rng, calib.prob, &dbg);
                const AugmentedDesign design = augment(obs, d.t_max, RandomEffectSpec::intercept());

                long censored = 0, late = 0;
                for (const auto& o : obs) {
                    censored += o.event ? 0 : 1;
                    late += o.truncation > 1 ? 1 : 0;
                }
                rec.censored_frac = static_cast<double>(censored) / static_cast<double>(d.n);
                rec.truncated_frac = static_cast<double>(late) / static_cast<double>(d.n);
                rec.discard_frac =
                    static_cast<double>(dbg.discarded) / static_cast<double>(dbg.discarded + d.n);

                TuningGrid grid = controls.grid;
                grid.seed = derive_seed(d.seed, 0x7e5700ULL + static_cast<std::uint64_t>(r));
                const auto gs = grid_search(design, grid, controls.fit_controls, group_sets);
                const auto& best = gs.best_fit();
                rec.metrics = compute_metrics(best, d);
                rec.alpha = gs.best.alpha;
                rec.nu_baseline = gs.best.nu_baseline;
                rec.nu = gs.best.nu;
                rec.selected_count = static_cast<int>(best.selected.size());
                rec.grid_nonconverged = gs.nonconverged;
                rec.ok = true;
            } catch (const std::exception& e) {
                rec.ok = false;
                rec.error = e.what();
            }
            sum.records[static_cast<std::size_t>(r)] = std::move(rec);
        },
        controls.threads);

    std::vector<double> fns, fps, ngs, ses, cens, trunc, disc;
    std::vector<long> captured(group_sets.size(), 0);
    long ok_count = 0;
    for (const auto& rec : sum.records) {
        if (!rec.ok) {
            ++sum.failures;
            continue;
        }
        ++ok_count;
        fns.push_back(rec.metrics.fn);
        fps.push_back(rec.metrics.fp);
        ngs.push_back(rec.metrics.ng_fn);
        ses.push_back(rec.metrics.sq_err);
        cens.push_back(rec.censored_frac);
        trunc.push_back(rec.truncated_frac);
        disc.push_back(rec.discard_frac);
        for (std::size_t g = 0; g < group_sets.size(); ++g)
            if (rec.metrics.group_captured[g]) ++captured[g];
    }
    if (ok_count > 0) {
        sum.mean_fn = mean(fns);
        sum.sd_fn = sample_sd(fns);
        sum.mean_fp = mean(fps);
        sum.sd_fp = sample_sd(fps);
        sum.mean_ng_fn = mean(ngs);
        sum.sd_ng_fn = sample_sd(ngs);
        sum.med_sq_err = median(ses);
        sum.sd_sq_err = sample_sd(ses);
        sum.mean_censored = mean(cens);
        sum.mean_truncated_frac = mean(trunc);
        sum.mean_discard_frac = mean(disc);
        for (std::size_t g = 0; g < group_sets.size(); ++g)
            sum.group_capture_pct.push_back(100.0 * static_cast<double>(captured[g]) /
                                            static_cast<double>(ok_count));
    }

    if (!controls.replicate_csv.empty()) {
        std::ofstream f(controls.replicate_csv);
        if (!f) throw validation_error("run_scenario: cannot write " + controls.replicate_csv);
        f << "replicate,ok,fn,fp,ng_fn,sq_err";
        for (std::size_t g = 0; g < group_sets.size(); ++g) f << ",grp" << g + 1;
        f << ",selected,censored_frac,truncated_frac,discard_frac,alpha,nu_baseline,nu,error\n";
        for (const auto& rec : sum.records) {
            f << rec.replicate << ',' << (rec.ok ? 1 : 0) << ',' << rec.metrics.fn << ',' << rec.metrics.fp
              << ',' << rec.metrics.ng_fn << ',' << detail::fmt_g(rec.metrics.sq_err);
            for (std::size_t g = 0; g < group_sets.size(); ++g)
                f << ',' << (rec.ok && rec.metrics.group_captured[g] ? 1 : 0);
            f << ',' << rec.selected_count << ',' << detail::fmt_g(rec.censored_frac) << ','
              << detail::fmt_g(rec.truncated_frac) << ',' << detail::fmt_g(rec.discard_frac) << ','
              << detail::fmt_g(rec.alpha) << ',' << detail::fmt_g(rec.nu_baseline) << ','
              << detail::fmt_g(rec.nu) << ',' << rec.error << '\n';
        }
    }
    if (!controls.summary_csv.empty()) {
        std::ofstream f(controls.summary_csv);
        if (!f) throw validation_error("run_scenario: cannot write " + controls.summary_csv);
        f << "n,p,cn_target,cn_pilot,cn_mean,tr_frac,discard_frac,replicates,failures,"
             "mean_fn,sd_fn,mean_fp,sd_fp,mean_ng_fn,sd_ng_fn,med_sq_err,sd_sq_err";
        for (std::size_t g = 0; g < sum.group_capture_pct.size(); ++g) f << ",grp" << g + 1 << "_pct";
        f << '\n';
        f << d.n << ',' << d.p << ',' << detail::fmt_g(d.censoring_target) << ','
          << detail::fmt_g(sum.pilot_censoring) << ',' << detail::fmt_g(sum.mean_censored) << ','
          << detail::fmt_g(sum.mean_truncated_frac) << ',' << detail::fmt_g(sum.mean_discard_frac) << ','
          << sum.replicates << ',' << sum.failures << ',' << detail::fmt_g(sum.mean_fn) << ','
          << detail::fmt_g(sum.sd_fn) << ',' << detail::fmt_g(sum.mean_fp) << ',' << detail::fmt_g(sum.sd_fp)
          << ',' << detail::fmt_g(sum.mean_ng_fn) << ',' << detail::fmt_g(sum.sd_ng_fn) << ','
          << detail::fmt_g(sum.med_sq_err) << ',' << detail::fmt_g(sum.sd_sq_err);
        for (double pct : sum.group_capture_pct) f << ',' << detail::fmt_g(pct);
        f << '\n';
    }
    return sum;
}

}  // namespace dsnet
