#pragma once

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsnet/survival.hpp"

namespace dsnet {

/// Solver controls. The Fisher-scoring branch is enabled only once the chain
/// has run long enough and the active set has stopped moving, which keeps the
/// step inside a region where the modified gradient is continuous.
struct FitControls {
    double objective_rel_tol = 1e-8;
    double step_tol = 1e-6;
    double kkt_tol = 1e-5;
    int max_iterations = 5000;
    double max_step = 2.0;  // cap on ||delta theta||_inf per accepted step
    int fisher_from_iteration = 25;
    int fisher_stable_iterations = 5;
    bool lock_beta = false;      // null model: beta pinned at zero
    bool update_frailty = true;  // EM block updates of Q
    double frailty_floor = 1e-10;
    double group_zero_tol = 1e-8;
};

struct FitResult {
    ModelParameters params;
    bool converged = false;
    int iterations = 0;
    double objective = std::numeric_limits<double>::quiet_NaN();
    double log_lik = std::numeric_limits<double>::quiet_NaN();  // conditional binary loglik
    std::vector<int> selected;                                  // {j : beta_j != 0}
    double kkt_residual = std::numeric_limits<double>::infinity();
    std::vector<std::string> flags;
    // Post-selection refit only: asymptotic covariance over covariance_index
    // (flat ordering beta0, retained betas ascending, gamma 1..t_max).
    std::optional<Mat> covariance;
    std::vector<int> covariance_index;

    bool has_flag(const std::string& f) const {
        for (const auto& g : flags)
            if (g == f) return true;
        return false;
    }
};

/// Unpenalized score S(theta) = H [y - lambda(theta)] in the flat ordering.
inline Vec score_vector(const AugmentedDesign& d, const ModelParameters& m) {
    const Vec eta = linear_predictor(d, m);
    Vec resid(d.rows());
    for (Eigen::Index r = 0; r < d.rows(); ++r) resid(r) = d.y(r) - hazard(eta(r));
    Vec s = Vec::Zero(d.dim());
    s(0) = resid.sum();
    s.segment(1, d.p()) = d.x.transpose() * resid;
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        s(d.gamma_offset() + d.risk_time(r) - 1) += resid(r);
        for (int k = 0; k < d.q; ++k) s(d.b_offset() + d.subject(r) * d.q + k) += d.z(r, k) * resid(r);
    }
    return s;
}

/// Working state for one fit: current parameters with cached row-level
/// quantities and the (modified) score at those parameters.
struct OptimizerState {
    const AugmentedDesign* design = nullptr;
    PenaltyConfig penalty;
    ModelParameters params;
    Vec eta, lambda, weights, resid;
    Vec score;  // flat dim
    Vec spen;   // flat dim
    Mat q_prec;
    int iteration = 0;
    std::vector<int> active;  // beta indices with beta_j != 0

    Vec theta() const { return params.flat(); }
};

namespace detail {

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// Applies the modified-gradient case rules. Group blocks use the group
/// soft-threshold form; singletons use the three scalar cases.
inline Vec modified_score(const AugmentedDesign& d, const PenaltyConfig& pen, const ModelParameters& m,
                          const Vec& score, const Mat& q_prec, bool lock_beta) {
    const int p = d.p();
    Vec spen = score;
    const double na = pen.nu * pen.alpha;
    const double nr = pen.nu * (1.0 - pen.alpha);
    if (lock_beta) {
        spen.segment(1, p).setZero();
    } else {
        const auto gid = pen.group_ids(p);
        for (int j = 0; j < p; ++j) {
            if (gid[static_cast<std::size_t>(j)] >= 0) continue;
            const double sj = score(1 + j);
            const double bj = m.beta(j);
            if (bj != 0.0) {
                spen(1 + j) = sj - nr * bj - na * sgn(bj);
            } else if (std::abs(sj) > na) {
                spen(1 + j) = sj - na * sgn(sj);
            } else {
                spen(1 + j) = 0.0;
            }
        }
        for (const auto& g : pen.groups) {
            const double thr = na * std::sqrt(static_cast<double>(g.size()));
            double bnorm = 0.0, snorm = 0.0;
            for (int j : g) {
                bnorm += m.beta(j) * m.beta(j);
                snorm += score(1 + j) * score(1 + j);
            }
            bnorm = std::sqrt(bnorm);
            snorm = std::sqrt(snorm);
            if (bnorm > 0.0) {
                for (int j : g) spen(1 + j) = score(1 + j) - nr * m.beta(j) - thr * m.beta(j) / bnorm;
            } else if (snorm > thr && snorm > 0.0) {
                const double shrink = 1.0 - thr / snorm;
                for (int j : g) spen(1 + j) = shrink * score(1 + j);
            } else {
                for (int j : g) spen(1 + j) = 0.0;
            }
        }
    }
    for (int mth = 0; mth < d.t_max; ++mth)
        spen(d.gamma_offset() + mth) = score(d.gamma_offset() + mth) - pen.nu_baseline * m.gamma(mth);
    if (d.q > 0) {
        for (int i = 0; i < d.n_subjects; ++i) {
            spen.segment(d.b_offset() + i * d.q, d.q) =
                score.segment(d.b_offset() + i * d.q, d.q) - q_prec * m.b.segment(i * d.q, d.q);
        }
    }
    return spen;
}

/// KKT residual at (params, score): stationarity on the smooth blocks, the
/// subgradient bounds on inactive coefficients and groups.
inline double kkt_residual(const AugmentedDesign& d, const PenaltyConfig& pen, const ModelParameters& m,
                           const Vec& score, const Mat& q_prec, bool lock_beta) {
    const double na = pen.nu * pen.alpha;
    const double nr = pen.nu * (1.0 - pen.alpha);
    double res = std::abs(score(0));
    if (!lock_beta) {
        const auto gid = pen.group_ids(d.p());
        for (int j = 0; j < d.p(); ++j) {
            if (gid[static_cast<std::size_t>(j)] >= 0) continue;
            const double sj = score(1 + j);
            const double bj = m.beta(j);
            if (bj != 0.0)
                res = std::max(res, std::abs(sj - nr * bj - na * sgn(bj)));
            else
                res = std::max(res, std::max(0.0, std::abs(sj) - na));
        }
        for (const auto& g : pen.groups) {
            const double thr = na * std::sqrt(static_cast<double>(g.size()));
            double bnorm = 0.0, snorm = 0.0;
            for (int j : g) {
                bnorm += m.beta(j) * m.beta(j);
                snorm += score(1 + j) * score(1 + j);
            }
            bnorm = std::sqrt(bnorm);
            snorm = std::sqrt(snorm);
            if (bnorm > 0.0) {
                for (int j : g)
                    res = std::max(res, std::abs(score(1 + j) - nr * m.beta(j) - thr * m.beta(j) / bnorm));
            } else {
                res = std::max(res, std::max(0.0, snorm - thr));
            }
        }
    }
    for (int mth = 0; mth < d.t_max; ++mth)
        res = std::max(res, std::abs(score(d.gamma_offset() + mth) - pen.nu_baseline * m.gamma(mth)));
    if (d.q > 0) {
        for (int i = 0; i < d.n_subjects; ++i) {
            const Vec g = score.segment(d.b_offset() + i * d.q, d.q) - q_prec * m.b.segment(i * d.q, d.q);
            res = std::max(res, g.cwiseAbs().maxCoeff());
        }
    }
    return res;
}

/// Penalized Fisher blocks over the bordered structure
///   [ A  B ]      A: (beta0, free betas, gamma) incl. penalty diagonal
///   [ B' D ]      D: block-diagonal per subject incl. Q^{-1}
/// giving O(n) solves and the per-subject posterior variances V_ii.
struct FisherBlocks {
    std::vector<int> free_beta;
    int t_max = 0, n = 0, q = 0;
    Mat a;                   // f x f, symmetric
    Mat b;                   // f x (n*q)
    std::vector<Mat> d_inv;  // per-subject q x q inverses
    Mat m;                   // Schur complement A - sum_i B_i D_i^{-1} B_i'
    Eigen::LDLT<Mat> m_ldlt;
    bool ridge_applied = false;

    int f() const { return static_cast<int>(a.rows()); }
    int beta_pos(std::size_t k) const { return 1 + static_cast<int>(k); }
    int gamma_pos(int mth) const { return 1 + static_cast<int>(free_beta.size()) + mth; }
};

inline FisherBlocks compute_fisher_blocks(const AugmentedDesign& d, const Vec& weights, const PenaltyConfig& pen,
                                          const Mat& q_prec, const std::vector<int>& free_beta) {
    FisherBlocks fb;
    fb.free_beta = free_beta;
    fb.t_max = d.t_max;
    fb.n = d.n_subjects;
    fb.q = d.q;
    const int nb = static_cast<int>(free_beta.size());
    const int f = 1 + nb + d.t_max;
    fb.a = Mat::Zero(f, f);
    fb.b = Mat::Zero(f, std::max(1, d.q * d.n_subjects));

    Vec v(nb + 1);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        const double w = weights(r);
        if (w == 0.0) continue;
        v(0) = 1.0;
        for (int k = 0; k < nb; ++k) v(k + 1) = d.x(r, free_beta[static_cast<std::size_t>(k)]);
        const int gcol = 1 + nb + d.risk_time(r) - 1;
        fb.a.topLeftCorner(nb + 1, nb + 1).selfadjointView<Eigen::Lower>().rankUpdate(v, w);
        fb.a.col(gcol).head(nb + 1) += w * v;
        fb.a(gcol, gcol) += w;
        if (d.q > 0) {
            const int i = d.subject(r);
            for (int k = 0; k < d.q; ++k) {
                const double wz = w * d.z(r, k);
                fb.b.col(i * d.q + k).head(nb + 1) += wz * v;
                fb.b(gcol, i * d.q + k) += wz;
            }
        }
    }
    fb.a.topLeftCorner(nb + 1, nb + 1) =
        Mat(fb.a.topLeftCorner(nb + 1, nb + 1).selfadjointView<Eigen::Lower>());
    fb.a.bottomLeftCorner(d.t_max, nb + 1) = fb.a.topRightCorner(nb + 1, d.t_max).transpose();

    const double nr = pen.nu * (1.0 - pen.alpha);
    for (int k = 0; k < nb; ++k) fb.a(k + 1, k + 1) += nr;
    for (int mth = 0; mth < d.t_max; ++mth) fb.a(1 + nb + mth, 1 + nb + mth) += pen.nu_baseline;

    fb.m = fb.a;
    if (d.q > 0) {
        fb.d_inv.resize(static_cast<std::size_t>(d.n_subjects));
        Mat di(d.q, d.q);
        for (int i = 0; i < d.n_subjects; ++i) {
            di = q_prec;
            for (int r = d.row_start[static_cast<std::size_t>(i)];
                 r < d.row_start[static_cast<std::size_t>(i) + 1]; ++r) {
                const double w = weights(r);
                if (w == 0.0) continue;
                di.noalias() += w * d.z.row(r).transpose() * d.z.row(r);
            }
            Mat dinv = di.inverse();
            fb.d_inv[static_cast<std::size_t>(i)] = dinv;
            fb.m.noalias() -= fb.b.middleCols(i * d.q, d.q) * dinv * fb.b.middleCols(i * d.q, d.q).transpose();
        }
    }
    fb.m_ldlt.compute(fb.m);
    if (fb.m_ldlt.info() != Eigen::Success || !fb.m_ldlt.isPositive()) {
        // collinearity between baseline and active covariates
        fb.m.diagonal().array() += 1e-8;
        fb.m_ldlt.compute(fb.m);
        fb.ridge_applied = true;
    }
    return fb;
}

/// Solves F_free delta = rhs over (tilde, b), tilde = (beta0, free beta, gamma).
inline void solve_bordered(const FisherBlocks& fb, const Vec& rhs_tilde, const Vec& rhs_b, Vec& out_tilde,
                           Vec& out_b) {
    Vec s = rhs_tilde;
    if (fb.q > 0) {
        for (int i = 0; i < fb.n; ++i)
            s.noalias() -= fb.b.middleCols(i * fb.q, fb.q) *
                           (fb.d_inv[static_cast<std::size_t>(i)] * rhs_b.segment(i * fb.q, fb.q));
    }
    out_tilde = fb.m_ldlt.solve(s);
    if (fb.q > 0) {
        out_b.resize(fb.n * fb.q);
        for (int i = 0; i < fb.n; ++i)
            out_b.segment(i * fb.q, fb.q) =
                fb.d_inv[static_cast<std::size_t>(i)] *
                (rhs_b.segment(i * fb.q, fb.q) - fb.b.middleCols(i * fb.q, fb.q).transpose() * out_tilde);
    } else {
        out_b.resize(0);
    }
}

}  // namespace detail

/// Modified gradient of the penalized likelihood (Step 2 case analysis):
/// active coordinates get the full subgradient, inactive ones are soft
/// thresholded at nu*alpha, the smooth blocks subtract their penalty
/// gradients. The intercept stays unpenalized.
inline Vec penalized_score(const OptimizerState& st, const PenaltyConfig& pen) {
    return detail::modified_score(*st.design, pen, st.params, st.score, st.q_prec, false);
}

/// Group variant; requires a configured group structure (singleton groups
/// reduce to the scalar elastic-net cases).
inline Vec group_penalized_score(const OptimizerState& st, const PenaltyConfig& pen) {
    if (pen.groups.empty()) throw validation_error("group_penalized_score: penalty has no groups");
    return detail::modified_score(*st.design, pen, st.params, st.score, st.q_prec, false);
}

/// Dense penalized Fisher matrix F = H W H' + K with W = lambda(1-lambda) and
/// K = Diag(0, nu(1-alpha) I_p, nu_s I_tmax, Q_b^{-1}). Intended for small
/// instances and oracle checks; the solver works with the block form.
inline Mat fisher_matrix(const AugmentedDesign& d, const ModelParameters& m, const PenaltyConfig& pen) {
    const Vec eta = linear_predictor(d, m);
    const Mat h = d.dense_design();
    Vec w(d.rows());
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        const double l = hazard(eta(r));
        w(r) = l * (1.0 - l);
    }
    Mat fisher = h.transpose() * w.asDiagonal() * h;
    for (int j = 0; j < d.p(); ++j) fisher(1 + j, 1 + j) += pen.nu * (1.0 - pen.alpha);
    for (int mth = 0; mth < d.t_max; ++mth)
        fisher(d.gamma_offset() + mth, d.gamma_offset() + mth) += pen.nu_baseline;
    if (d.q > 0) {
        const Mat prec = detail::frailty_precision(m.frailty_cov, 1e-10);
        for (int i = 0; i < d.n_subjects; ++i)
            fisher.block(d.b_offset() + i * d.q, d.b_offset() + i * d.q, d.q, d.q) += prec;
    }
    return fisher;
}

/// Builds a refreshed optimizer state at the given parameters.
/// `skip_beta_score` leaves the beta segment of the score at zero (used by
/// null-model fits where beta is pinned and its score is not needed).
inline OptimizerState make_state(const AugmentedDesign& d, const ModelParameters& m, const PenaltyConfig& pen,
                                 double frailty_floor = 1e-10, bool skip_beta_score = false) {
    OptimizerState st;
    st.design = &d;
    st.penalty = pen;
    st.params = m;
    st.q_prec = d.q > 0 ? detail::frailty_precision(m.frailty_cov, frailty_floor) : Mat();
    st.eta = linear_predictor(d, m);
    st.lambda.resize(d.rows());
    st.weights.resize(d.rows());
    st.resid.resize(d.rows());
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        st.lambda(r) = hazard(st.eta(r));
        st.weights(r) = st.lambda(r) * (1.0 - st.lambda(r));
        st.resid(r) = d.y(r) - st.lambda(r);
    }
    st.score = Vec::Zero(d.dim());
    st.score(0) = st.resid.sum();
    if (!skip_beta_score) st.score.segment(1, d.p()) = d.x.transpose() * st.resid;
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        st.score(d.gamma_offset() + d.risk_time(r) - 1) += st.resid(r);
        for (int k = 0; k < d.q; ++k)
            st.score(d.b_offset() + d.subject(r) * d.q + k) += d.z(r, k) * st.resid(r);
    }
    st.spen = detail::modified_score(d, pen, m, st.score, st.q_prec, skip_beta_score);
    for (int j = 0; j < d.p(); ++j)
        if (m.beta(j) != 0.0) st.active.push_back(j);
    return st;
}

struct StepSizes {
    double t_edge = std::numeric_limits<double>::infinity();
    double t_opt = 0.0;
};

namespace detail {

/// Edge candidates come from the L1 geometry only: active singleton
/// coefficients whose modified gradient opposes their sign, and active groups
/// whose norm reaches (numerically) zero along the ray. Smooth coordinates
/// carry no kink and do not restrict the step.
inline double edge_step(const AugmentedDesign& d, const PenaltyConfig& pen, const ModelParameters& m,
                        const Vec& spen, double group_zero_tol) {
    double t_edge = std::numeric_limits<double>::infinity();
    if (pen.nu * pen.alpha <= 0.0) return t_edge;
    const auto gid = pen.group_ids(d.p());
    for (int j = 0; j < d.p(); ++j) {
        if (gid[static_cast<std::size_t>(j)] >= 0) continue;
        const double bj = m.beta(j), sj = spen(1 + j);
        if (bj != 0.0 && sj != 0.0 && sgn(bj) == -sgn(sj)) t_edge = std::min(t_edge, -bj / sj);
    }
    for (const auto& g : pen.groups) {
        double proj = 0.0, dnorm2 = 0.0, bnorm2 = 0.0;
        for (int j : g) {
            proj += m.beta(j) * spen(1 + j);
            dnorm2 += spen(1 + j) * spen(1 + j);
            bnorm2 += m.beta(j) * m.beta(j);
        }
        if (bnorm2 == 0.0 || dnorm2 == 0.0 || proj >= 0.0) continue;
        const double t_star = -proj / dnorm2;
        const double min_norm2 = std::max(0.0, bnorm2 - proj * proj / dnorm2);
        if (min_norm2 <= group_zero_tol * group_zero_tol) t_edge = std::min(t_edge, t_star);
    }
    return t_edge;
}

/// Directional curvature spen' F^pen spen through the implicit design.
inline double curvature(const AugmentedDesign& d, const PenaltyConfig& pen, const Vec& weights, const Mat& q_prec,
                        const Vec& spen) {
    double c = 0.0;
    std::vector<int> nz;
    for (int j = 0; j < d.p(); ++j)
        if (spen(1 + j) != 0.0) nz.push_back(j);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        if (weights(r) == 0.0) continue;
        double u = spen(0) + spen(d.gamma_offset() + d.risk_time(r) - 1);
        for (int j : nz) u += d.x(r, j) * spen(1 + j);
        for (int k = 0; k < d.q; ++k) u += d.z(r, k) * spen(d.b_offset() + d.subject(r) * d.q + k);
        c += weights(r) * u * u;
    }
    const double nr = pen.nu * (1.0 - pen.alpha);
    for (int j : nz) c += nr * spen(1 + j) * spen(1 + j);
    for (int mth = 0; mth < d.t_max; ++mth) {
        const double s = spen(d.gamma_offset() + mth);
        c += pen.nu_baseline * s * s;
    }
    if (d.q > 0)
        for (int i = 0; i < d.n_subjects; ++i) {
            const Vec si = spen.segment(d.b_offset() + i * d.q, d.q);
            c += si.dot(q_prec * si);
        }
    return c;
}

}  // namespace detail

/// Edge step length (first sign change along the ray) and the gradient-ascent
/// step length t_opt = ||spen||_2 / (spen' F^pen spen).
inline StepSizes step_sizes(const OptimizerState& st, double group_zero_tol = 1e-8) {
    StepSizes sz;
    const double norm = st.spen.norm();
    if (norm == 0.0) throw validation_error("step_sizes: penalized score is identically zero");
    sz.t_edge = detail::edge_step(*st.design, st.penalty, st.params, st.spen, group_zero_tol);
    const double c = detail::curvature(*st.design, st.penalty, st.weights, st.q_prec, st.spen);
    if (!(c > 0.0)) throw numeric_error("step_sizes: nonpositive curvature (degenerate Fisher matrix)");
    sz.t_opt = norm / c;
    return sz;
}

namespace detail {

enum class StepBranch { edge, fisher, gradient, none };

struct StepDecision {
    StepBranch branch = StepBranch::none;
    Vec delta;             // flat displacement
    bool at_edge = false;  // delta lands the minimizing coordinate(s) at zero
};

/// Limit sign after an infinitesimal move along spen.
inline double sign_plus(double theta_i, double spen_i) { return theta_i != 0.0 ? sgn(theta_i) : sgn(spen_i); }

/// The three-branch step rule: edge step when the gradient step would cross a
/// kink first, otherwise the Fisher-scoring point when it keeps every kinked
/// coordinate on its current side, otherwise the plain gradient step.
/// `fisher_step` returns the Fisher displacement or nullopt when the branch is
/// unavailable (gate closed or solve failed); steps over `max_step` reject the
/// Fisher branch and scale the gradient branches.
inline StepDecision choose_ascent_step(const Vec& theta, const Vec& spen,
                                       const std::vector<unsigned char>& kinked, double t_edge, double t_opt,
                                       double max_step,
                                       const std::function<std::optional<Vec>()>& fisher_step) {
    StepDecision dec;
    const double inf_norm = spen.cwiseAbs().maxCoeff();
    if (inf_norm == 0.0) return dec;
    if (t_opt >= t_edge) {
        const double t = std::min(t_edge, max_step / inf_norm);
        dec.branch = StepBranch::edge;
        dec.delta = t * spen;
        dec.at_edge = (t == t_edge);
        return dec;
    }
    if (fisher_step) {
        if (auto fs = fisher_step()) {
            const Vec& delta = *fs;
            bool ok = delta.cwiseAbs().maxCoeff() <= max_step;
            for (Eigen::Index i = 0; ok && i < theta.size(); ++i) {
                if (!kinked[static_cast<std::size_t>(i)]) continue;
                if (theta(i) == 0.0 && spen(i) == 0.0)
                    ok = delta(i) == 0.0;
                else
                    ok = sgn(theta(i) + delta(i)) == sign_plus(theta(i), spen(i));
            }
            if (ok) {
                dec.branch = StepBranch::fisher;
                dec.delta = delta;
                return dec;
            }
        }
    }
    const double t = std::min(t_opt, max_step / inf_norm);
    dec.branch = StepBranch::gradient;
    dec.delta = t * spen;
    return dec;
}

}  // namespace detail

/// One theta block update (Step 2): picks the branch and applies the full
/// step, landing edge coordinates exactly at zero. Backtracking against the
/// objective is the fit loop's job; this returns the raw update.
inline ModelParameters ascent_update(const OptimizerState& st, bool allow_fisher = true,
                                     const FitControls& ctrl = FitControls()) {
    const AugmentedDesign& d = *st.design;
    const StepSizes sz = step_sizes(st, ctrl.group_zero_tol);

    std::vector<unsigned char> kinked(static_cast<std::size_t>(d.dim()), 0);
    if (st.penalty.nu * st.penalty.alpha > 0.0) {
        const auto gid = st.penalty.group_ids(d.p());
        for (int j = 0; j < d.p(); ++j)
            if (gid[static_cast<std::size_t>(j)] < 0) kinked[static_cast<std::size_t>(1 + j)] = 1;
    }

    std::function<std::optional<Vec>()> fisher;
    if (allow_fisher) {
        fisher = [&]() -> std::optional<Vec> {
            std::vector<int> free_beta;
            for (int j = 0; j < d.p(); ++j)
                if (st.params.beta(j) != 0.0 || st.spen(1 + j) != 0.0) free_beta.push_back(j);
            const auto fb = detail::compute_fisher_blocks(d, st.weights, st.penalty, st.q_prec, free_beta);
            Vec rhs_t(fb.f());
            rhs_t(0) = st.spen(0);
            for (std::size_t k = 0; k < free_beta.size(); ++k) rhs_t(fb.beta_pos(k)) = st.spen(1 + free_beta[k]);
            for (int mth = 0; mth < d.t_max; ++mth) rhs_t(fb.gamma_pos(mth)) = st.spen(d.gamma_offset() + mth);
            const Vec rhs_b = st.spen.tail(d.q * d.n_subjects);
            Vec out_t, out_b;
            detail::solve_bordered(fb, rhs_t, rhs_b, out_t, out_b);
            if (!out_t.allFinite() || !out_b.allFinite()) return std::nullopt;
            Vec delta = Vec::Zero(d.dim());
            delta(0) = out_t(0);
            for (std::size_t k = 0; k < free_beta.size(); ++k) delta(1 + free_beta[k]) = out_t(fb.beta_pos(k));
            for (int mth = 0; mth < d.t_max; ++mth) delta(d.gamma_offset() + mth) = out_t(fb.gamma_pos(mth));
            delta.tail(d.q * d.n_subjects) = out_b;
            return delta;
        };
    }

    const auto dec =
        detail::choose_ascent_step(st.theta(), st.spen, kinked, sz.t_edge, sz.t_opt, ctrl.max_step, fisher);
    ModelParameters next = st.params;
    if (dec.branch == detail::StepBranch::none) return next;
    Vec theta = st.theta() + dec.delta;
    if (dec.branch == detail::StepBranch::edge && dec.at_edge) {
        for (int j = 0; j < d.p(); ++j) {
            if (!kinked[static_cast<std::size_t>(1 + j)]) continue;
            const double bj = st.params.beta(j), sj = st.spen(1 + j);
            if (bj != 0.0 && sj != 0.0 && detail::sgn(bj) == -detail::sgn(sj) &&
                std::abs(-bj / sj - sz.t_edge) <= 1e-12 * std::max(1.0, sz.t_edge))
                theta(1 + j) = 0.0;
        }
    }
    next.set_flat(theta);
    return next;
}

/// EM block update of the frailty covariance (Step 3):
///   Q_hat = sum_i (V_ii + b_i b_i') / n
/// with V_ii the subject block of the inverse penalized Fisher matrix over
/// theta_tilde = (gamma, beta0, active betas) plus the random-effect border.
inline Mat em_update_frailty(const OptimizerState& st, const AugmentedDesign& d) {
    if (d.q == 0) throw validation_error("em_update_frailty: design has no random effects");
    std::vector<int> active;
    for (int j = 0; j < d.p(); ++j)
        if (st.params.beta(j) != 0.0) active.push_back(j);
    const auto fb = detail::compute_fisher_blocks(d, st.weights, st.penalty, st.q_prec, active);
    Mat q_hat = Mat::Zero(d.q, d.q);
    for (int i = 0; i < d.n_subjects; ++i) {
        const Mat& dinv = fb.d_inv[static_cast<std::size_t>(i)];
        const Mat bi = fb.b.middleCols(i * d.q, d.q);  // f x q
        const Mat w = fb.m_ldlt.solve(bi * dinv);      // f x q
        Mat v = dinv + dinv * bi.transpose() * w;      // V_ii
        const auto bvec = st.params.b.segment(i * d.q, d.q);
        q_hat += v + bvec * bvec.transpose();
    }
    q_hat /= static_cast<double>(d.n_subjects);
    return 0.5 * (q_hat + q_hat.transpose());
}

namespace detail {

/// Average of per-subject posterior second moments (the EM M-step reduction).
inline Mat frailty_covariance_from_moments(const std::vector<Mat>& v, const std::vector<Vec>& b) {
    if (v.empty() || v.size() != b.size()) throw validation_error("frailty moments: size mismatch");
    Mat q = Mat::Zero(v.front().rows(), v.front().cols());
    for (std::size_t i = 0; i < v.size(); ++i) q += v[i] + b[i] * b[i].transpose();
    q /= static_cast<double>(v.size());
    return 0.5 * (q + q.transpose());
}

inline std::vector<int> nonzero_betas(const ModelParameters& m) {
    std::vector<int> s;
    for (Eigen::Index j = 0; j < m.beta.size(); ++j)
        if (m.beta(j) != 0.0) s.push_back(static_cast<int>(j));
    return s;
}

}  // namespace detail

/// Fits the penalized model by alternating theta block updates (modified
/// gradient ascent with the sign-respecting branch rule) and EM updates of Q.
/// Convergence requires a small relative objective change, small steps in
/// both blocks, and a KKT residual under controls.kkt_tol.
inline FitResult fit(const AugmentedDesign& d, const PenaltyConfig& pen,
                     const std::optional<ModelParameters>& init = std::nullopt,
                     const FitControls& ctrl = FitControls()) {
    pen.validate(d.p());
    FitResult out;
    ModelParameters cur = init ? *init : ModelParameters::zeros(d);
    if (!init) {
        const double rate = std::min(std::max(d.y.mean(), 1e-6), 1.0 - 1e-6);
        cur.intercept = std::log(rate / (1.0 - rate));
    }
    if (ctrl.lock_beta) cur.beta.setZero();

    bool q_degenerate = false;
    if (d.q > 0) detail::frailty_precision(cur.frailty_cov, ctrl.frailty_floor, &q_degenerate);
    OptimizerState st = make_state(d, cur, pen, ctrl.frailty_floor, ctrl.lock_beta);

    double obj = detail::objective_from_eta(d, st.eta, st.params, pen, st.q_prec);
    double prev_obj = obj;
    double last_step = std::numeric_limits<double>::infinity();
    double last_q_step = std::numeric_limits<double>::infinity();
    if (d.q == 0 || !ctrl.update_frailty) last_q_step = 0.0;
    std::vector<int> prev_active = st.active;
    int stable_active = 0;
    bool ascent_violation = false, stalled = false;

    int it = 0;
    for (; it < ctrl.max_iterations; ++it) {
        st.iteration = it;
        const double kkt = detail::kkt_residual(d, pen, st.params, st.score, st.q_prec, ctrl.lock_beta);
        out.kkt_residual = kkt;
        const double obj_change = std::abs(obj - prev_obj);
        if (it > 0 && obj_change <= ctrl.objective_rel_tol * (1.0 + std::abs(obj)) &&
            last_step < ctrl.step_tol && last_q_step < ctrl.step_tol && kkt <= ctrl.kkt_tol) {
            out.converged = true;
            break;
        }

        // ---- Step 2: theta block ----
        double applied_step = 0.0;
        if (st.spen.cwiseAbs().maxCoeff() > 0.0) {
            bool entering_group = false;
            for (const auto& g : pen.groups) {
                double bn = 0.0, sn = 0.0;
                for (int j : g) {
                    bn += st.params.beta(j) * st.params.beta(j);
                    sn += st.spen(1 + j) * st.spen(1 + j);
                }
                if (bn == 0.0 && sn > 0.0) entering_group = true;
            }
            const bool gate = it >= ctrl.fisher_from_iteration &&
                              stable_active >= ctrl.fisher_stable_iterations && !entering_group;

            ModelParameters proposal = ascent_update(st, gate, ctrl);
            const Vec delta = proposal.flat() - st.theta();
            const Vec delta_eta = linear_predictor_delta(d, delta);

            // backtrack on the fixed-Q objective so accepted steps never descend
            const double slack = 1e-10 * (1.0 + std::abs(obj));
            double scale = 1.0;
            ModelParameters cand = st.params;
            bool accepted = false;
            for (int h = 0; h < 40; ++h) {
                if (scale == 1.0) {
                    cand = proposal;  // preserves exact zero landings
                } else {
                    cand.set_flat(st.theta() + scale * delta);
                }
                const double cand_obj =
                    detail::objective_from_eta(d, st.eta + scale * delta_eta, cand, pen, st.q_prec);
                if (cand_obj >= obj - slack) {
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if (accepted) {
                for (const auto& g : pen.groups) {
                    double bn = 0.0;
                    for (int j : g) bn += cand.beta(j) * cand.beta(j);
                    if (bn > 0.0 && std::sqrt(bn) <= ctrl.group_zero_tol)
                        for (int j : g) cand.beta(j) = 0.0;
                }
                applied_step = (cand.flat() - st.theta()).cwiseAbs().maxCoeff();
                st.params = std::move(cand);
            } else {
                stalled = true;
            }
        }
        last_step = applied_step;

        // ---- Step 3: Q block (EM) ----
        st = make_state(d, st.params, pen, ctrl.frailty_floor, ctrl.lock_beta);
        if (d.q > 0 && ctrl.update_frailty) {
            Mat q_new = em_update_frailty(st, d);
            last_q_step = (q_new - st.params.frailty_cov).cwiseAbs().maxCoeff();
            st.params.frailty_cov = q_new;
            bool floored = false;
            st.q_prec = detail::frailty_precision(q_new, ctrl.frailty_floor, &floored);
            st.spen = detail::modified_score(d, pen, st.params, st.score, st.q_prec, ctrl.lock_beta);
            q_degenerate = q_degenerate || floored;
        }

        prev_obj = obj;
        obj = detail::objective_from_eta(d, st.eta, st.params, pen, st.q_prec);
        if (obj < prev_obj - 1e-8 * (1.0 + std::abs(prev_obj)) && last_q_step == 0.0) ascent_violation = true;
        auto active_now = detail::nonzero_betas(st.params);
        stable_active = active_now == prev_active ? stable_active + 1 : 0;
        prev_active = std::move(active_now);
    }

    out.params = st.params;
    out.iterations = it;
    out.objective = obj;
    out.log_lik = log_likelihood(d, st.params);
    out.selected = detail::nonzero_betas(st.params);
    if (q_degenerate) out.flags.push_back("degenerate_frailty");
    if (ascent_violation) out.flags.push_back("ascent_violation");
    if (stalled && !out.converged) out.flags.push_back("stalled");
    if (!out.converged && it >= ctrl.max_iterations) out.flags.push_back("max_iterations");
    return out;
}

/// Restriction of a design to a subset of covariate columns.
inline AugmentedDesign restrict_columns(const AugmentedDesign& d, const std::vector<int>& keep) {
    AugmentedDesign r = d;
    r.x.resize(d.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        if (keep[k] < 0 || keep[k] >= d.p()) throw validation_error("restrict_columns: index out of range");
        r.x.col(static_cast<Eigen::Index>(k)) = d.x.col(keep[k]);
    }
    return r;
}

/// Post-selection refit: maximizes the objective with the elastic-net penalty
/// removed on the retained coefficients (baseline ridge and frailty kept) via
/// Fisher scoring with EM updates of Q, and returns the asymptotic covariance
/// of (beta0, retained betas, gamma) = the corresponding block of the inverse
/// penalized Fisher matrix with Q fixed at its final EM value.
inline FitResult refit_selected(const AugmentedDesign& d, const std::vector<int>& selected, double nu_baseline,
                                const FitControls& ctrl = FitControls()) {
    std::vector<int> keep = selected;
    std::sort(keep.begin(), keep.end());
    keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
    const AugmentedDesign sub = restrict_columns(d, keep);

    PenaltyConfig pen;
    pen.nu = 0.0;
    pen.alpha = 1.0;
    pen.nu_baseline = nu_baseline;
    FitControls rc = ctrl;
    rc.lock_beta = false;
    rc.fisher_from_iteration = 0;  // no kinks at nu = 0: Fisher scoring from the start
    rc.fisher_stable_iterations = 0;

    FitResult res = fit(sub, pen, std::nullopt, rc);

    // map back to the full coefficient space
    ModelParameters full = res.params;
    full.beta = Vec::Zero(d.p());
    for (std::size_t k = 0; k < keep.size(); ++k) full.beta(keep[k]) = res.params.beta(static_cast<Eigen::Index>(k));
    res.params = full;
    res.selected = detail::nonzero_betas(full);

    for (std::size_t k = 0; k < keep.size(); ++k)
        if (std::abs(full.beta(keep[k])) > 50.0) {
            res.flags.push_back("possible_separation");
            break;
        }

    // covariance with Q fixed: Schur complement over (beta0, betas, gamma)
    ModelParameters reduced = res.params;
    reduced.beta = Vec(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k)
        reduced.beta(static_cast<Eigen::Index>(k)) = full.beta(keep[k]);
    std::vector<int> all_beta(keep.size());
    for (std::size_t k = 0; k < keep.size(); ++k) all_beta[k] = static_cast<int>(k);
    OptimizerState sub_state = make_state(sub, reduced, pen, ctrl.frailty_floor);
    const auto fb = detail::compute_fisher_blocks(sub, sub_state.weights, pen, sub_state.q_prec, all_beta);
    Mat cov = fb.m_ldlt.solve(Mat::Identity(fb.f(), fb.f()));
    res.covariance = 0.5 * (cov + cov.transpose());
    if (fb.ridge_applied) res.flags.push_back("covariance_ridge");
    res.covariance_index.clear();
    res.covariance_index.push_back(0);
    for (int j : keep) res.covariance_index.push_back(1 + j);
    for (int mth = 0; mth < d.t_max; ++mth) res.covariance_index.push_back(d.gamma_offset() + mth);
    return res;
}

}  // namespace dsnet
