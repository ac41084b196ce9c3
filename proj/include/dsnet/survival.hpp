#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dsnet/common.hpp"

namespace dsnet {

/// One subject's discrete survival record: observed cycle `time` (event or
/// censoring), entry cycle `truncation` (1 = observed from the start), event
/// indicator and the time-constant covariate vector.
struct SurvivalObservation {
    std::string subject_id;
    int time = 1;
    int truncation = 1;
    bool event = false;
    Vec covariates;
};

/// Random-effect design per subject: q effects with row z_{is} at risk cycle s.
/// The default is a random intercept (q = 1, z == 1).
struct RandomEffectSpec {
    int q = 1;
    std::function<Eigen::RowVectorXd(const SurvivalObservation&, int s)> design;

    static RandomEffectSpec intercept() { return RandomEffectSpec{}; }
    static RandomEffectSpec none() { return RandomEffectSpec{0, nullptr}; }
};

/// Stacked pseudo-binary observations. Subject i occupies the contiguous row
/// range [row_start[i], row_start[i+1]) covering risk cycles l_i..t_i. The
/// baseline indicator block A is held implicitly through risk_time (row r has
/// a single 1 at column risk_time[r] of t_max).
struct AugmentedDesign {
    Vec y;              // pseudo responses, 0/1
    Mat x;              // N x p fixed-covariate block (rows repeat within subject)
    IVec risk_time;     // 1..t_max per row
    IVec subject;       // 0..n-1 per row
    Mat z;              // N x q random-effect design rows
    std::vector<int> row_start;  // size n+1
    int t_max = 0;
    int n_subjects = 0;
    int q = 1;

    Eigen::Index rows() const { return y.size(); }
    int p() const { return static_cast<int>(x.cols()); }
    /// Flat parameter dimension: beta0, beta, gamma, b.
    int dim() const { return 1 + p() + t_max + q * n_subjects; }
    int gamma_offset() const { return 1 + p(); }
    int b_offset() const { return 1 + p() + t_max; }

    /// Dense baseline indicator block A (tests and small problems only).
    Mat baseline_block() const {
        Mat a = Mat::Zero(rows(), t_max);
        for (Eigen::Index r = 0; r < rows(); ++r) a(r, risk_time(r) - 1) = 1.0;
        return a;
    }

    /// Dense H^T = [1 | X | A | Z] with Z expanded block-diagonally by subject.
    /// Only intended for small instances; the solver works with the implicit form.
    Mat dense_design() const {
        Mat h = Mat::Zero(rows(), dim());
        for (Eigen::Index r = 0; r < rows(); ++r) {
            h(r, 0) = 1.0;
            for (int j = 0; j < p(); ++j) h(r, 1 + j) = x(r, j);
            h(r, gamma_offset() + risk_time(r) - 1) = 1.0;
            for (int k = 0; k < q; ++k) h(r, b_offset() + subject(r) * q + k) = z(r, k);
        }
        return h;
    }
};

/// Full parameter set theta = (beta0, beta, gamma, b) plus frailty covariance Q.
struct ModelParameters {
    double intercept = 0.0;
    Vec beta;
    Vec gamma;
    Vec b;            // length q * n, subject-major
    Mat frailty_cov;  // q x q

    static ModelParameters zeros(const AugmentedDesign& d, double q_init = 0.1) {
        ModelParameters p;
        p.beta = Vec::Zero(d.p());
        p.gamma = Vec::Zero(d.t_max);
        p.b = Vec::Zero(d.q * d.n_subjects);
        p.frailty_cov = q_init * Mat::Identity(d.q, d.q);
        return p;
    }

    Vec flat() const {
        Vec t(1 + beta.size() + gamma.size() + b.size());
        t(0) = intercept;
        t.segment(1, beta.size()) = beta;
        t.segment(1 + beta.size(), gamma.size()) = gamma;
        t.tail(b.size()) = b;
        return t;
    }

    void set_flat(const Vec& t) {
        intercept = t(0);
        beta = t.segment(1, beta.size());
        gamma = t.segment(1 + beta.size(), gamma.size());
        b = t.tail(b.size());
    }
};

/// Elastic-net configuration: strength nu, L1 mixing alpha in [0,1], ridge
/// nu_baseline on the baseline parameters, optional group structure over a
/// subset of the coefficient indices (remaining coefficients are singletons).
struct PenaltyConfig {
    double nu = 0.0;
    double alpha = 1.0;
    double nu_baseline = 1.0;
    std::vector<std::vector<int>> groups;

    void validate(int p) const {
        if (!(nu >= 0.0)) throw validation_error("penalty: nu must be >= 0");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw validation_error("penalty: alpha must be in [0,1]");
        if (!(nu_baseline > 0.0)) throw validation_error("penalty: nu_baseline must be > 0");
        std::vector<char> seen(static_cast<std::size_t>(p), 0);
        for (const auto& g : groups) {
            if (g.empty()) throw validation_error("penalty: empty group");
            for (int j : g) {
                if (j < 0 || j >= p) throw validation_error("penalty: group index out of range");
                if (seen[static_cast<std::size_t>(j)]) throw validation_error("penalty: overlapping groups");
                seen[static_cast<std::size_t>(j)] = 1;
            }
        }
    }

    /// group id per coefficient, -1 for singletons.
    std::vector<int> group_ids(int p) const {
        std::vector<int> ids(static_cast<std::size_t>(p), -1);
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (int j : groups[g]) ids[static_cast<std::size_t>(j)] = static_cast<int>(g);
        return ids;
    }
};

/// Discrete hazard under the logit link, evaluated sign-split so large |eta|
/// saturates without overflow and the result never rounds to exactly 0 or 1.
inline double hazard(double eta) {
    double p;
    if (eta >= 0.0) {
        p = 1.0 / (1.0 + std::exp(-eta));
    } else {
        const double e = std::exp(eta);
        p = e / (1.0 + e);
    }
    constexpr double lo = 1e-300;
    constexpr double hi = 1.0 - 1.1102230246251565e-16;  // 1 - eps/2
    return std::min(std::max(p, lo), hi);
}

/// log lambda(eta), computed directly for accuracy in the tails.
inline double log_hazard(double eta) {
    return eta >= 0.0 ? -std::log1p(std::exp(-eta)) : eta - std::log1p(std::exp(eta));
}

/// log(1 - lambda(eta)) = log lambda(eta) - eta.
inline double log_one_minus_hazard(double eta) { return log_hazard(eta) - eta; }

/// Survivor probability S(t) = prod_{i<t} (1 - lambda_i) given the hazards at
/// cycles 1..t-1; the empty product gives S(1) = 1.
inline double survivor(const Vec& hazards) {
    double s = 1.0;
    for (Eigen::Index i = 0; i < hazards.size(); ++i) {
        const double l = hazards(i);
        if (!(l >= 0.0 && l <= 1.0)) throw validation_error("survivor: hazard outside [0,1]");
        s *= 1.0 - l;
    }
    return s;
}

/// Expands survival records into pseudo-binary rows: subject i contributes one
/// row per risk cycle s = l_i..t_i with response 0 except y_{i t_i} = delta_i.
inline AugmentedDesign augment(const std::vector<SurvivalObservation>& records, int t_max,
                               const RandomEffectSpec& spec = RandomEffectSpec::intercept()) {
    if (records.empty()) throw validation_error("augment: no records");
    if (spec.q < 0) throw validation_error("augment: negative random-effect count");
    const int p = static_cast<int>(records.front().covariates.size());
    long total = 0;
    for (const auto& r : records) {
        if (r.truncation < 1) throw validation_error("augment: truncation must be >= 1 (" + r.subject_id + ")");
        if (r.truncation > r.time) throw validation_error("augment: truncation after observed time (" + r.subject_id + ")");
        if (r.time > t_max) throw validation_error("augment: observed time exceeds t_max (" + r.subject_id + ")");
        if (static_cast<int>(r.covariates.size()) != p) throw validation_error("augment: covariate length mismatch (" + r.subject_id + ")");
        if (!r.covariates.allFinite()) throw validation_error("augment: nonfinite covariate (" + r.subject_id + ")");
        total += r.time - r.truncation + 1;
    }

    AugmentedDesign d;
    d.t_max = t_max;
    d.n_subjects = static_cast<int>(records.size());
    d.q = spec.q;
    d.y = Vec::Zero(total);
    d.x = Mat::Zero(total, p);
    d.risk_time = IVec::Zero(total);
    d.subject = IVec::Zero(total);
    d.z = Mat::Zero(total, std::max(spec.q, 0));
    d.row_start.assign(static_cast<std::size_t>(d.n_subjects) + 1, 0);

    Eigen::Index row = 0;
    for (int i = 0; i < d.n_subjects; ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        d.row_start[static_cast<std::size_t>(i)] = static_cast<int>(row);
        for (int s = r.truncation; s <= r.time; ++s, ++row) {
            d.y(row) = (s == r.time && r.event) ? 1.0 : 0.0;
            d.x.row(row) = r.covariates.transpose();
            d.risk_time(row) = s;
            d.subject(row) = i;
            if (spec.q > 0) {
                if (spec.design) {
                    Eigen::RowVectorXd zr = spec.design(r, s);
                    if (zr.size() != spec.q) throw validation_error("augment: random design row has wrong length");
                    d.z.row(row) = zr;
                } else {
                    d.z(row, 0) = 1.0;
                    for (int k = 1; k < spec.q; ++k) d.z(row, k) = 0.0;
                }
            }
        }
    }
    d.row_start[static_cast<std::size_t>(d.n_subjects)] = static_cast<int>(row);
    return d;
}

/// Linear predictor eta = beta0 + x'beta + gamma_s + z'b_i per pseudo-row.
inline Vec linear_predictor(const AugmentedDesign& d, const ModelParameters& m) {
    if (m.beta.size() != d.p() || m.gamma.size() != d.t_max || m.b.size() != d.q * d.n_subjects)
        throw validation_error("linear_predictor: parameter dimensions do not match design");
    Vec eta = Vec::Constant(d.rows(), m.intercept);
    // column sweep over the nonzero coefficients only
    for (int j = 0; j < d.p(); ++j)
        if (m.beta(j) != 0.0) eta += m.beta(j) * d.x.col(j);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        eta(r) += m.gamma(d.risk_time(r) - 1);
        if (d.q > 0) eta(r) += d.z.row(r).dot(m.b.segment(d.subject(r) * d.q, d.q));
    }
    return eta;
}

/// Binary log-likelihood of the augmented data with the random effects plugged in.
inline double log_likelihood(const AugmentedDesign& d, const ModelParameters& m) {
    const Vec eta = linear_predictor(d, m);
    double ll = 0.0;
    for (Eigen::Index r = 0; r < d.rows(); ++r)
        ll += d.y(r) == 1.0 ? log_hazard(eta(r)) : log_one_minus_hazard(eta(r));
    return ll;
}

/// Change in the linear predictor induced by a flat parameter displacement.
inline Vec linear_predictor_delta(const AugmentedDesign& d, const Vec& delta) {
    Vec out = Vec::Constant(d.rows(), delta(0));
    for (int j = 0; j < d.p(); ++j)
        if (delta(1 + j) != 0.0) out += delta(1 + j) * d.x.col(j);
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
        out(r) += delta(d.gamma_offset() + d.risk_time(r) - 1);
        if (d.q > 0) out(r) += d.z.row(r).dot(delta.segment(d.b_offset() + d.subject(r) * d.q, d.q));
    }
    return out;
}

namespace detail {

/// Inverse of Q with eigenvalues floored at `floor_eig`; sets `degenerate` when
/// flooring was needed.
inline Mat frailty_precision(const Mat& q_cov, double floor_eig, bool* degenerate = nullptr) {
    if (q_cov.rows() == 0) return Mat();
    Eigen::SelfAdjointEigenSolver<Mat> es(q_cov);
    Vec ev = es.eigenvalues();
    bool floored = false;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < floor_eig) {
            ev(i) = floor_eig;
            floored = true;
        }
    }
    if (degenerate) *degenerate = floored;
    return es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// Elastic-net penalty value on beta: plain or group form.
inline double coefficient_penalty(const Vec& beta, const PenaltyConfig& pen) {
    if (pen.nu == 0.0) return 0.0;
    double value = 0.0;
    std::vector<char> grouped(static_cast<std::size_t>(beta.size()), 0);
    for (const auto& g : pen.groups) {
        double norm2 = 0.0, ss = 0.0;
        for (int j : g) {
            norm2 += beta(j) * beta(j);
            grouped[static_cast<std::size_t>(j)] = 1;
        }
        ss = norm2;
        value += std::sqrt(static_cast<double>(g.size())) * pen.alpha * std::sqrt(norm2) + (1.0 - pen.alpha) * ss / 2.0;
    }
    for (Eigen::Index j = 0; j < beta.size(); ++j)
        if (!grouped[static_cast<std::size_t>(j)])
            value += pen.alpha * std::abs(beta(j)) + (1.0 - pen.alpha) * beta(j) * beta(j) / 2.0;
    return pen.nu * value;
}

/// Penalized objective from a precomputed linear predictor and frailty
/// precision; returns -inf style values instead of throwing so line searches
/// can reject bad candidates.
inline double objective_from_eta(const AugmentedDesign& d, const Vec& eta, const ModelParameters& m,
                                 const PenaltyConfig& pen, const Mat& q_prec) {
    double obj = 0.0;
    for (Eigen::Index r = 0; r < d.rows(); ++r)
        obj += d.y(r) == 1.0 ? log_hazard(eta(r)) : log_one_minus_hazard(eta(r));
    if (d.q > 0 && m.b.size() > 0) {
        for (int i = 0; i < d.n_subjects; ++i) {
            const auto bi = m.b.segment(i * d.q, d.q);
            obj -= 0.5 * bi.dot(q_prec * bi);
        }
    }
    obj -= coefficient_penalty(m.beta, pen);
    obj -= 0.5 * pen.nu_baseline * m.gamma.squaredNorm();
    return obj;
}

}  // namespace detail

/// Penalized approximate log-likelihood:
///   log f(y|theta) - b'Q_b^{-1}b/2 - nu * EN(beta) - nu_s * ||gamma||^2 / 2,
/// with the group form of EN when groups are configured.
inline double penalized_objective(const AugmentedDesign& d, const ModelParameters& m, const PenaltyConfig& pen,
                                  bool* degenerate_frailty = nullptr) {
    pen.validate(d.p());
    double obj = log_likelihood(d, m);
    if (d.q > 0 && m.b.size() > 0) {
        const Mat prec = detail::frailty_precision(m.frailty_cov, 1e-10, degenerate_frailty);
        for (int i = 0; i < d.n_subjects; ++i) {
            const auto bi = m.b.segment(i * d.q, d.q);
            obj -= 0.5 * bi.dot(prec * bi);
        }
    }
    obj -= detail::coefficient_penalty(m.beta, pen);
    obj -= 0.5 * pen.nu_baseline * m.gamma.squaredNorm();
    if (!std::isfinite(obj)) throw numeric_error("penalized_objective: nonfinite objective (divergence)");
    return obj;
}

}  // namespace dsnet
