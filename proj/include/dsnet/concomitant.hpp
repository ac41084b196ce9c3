#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "dsnet/preprocess.hpp"

namespace dsnet {

/// Adaptive random-walk Metropolis-within-Gibbs settings for the stage-1 fit.
/// Priors: alpha0, alpha1 ~ N(0, prior_sd^2); kappa ~ Uniform(kappa_min, kappa_max).
/// Setting kappa_min == kappa_max pins kappa.
struct McmcControls {
    int chains = 3;
    int iterations = 10000;
    int burn_in = 5000;
    std::uint64_t seed = 1;
    double kappa_min = -3.0;
    double kappa_max = 3.0;
    double prior_sd = 10.0;

    void validate() const {
        if (chains < 1 || iterations < 10 || burn_in < 0 || burn_in >= iterations)
            throw validation_error("mcmc: bad chain configuration");
        if (!(kappa_min <= kappa_max)) throw validation_error("mcmc: kappa_min > kappa_max");
        if (!(prior_sd > 0.0)) throw validation_error("mcmc: prior_sd must be positive");
    }
};

/// Fitted concomitant adjustment for one lipophilic chemical.
struct ConcomitantModel {
    double kappa = 0.0;  // posterior median
    double alpha0 = 0.0, alpha1 = 0.0;
    double offset_kx = 1.0;
    std::vector<double> posterior_draws;  // pooled kappa draws, post burn-in
    double acceptance_alpha0 = 0.0, acceptance_alpha1 = 0.0, acceptance_kappa = 0.0;
    double ess_kappa = 0.0;
    double g_mean = 0.0, g_sd = 1.0;  // standardization of g at kappa-hat
    std::vector<std::string> flags;

    bool has_flag(const std::string& f) const {
        return std::find(flags.begin(), flags.end(), f) != flags.end();
    }
};

namespace detail {

inline double softplus(double eta) { return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

/// Bernoulli loglik of logit(p) = a0 + a1 * xstar.
inline double logit_loglik(const std::vector<int>& y, const Vec& xstar, double a0, double a1) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < xstar.size(); ++i) {
        const double eta = a0 + a1 * xstar(i);
        ll += (y[static_cast<std::size_t>(i)] ? eta : 0.0) - softplus(eta);
    }
    return ll;
}

/// Standardized Box-Cox ratio transform at a given power.
inline Vec standardized_g(const Vec& ratio_log, double kappa, double* out_mean = nullptr,
                          double* out_sd = nullptr) {
    Vec g(ratio_log.size());
    if (kappa == 0.0) {
        g = ratio_log;
    } else {
        for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = std::expm1(kappa * ratio_log(i)) / kappa;
    }
    const double m = g.mean();
    const double ss = (g.array() - m).square().sum();
    const double sd = std::sqrt(ss / static_cast<double>(g.size() - 1));
    if (!(sd > 0.0)) throw numeric_error("concomitant: transformed chemical has zero variance");
    if (out_mean) *out_mean = m;
    if (out_sd) *out_sd = sd;
    return (g.array() - m) / sd;
}

/// Effective sample size by the initial positive sequence of autocorrelations.
inline double ess_autocorr(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 10) return static_cast<double>(n);
    const double m = mean(x);
    double c0 = 0.0;
    for (double v : x) c0 += (v - m) * (v - m);
    c0 /= static_cast<double>(n);
    if (c0 <= 0.0) return static_cast<double>(n);
    double rho_sum = 0.0;
    for (std::size_t lag = 1; lag < n / 2; ++lag) {
        double c = 0.0;
        for (std::size_t i = 0; i + lag < n; ++i) c += (x[i] - m) * (x[i + lag] - m);
        c /= static_cast<double>(n);
        const double rho = c / c0;
        if (rho <= 0.0) break;
        rho_sum += rho;
    }
    return static_cast<double>(n) / (1.0 + 2.0 * rho_sum);
}

}  // namespace detail

/// Monte Carlo standard error of the mean by batch means.
inline double mcse_batch_means(const std::vector<double>& draws) {
    const std::size_t n = draws.size();
    if (n < 16) throw validation_error("mcse_batch_means: too few draws");
    const std::size_t nb = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
    const std::size_t len = n / nb;
    std::vector<double> bm;
    bm.reserve(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        double s = 0.0;
        for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += draws[i];
        bm.push_back(s / static_cast<double>(len));
    }
    return sample_sd(bm) / std::sqrt(static_cast<double>(nb));
}

/// Stage 1 of the lipid-concomitant procedure: Bayesian logistic regression of
/// the infertility indicator on the standardized generalized Box-Cox ratio,
/// with the power kappa sampled jointly; kappa-hat is the posterior median.
/// The transform is recomputed and re-standardized at every kappa proposal.
inline ConcomitantModel fit_concomitant_stage1(const Vec& chemical, const Vec& lipid,
                                               const std::vector<int>& infertile,
                                               const McmcControls& controls = McmcControls()) {
    controls.validate();
    const Eigen::Index n = chemical.size();
    if (lipid.size() != n || static_cast<Eigen::Index>(infertile.size()) != n)
        throw validation_error("concomitant: chemical, lipid and outcome lengths differ");
    if (n < 10) throw validation_error("concomitant: too few observations");

    ConcomitantModel model;
    model.offset_kx = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(chemical(i) >= 0.0)) throw validation_error("concomitant: negative chemical value");
        if (chemical(i) == 0.0) model.offset_kx = 1.0 + 1e-6;
    }
    if (model.offset_kx != 1.0) model.flags.push_back("kx_bumped");

    // precompute log((k_x + x)) / log(1 + s) on the log scale of the ratio
    Vec ratio_log(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(lipid(i) > 0.0)) throw validation_error("concomitant: lipid must be positive (row " + std::to_string(i) + ")");
        const double num = std::log(model.offset_kx + chemical(i));
        const double den = std::log1p(lipid(i));
        if (!(num > 0.0)) throw validation_error("concomitant: log(k_x + x) not positive (row " + std::to_string(i) + ")");
        ratio_log(i) = std::log(num / den);
    }

    const bool kappa_fixed = controls.kappa_min == controls.kappa_max;
    double rate = 0.0;
    for (int v : infertile) rate += v;
    rate = std::min(std::max(rate / static_cast<double>(n), 1e-3), 1.0 - 1e-3);

    std::vector<double> kappa_draws, a0_draws, a1_draws;
    std::vector<std::vector<double>> kappa_by_chain(static_cast<std::size_t>(controls.chains));
    long acc_a0 = 0, acc_a1 = 0, acc_k = 0, tot = 0;

    Rng master(controls.seed);
    for (int chain = 0; chain < controls.chains; ++chain) {
        Rng rng = master.split(static_cast<std::uint64_t>(chain));
        double a0 = std::log(rate / (1.0 - rate));
        double a1 = 0.0;
        double kappa = kappa_fixed ? controls.kappa_min
                                   : 0.5 * (controls.kappa_min + controls.kappa_max);
        Vec xstar = detail::standardized_g(ratio_log, kappa);
        double ll = detail::logit_loglik(infertile, xstar, a0, a1);
        const double prior_var = controls.prior_sd * controls.prior_sd;

        double s0 = 0.5, s1 = 0.5, sk = 0.5;
        int w0 = 0, w1 = 0, wk = 0, wn = 0;
        for (int it = 0; it < controls.iterations; ++it) {
            // alpha0
            {
                const double prop = a0 + s0 * rng.normal();
                const double ll_new = detail::logit_loglik(infertile, xstar, prop, a1);
                const double lr = ll_new - ll + (a0 * a0 - prop * prop) / (2.0 * prior_var);
                if (std::log(rng.uniform_pos()) < lr) {
                    a0 = prop;
                    ll = ll_new;
                    ++w0;
                    if (it >= controls.burn_in) ++acc_a0;
                }
            }
            // alpha1
            {
                const double prop = a1 + s1 * rng.normal();
                const double ll_new = detail::logit_loglik(infertile, xstar, a0, prop);
                const double lr = ll_new - ll + (a1 * a1 - prop * prop) / (2.0 * prior_var);
                if (std::log(rng.uniform_pos()) < lr) {
                    a1 = prop;
                    ll = ll_new;
                    ++w1;
                    if (it >= controls.burn_in) ++acc_a1;
                }
            }
            // kappa (uniform prior: reject outside the bounds)
            if (!kappa_fixed) {
                const double prop = kappa + sk * rng.normal();
                if (prop >= controls.kappa_min && prop <= controls.kappa_max) {
                    const Vec xstar_new = detail::standardized_g(ratio_log, prop);
                    const double ll_new = detail::logit_loglik(infertile, xstar_new, a0, a1);
                    if (std::log(rng.uniform_pos()) < ll_new - ll) {
                        kappa = prop;
                        xstar = xstar_new;
                        ll = ll_new;
                        ++wk;
                        if (it >= controls.burn_in) ++acc_k;
                    }
                }
            }
            ++wn;
            if (it >= controls.burn_in) ++tot;

            // proposal adaptation toward ~0.35 acceptance during burn-in
            if (it < controls.burn_in && wn == 50) {
                const auto adapt = [](double s, int acc) {
                    const double r = static_cast<double>(acc) / 50.0;
                    return std::clamp(s * std::exp(0.66 * (r - 0.35)), 1e-3, 50.0);
                };
                s0 = adapt(s0, w0);
                s1 = adapt(s1, w1);
                sk = adapt(sk, wk);
                w0 = w1 = wk = wn = 0;
            }
            if (it >= controls.burn_in) {
                kappa_draws.push_back(kappa);
                kappa_by_chain[static_cast<std::size_t>(chain)].push_back(kappa);
                a0_draws.push_back(a0);
                a1_draws.push_back(a1);
            }
        }
    }

    model.posterior_draws = kappa_draws;
    model.kappa = kappa_fixed ? controls.kappa_min : median(kappa_draws);
    model.alpha0 = mean(a0_draws);
    model.alpha1 = mean(a1_draws);
    model.acceptance_alpha0 = static_cast<double>(acc_a0) / static_cast<double>(tot);
    model.acceptance_alpha1 = static_cast<double>(acc_a1) / static_cast<double>(tot);
    model.acceptance_kappa = kappa_fixed ? 0.0 : static_cast<double>(acc_k) / static_cast<double>(tot);
    model.ess_kappa = 0.0;
    for (const auto& chain : kappa_by_chain) model.ess_kappa += detail::ess_autocorr(chain);

    detail::standardized_g(ratio_log, model.kappa, &model.g_mean, &model.g_sd);

    if (!kappa_fixed) {
        const auto bad = [](double a) { return a < 0.05 || a > 0.80; };
        if (bad(model.acceptance_alpha0) || bad(model.acceptance_alpha1) || bad(model.acceptance_kappa))
            model.flags.push_back("mcmc_mixing");
        const double range = controls.kappa_max - controls.kappa_min;
        if (model.kappa < controls.kappa_min + 0.05 * range || model.kappa > controls.kappa_max - 0.05 * range)
            model.flags.push_back("kappa_at_bound");
        const double prior_sd_unif = range / std::sqrt(12.0);
        if (sample_sd(kappa_draws) >= 0.85 * prior_sd_unif) model.flags.push_back("kappa_flat_posterior");
    } else {
        model.flags.push_back("kappa_fixed");
    }
    return model;
}

/// Stage 2: the standardized generalized Box-Cox ratio at the fitted power.
/// Standardization constants come from the data being transformed (each
/// imputed dataset is standardized on its own); lipid itself is dropped
/// downstream.
inline Vec transform_stage2(const Vec& chemical, const Vec& lipid, const ConcomitantModel& model) {
    const Eigen::Index n = chemical.size();
    if (lipid.size() != n) throw validation_error("transform_stage2: lengths differ");
    Vec g(n);
    for (Eigen::Index i = 0; i < n; ++i)
        g(i) = boxcox_generalized(chemical(i), lipid(i), model.kappa, model.offset_kx);
    const double m = g.mean();
    const double sd = std::sqrt((g.array() - m).square().sum() / static_cast<double>(n - 1));
    if (!(sd > 0.0)) throw numeric_error("transform_stage2: transformed chemical has zero variance");
    return (g.array() - m) / sd;
}

}  // namespace dsnet
