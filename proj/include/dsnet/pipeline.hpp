#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsnet/concomitant.hpp"
#include "dsnet/csv.hpp"
#include "dsnet/pooling.hpp"
#include "dsnet/preprocess.hpp"
#include "dsnet/simulation.hpp"
#include "dsnet/tuning.hpp"

namespace dsnet {

using json = nlohmann::json;

enum class LipidMode { covariate, concomitant };

/// Analysis configuration for the preprocess/fit commands. A single JSON file
/// with nested sections; every field has a paper-grid default.
struct AnalysisConfig {
    std::string link = "logit";
    int t_max = 0;  // 0 = max observed time
    std::uint64_t seed = 1;
    TuningGrid grid;
    std::optional<double> fixed_nu, fixed_alpha, fixed_nu_baseline;
    int selection_rule = 0;  // 0 = ceil(0.6 m)
    LodTable lod;
    LipidMode lipid_mode = LipidMode::covariate;
    std::string lipid_column;
    std::vector<std::string> lipophilic;
    std::map<std::string, double> binarize;
    McmcControls mcmc;
    int infertility_cycles = 12;

    TuningGrid effective_grid() const {
        TuningGrid g = grid;
        if (fixed_alpha) g.alphas = {*fixed_alpha};
        if (fixed_nu_baseline) g.nu_baselines = {*fixed_nu_baseline};
        return g;
    }

    int effective_rule(int m) const {
        if (selection_rule > 0) return selection_rule;
        return static_cast<int>(std::ceil(0.6 * static_cast<double>(m)));
    }
};

inline AnalysisConfig parse_analysis_config(const json& j) {
    AnalysisConfig c;
    if (j.contains("link")) c.link = j.at("link").get<std::string>();
    if (c.link != "logit") throw validation_error("config: only the logit link is supported");
    if (j.contains("t_max")) c.t_max = j.at("t_max").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        if (g.contains("alphas")) c.grid.alphas = g.at("alphas").get<std::vector<double>>();
        if (g.contains("nu_baselines")) c.grid.nu_baselines = g.at("nu_baselines").get<std::vector<double>>();
        if (g.contains("permutations")) c.grid.permutations = g.at("permutations").get<int>();
    }
    if (j.contains("fixed")) {
        const auto& f = j.at("fixed");
        if (f.contains("nu")) c.fixed_nu = f.at("nu").get<double>();
        if (f.contains("alpha")) c.fixed_alpha = f.at("alpha").get<double>();
        if (f.contains("nu_baseline")) c.fixed_nu_baseline = f.at("nu_baseline").get<double>();
    }
    if (j.contains("selection_rule")) c.selection_rule = j.at("selection_rule").get<int>();
    if (j.contains("lod")) {
        for (const auto& [name, e] : j.at("lod").items()) {
            LodEntry entry;
            entry.threshold = e.at("threshold").get<double>();
            const std::string pol = e.value("policy", "WOL");
            if (pol == "WL")
                entry.policy = LodPolicy::WL;
            else if (pol == "WOL")
                entry.policy = LodPolicy::WOL;
            else
                throw validation_error("config: lod policy must be WL or WOL");
            c.lod.entries[name] = entry;
        }
        c.lod.validate();
    }
    if (j.contains("lipid_mode")) {
        const std::string m = j.at("lipid_mode").get<std::string>();
        if (m == "covariate")
            c.lipid_mode = LipidMode::covariate;
        else if (m == "concomitant")
            c.lipid_mode = LipidMode::concomitant;
        else
            throw validation_error("config: lipid_mode must be covariate or concomitant");
    }
    if (j.contains("lipid_column")) c.lipid_column = j.at("lipid_column").get<std::string>();
    if (j.contains("lipophilic")) c.lipophilic = j.at("lipophilic").get<std::vector<std::string>>();
    if (j.contains("binarize"))
        for (const auto& [name, thr] : j.at("binarize").items()) c.binarize[name] = thr.get<double>();
    if (j.contains("mcmc")) {
        const auto& m = j.at("mcmc");
        if (m.contains("chains")) c.mcmc.chains = m.at("chains").get<int>();
        if (m.contains("iterations")) c.mcmc.iterations = m.at("iterations").get<int>();
        if (m.contains("burn_in")) c.mcmc.burn_in = m.at("burn_in").get<int>();
        if (m.contains("kappa_min")) c.mcmc.kappa_min = m.at("kappa_min").get<double>();
        if (m.contains("kappa_max")) c.mcmc.kappa_max = m.at("kappa_max").get<double>();
        c.mcmc.validate();
    }
    if (j.contains("infertility_cycles")) c.infertility_cycles = j.at("infertility_cycles").get<int>();
    if (c.lipid_mode == LipidMode::concomitant && c.lipid_column.empty())
        throw validation_error("config: concomitant lipid_mode requires lipid_column");
    return c;
}

inline AnalysisConfig load_analysis_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw validation_error("config: cannot open '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw validation_error("config: parse failure in '" + path + "': " + e.what());
    }
    return parse_analysis_config(j);
}

namespace detail {

inline const std::set<std::string>& reserved_columns() {
    static const std::set<std::string> cols = {"id", "time", "left", "status"};
    return cols;
}

inline bool is_binary_column(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (v(i) != 0.0 && v(i) != 1.0) return false;
    return true;
}

}  // namespace detail

/// Preprocessing pipeline (order matters): LOD policy on the raw scale, then
/// the lipid handling (concomitant mode fits stage 1 per lipophilic chemical,
/// applies stage 2 and drops lipid), then binarization of flagged covariates,
/// then the log-offset standardization of the remaining continuous columns.
struct PreprocessedData {
    CsvTable table;
    json report;
};

inline PreprocessedData preprocess_dataset(const CsvTable& raw, const AnalysisConfig& cfg) {
    const std::size_t nrows = raw.rows.size();
    if (nrows < 2) throw validation_error("preprocess: need at least 2 data rows");

    std::vector<std::string> covariates;
    for (const auto& h : raw.header)
        if (!detail::reserved_columns().count(h)) covariates.push_back(h);

    for (const auto& [name, e] : cfg.lod.entries) {
        (void)e;
        if (raw.column(name) < 0) throw validation_error("config: lod column '" + name + "' not in data");
    }
    for (const auto& [name, thr] : cfg.binarize) {
        (void)thr;
        if (raw.column(name) < 0) throw validation_error("config: binarize column '" + name + "' not in data");
    }
    for (const auto& name : cfg.lipophilic)
        if (raw.column(name) < 0) throw validation_error("config: lipophilic column '" + name + "' not in data");

    std::map<std::string, Vec> values;
    for (const auto& name : covariates) values[name] = raw.numeric_column(raw.require_column(name));

    json report;
    report["rows"] = nrows;

    // 1. LOD substitution on the raw scale
    json lod_report = json::object();
    for (const auto& [name, entry] : cfg.lod.entries) {
        const Vec before = values[name];
        values[name] = apply_lod_substitution(before, entry);
        long substituted = 0;
        for (Eigen::Index i = 0; i < before.size(); ++i)
            if (values[name](i) != before(i)) ++substituted;
        lod_report[name] = {{"policy", entry.policy == LodPolicy::WL ? "WL" : "WOL"},
                            {"threshold", entry.threshold},
                            {"substituted", substituted}};
    }
    report["lod"] = lod_report;

    // 2. lipid handling
    std::set<std::string> transformed;  // stage-2 outputs, already standardized
    bool drop_lipid = false;
    if (cfg.lipid_mode == LipidMode::concomitant) {
        if (raw.column(cfg.lipid_column) < 0)
            throw validation_error("config: lipid column '" + cfg.lipid_column + "' not in data");
        const Vec lipid = values.at(cfg.lipid_column);
        std::vector<int> infertile(nrows, 0);
        {
            const int tcol = raw.require_column("time");
            const int scol = raw.require_column("status");
            for (std::size_t i = 0; i < nrows; ++i) {
                const double t = raw.numeric(i, tcol);
                const double s = raw.numeric(i, scol);
                infertile[i] = (s == 1.0 && t <= cfg.infertility_cycles) ? 0 : 1;
            }
        }
        json chem_report = json::object();
        std::vector<std::string> chems = cfg.lipophilic;
        std::vector<ConcomitantModel> models(chems.size());
        parallel_for(static_cast<int>(chems.size()), [&](int k) {
            McmcControls mc = cfg.mcmc;
            mc.seed = derive_seed(cfg.seed, 0xc0c0 + static_cast<std::uint64_t>(k));
            models[static_cast<std::size_t>(k)] =
                fit_concomitant_stage1(values.at(chems[static_cast<std::size_t>(k)]), lipid, infertile, mc);
        });
        for (std::size_t k = 0; k < chems.size(); ++k) {
            const auto& model = models[k];
            values[chems[k]] = transform_stage2(values.at(chems[k]), lipid, model);
            transformed.insert(chems[k]);
            chem_report[chems[k]] = {{"kappa", model.kappa},
                                     {"alpha0", model.alpha0},
                                     {"alpha1", model.alpha1},
                                     {"acceptance_kappa", model.acceptance_kappa},
                                     {"ess_kappa", model.ess_kappa},
                                     {"g_mean", model.g_mean},
                                     {"g_sd", model.g_sd},
                                     {"flags", model.flags}};
        }
        report["concomitant"] = chem_report;
        drop_lipid = true;
    }

    // 3. binarization of flagged covariates
    json bin_report = json::object();
    for (const auto& [name, thr] : cfg.binarize) {
        values[name] = binarize_nonlinear(values.at(name), thr);
        long ones = 0;
        for (Eigen::Index i = 0; i < values[name].size(); ++i) ones += values[name](i) == 1.0 ? 1 : 0;
        bin_report[name] = {{"threshold", thr}, {"ones", ones}};
    }
    report["binarize"] = bin_report;

    // 4. log-offset standardization of the remaining continuous columns
    json std_report = json::object();
    for (const auto& name : covariates) {
        if (transformed.count(name) || cfg.binarize.count(name)) continue;
        if (drop_lipid && name == cfg.lipid_column) continue;
        if (detail::is_binary_column(values.at(name))) continue;
        const auto sc = log_offset_standardize(values.at(name), name);
        values[name] = sc.values;
        std_report[name] = {{"mean", sc.mean}, {"sd", sc.sd}};
    }
    report["standardize"] = std_report;

    PreprocessedData out;
    out.report = std::move(report);
    for (const auto& h : raw.header) {
        if (drop_lipid && h == cfg.lipid_column) continue;
        out.table.header.push_back(h);
    }
    out.table.rows.resize(nrows);
    for (std::size_t i = 0; i < nrows; ++i) {
        auto& row = out.table.rows[i];
        for (const auto& h : raw.header) {
            if (drop_lipid && h == cfg.lipid_column) continue;
            if (detail::reserved_columns().count(h))
                row.push_back(raw.rows[i][static_cast<std::size_t>(raw.column(h))]);
            else
                row.push_back(format_double(values.at(h)(static_cast<Eigen::Index>(i))));
        }
    }
    return out;
}

/// Survival records + covariate names from a (preprocessed) table. The schema
/// is id, time, optional left (default 1 = no truncation), status in {0,1},
/// then covariates.
struct SurvivalData {
    std::vector<SurvivalObservation> records;
    std::vector<std::string> covariate_names;
    int t_max = 0;
};

inline SurvivalData survival_from_table(const CsvTable& t, int t_max_cfg = 0) {
    SurvivalData out;
    const int idc = t.require_column("id");
    const int tc = t.require_column("time");
    const int sc = t.require_column("status");
    const int lc = t.column("left");
    std::vector<int> covcols;
    for (std::size_t j = 0; j < t.header.size(); ++j) {
        if (detail::reserved_columns().count(t.header[j])) continue;
        covcols.push_back(static_cast<int>(j));
        out.covariate_names.push_back(t.header[j]);
    }
    int max_time = 0;
    out.records.resize(t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        auto& r = out.records[i];
        r.subject_id = t.rows[i][static_cast<std::size_t>(idc)];
        const double tv = t.numeric(i, tc);
        if (tv < 1.0 || tv != std::floor(tv))
            throw validation_error("data: time must be a positive integer (row " + std::to_string(i + 1) + ")");
        r.time = static_cast<int>(tv);
        max_time = std::max(max_time, r.time);
        const double sv = t.numeric(i, sc);
        if (sv != 0.0 && sv != 1.0)
            throw validation_error("data: status must be 0 or 1 (row " + std::to_string(i + 1) + ")");
        r.event = sv == 1.0;
        if (lc >= 0) {
            const double lv = t.numeric(i, lc);
            if (lv < 1.0 || lv != std::floor(lv))
                throw validation_error("data: left must be a positive integer (row " + std::to_string(i + 1) + ")");
            r.truncation = static_cast<int>(lv);
        } else {
            r.truncation = 1;
        }
        if (r.truncation > r.time)
            throw validation_error("data: left exceeds time (row " + std::to_string(i + 1) + ")");
        r.covariates.resize(static_cast<Eigen::Index>(covcols.size()));
        for (std::size_t k = 0; k < covcols.size(); ++k)
            r.covariates(static_cast<Eigen::Index>(k)) = t.numeric(i, covcols[k]);
    }
    out.t_max = t_max_cfg > 0 ? t_max_cfg : max_time;
    if (out.t_max < max_time) throw validation_error("data: configured t_max below the maximum observed time");
    return out;
}

/// preprocess command: transformed CSV plus a JSON transform report.
inline void command_preprocess(const std::string& data_path, const std::string& config_path,
                               const std::string& out_path, const std::string& report_path) {
    const AnalysisConfig cfg = load_analysis_config(config_path);
    const CsvTable raw = read_csv(data_path);
    PreprocessedData pre = preprocess_dataset(raw, cfg);
    write_csv(out_path, pre.table);
    if (!report_path.empty()) {
        std::ofstream f(report_path);
        if (!f) throw validation_error("preprocess: cannot write '" + report_path + "'");
        f << pre.report.dump(2) << '\n';
    }
}

/// fit command result, also serialized to JSON.
struct FitCommandResult {
    json report;
};

/// Runs preprocess -> tune -> fit on every imputation CSV in the directory,
/// retains covariates selected in at least `selection_rule` imputations,
/// refits each imputation on the retained set and pools the estimates by
/// Rubin's rule (normal-approximation intervals on the log-odds scale).
inline FitCommandResult command_fit(const std::string& data_dir, const std::string& config_path,
                                    const std::string& out_path) {
    const AnalysisConfig cfg = load_analysis_config(config_path);

    std::vector<std::string> files;
    {
        namespace fs = std::filesystem;
        if (!fs::is_directory(data_dir)) throw validation_error("fit: '" + data_dir + "' is not a directory");
        for (const auto& e : fs::directory_iterator(data_dir))
            if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw validation_error("fit: no .csv files in '" + data_dir + "'");
    }
    const int m = static_cast<int>(files.size());

    // all imputations must share header and row count
    std::vector<CsvTable> raw(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        raw[static_cast<std::size_t>(i)] = read_csv(files[static_cast<std::size_t>(i)]);
        if (i > 0) {
            if (raw[static_cast<std::size_t>(i)].header != raw[0].header)
                throw validation_error("fit: header mismatch between '" + files[0] + "' and '" +
                                       files[static_cast<std::size_t>(i)] + "'");
            if (raw[static_cast<std::size_t>(i)].rows.size() != raw[0].rows.size())
                throw validation_error("fit: row count mismatch between imputations");
        }
    }

    struct PerImputation {
        std::vector<std::string> selected;
        json preprocess_report;
        double alpha = 0.0, nu_baseline = 0.0, nu = 0.0;
        SurvivalData data;
        AugmentedDesign design;
    };
    std::vector<PerImputation> imp(static_cast<std::size_t>(m));
    parallel_for(m, [&](int i) {
        auto& pi = imp[static_cast<std::size_t>(i)];
        PreprocessedData pre = preprocess_dataset(raw[static_cast<std::size_t>(i)], cfg);
        pi.preprocess_report = std::move(pre.report);
        pi.data = survival_from_table(pre.table, cfg.t_max);
        pi.design = augment(pi.data.records, pi.data.t_max, RandomEffectSpec::intercept());
        TuningGrid grid = cfg.effective_grid();
        grid.seed = derive_seed(cfg.seed, 0xf17 + static_cast<std::uint64_t>(i));
        FitControls ctrl;
        const auto gs = grid_search(pi.design, grid, ctrl, {}, cfg.fixed_nu);
        pi.alpha = gs.best.alpha;
        pi.nu_baseline = gs.best.nu_baseline;
        pi.nu = gs.best.nu;
        for (int j : gs.best_fit().selected) pi.selected.push_back(pi.data.covariate_names[static_cast<std::size_t>(j)]);
    });

    // selection rule across imputations
    const auto& names = imp[0].data.covariate_names;
    std::map<std::string, int> counts;
    for (const auto& pi : imp)
        for (const auto& s : pi.selected) ++counts[s];
    const int rule = cfg.effective_rule(m);
    std::vector<std::string> retained;
    std::vector<int> retained_cols;
    for (std::size_t j = 0; j < names.size(); ++j) {
        if (counts.count(names[j]) && counts[names[j]] >= rule) {
            retained.push_back(names[j]);
            retained_cols.push_back(static_cast<int>(j));
        }
    }

    json report;
    report["imputations"] = m;
    report["selection_rule"] = rule;
    report["selection_counts"] = counts;
    report["retained"] = retained;
    report["footer"] = "Pooled 95% CIs use the normal approximation on the log-odds scale "
                       "(Rubin variance = within + (1 + 1/m) * between).";
    if (retained.empty()) report["warnings"] = json::array({"no covariate met the selection rule; intercept-only refit"});

    // refit on the retained set and pool
    struct RefitRow {
        std::vector<double> est, var;  // intercept first, then retained
        json per_imp;
    };
    std::vector<json> per_imp(static_cast<std::size_t>(m));
    std::vector<std::vector<double>> est(retained.size() + 1), var(retained.size() + 1);
    std::vector<FitResult> refits(static_cast<std::size_t>(m));
    parallel_for(m, [&](int i) {
        auto& pi = imp[static_cast<std::size_t>(i)];
        refits[static_cast<std::size_t>(i)] = refit_selected(pi.design, retained_cols, pi.nu_baseline);
    });
    for (int i = 0; i < m; ++i) {
        const auto& rf = refits[static_cast<std::size_t>(i)];
        const auto& pi = imp[static_cast<std::size_t>(i)];
        json jimp;
        jimp["file"] = files[static_cast<std::size_t>(i)];
        jimp["tuned"] = {{"alpha", pi.alpha}, {"nu_baseline", pi.nu_baseline}, {"nu", pi.nu}};
        jimp["selected"] = pi.selected;
        jimp["refit_converged"] = rf.converged;
        jimp["flags"] = rf.flags;
        json est_j = json::object();
        est_j["(Intercept)"] = rf.params.intercept;
        est[0].push_back(rf.params.intercept);
        var[0].push_back((*rf.covariance)(0, 0));
        for (std::size_t k = 0; k < retained.size(); ++k) {
            const double b = rf.params.beta(retained_cols[k]);
            est_j[retained[k]] = b;
            est[k + 1].push_back(b);
            var[k + 1].push_back((*rf.covariance)(static_cast<Eigen::Index>(k + 1), static_cast<Eigen::Index>(k + 1)));
        }
        jimp["estimates"] = est_j;
        jimp["preprocess"] = pi.preprocess_report;
        per_imp[static_cast<std::size_t>(i)] = std::move(jimp);
    }
    report["per_imputation"] = per_imp;

    json pooled = json::array();
    for (std::size_t k = 0; k < retained.size() + 1; ++k) {
        const PooledEstimate p = rubin_pool(est[k], var[k]);
        json row;
        row["name"] = k == 0 ? "(Intercept)" : retained[k - 1];
        row["estimate"] = p.estimate;
        row["variance"] = p.variance;
        row["within"] = p.within;
        row["between"] = p.between;
        row["or"] = p.odds_ratio;
        row["ci_low"] = p.ci_low;
        row["ci_high"] = p.ci_high;
        row["formatted"] = format_or(p);
        pooled.push_back(std::move(row));
    }
    report["pooled"] = pooled;

    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw validation_error("fit: cannot write '" + out_path + "'");
        f << report.dump(2) << '\n';
    }
    return FitCommandResult{std::move(report)};
}

/// Scenario configuration for the simulate command: presets 1 and 2 with
/// overridable fields.
inline SimulationDesign parse_scenario(const json& j) {
    const int scenario = j.value("scenario", 1);
    const int n = j.value("n", 250);
    const double cn = j.value("censoring_target", 0.2);
    const bool truncated = j.value("truncated", true);
    const std::uint64_t seed = j.value("seed", std::uint64_t{1});
    SimulationDesign d;
    if (scenario == 1) {
        d = scenario_one(n, cn, truncated, seed);
    } else if (scenario == 2) {
        const std::string kind = j.value("group_type", "cont");
        GroupKind gk;
        if (kind == "cont")
            gk = GroupKind::cont;
        else if (kind == "cat")
            gk = GroupKind::cat;
        else if (kind == "mixed")
            gk = GroupKind::mixed;
        else
            throw validation_error("scenario: group_type must be cont, cat or mixed");
        d = scenario_two(gk, n, cn, truncated, seed);
    } else {
        throw validation_error("scenario: scenario must be 1 or 2");
    }
    if (j.contains("p")) d.p = j.at("p").get<int>();
    if (j.contains("t_max")) d.t_max = j.at("t_max").get<int>();
    if (j.contains("frailty_sd")) d.frailty_sd = j.at("frailty_sd").get<double>();
    if (j.contains("gamma")) {
        const auto g = j.at("gamma").get<std::vector<double>>();
        d.gamma = Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(g.size()));
    }
    d.validate();
    return d;
}

struct SimulateOptions {
    int replicates = 0;                   // 0 = keep config value
    std::optional<std::uint64_t> seed;    // overrides config seed
    int threads = 0;
};

inline ScenarioSummary command_simulate(const std::string& scenario_path, const std::string& out_dir,
                                        const SimulateOptions& opt = SimulateOptions()) {
    std::ifstream f(scenario_path);
    if (!f) throw validation_error("simulate: cannot open '" + scenario_path + "'");
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw validation_error("simulate: config parse failure: " + std::string(e.what()));
    }
    SimulationDesign d = parse_scenario(j);
    if (opt.seed) d.seed = *opt.seed;
    int replicates = opt.replicates > 0 ? opt.replicates : j.value("replicates", 100);

    ScenarioControls controls;
    controls.threads = opt.threads;
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        if (g.contains("alphas")) controls.grid.alphas = g.at("alphas").get<std::vector<double>>();
        if (g.contains("nu_baselines"))
            controls.grid.nu_baselines = g.at("nu_baselines").get<std::vector<double>>();
        if (g.contains("permutations")) controls.grid.permutations = g.at("permutations").get<int>();
    }
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    controls.replicate_csv = (fs::path(out_dir) / "replicates.csv").string();
    controls.summary_csv = (fs::path(out_dir) / "summary.csv").string();
    return run_scenario(d, replicates, controls);
}

}  // namespace dsnet
