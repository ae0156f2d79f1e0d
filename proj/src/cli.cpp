#include "socioverse/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "socioverse/evaluation.hpp"
#include "socioverse/scenario.hpp"
#include "socioverse/synthesis.hpp"
#include "socioverse/user_pool.hpp"

#ifndef SOCIOVERSE_VERSION
#define SOCIOVERSE_VERSION "0.0.0"
#endif

extern char** environ;

namespace socioverse::cli {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

// --- configuration ----------------------------------------------------------

namespace {

std::uint64_t parse_seed(const std::string& text, std::string_view source) {
    std::uint64_t value = 0;
    std::size_t used = 0;
    try {
        if (text.empty() || text.front() == '-') throw std::invalid_argument("negative");
        value = std::stoull(text, &used, 10);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size()) {
        throw Error(fmt::format("{}: seed '{}' is not a 64-bit unsigned integer", source, text));
    }
    return value;
}

fs::path resolve_against(const fs::path& base, const fs::path& p) {
    return p.is_absolute() || base.empty() ? p : (base / p).lexically_normal();
}

}  // namespace

ProjectConfig ProjectConfig::from_json(const json& j, const fs::path& base_dir) {
    ProjectConfig c;
    if (auto it = j.find("paths"); it != j.end()) {
        if (auto p = it->find("pool"); p != it->end()) c.paths.pool = resolve_against(base_dir, p->get<std::string>());
        if (auto p = it->find("schema"); p != it->end()) {
            c.paths.schema = resolve_against(base_dir, p->get<std::string>());
        }
        if (auto p = it->find("scenarios"); p != it->end()) {
            c.paths.scenarios = resolve_against(base_dir, p->get<std::string>());
        }
        if (auto p = it->find("runs"); p != it->end()) c.paths.runs = resolve_against(base_dir, p->get<std::string>());
    }
    if (auto it = j.find("backend"); it != j.end()) c.backend = BackendDescriptor::from_json(*it);
    if (auto it = j.find("seed"); it != j.end()) {
        if (it->is_number_unsigned()) c.seed = it->get<std::uint64_t>();
        else if (it->is_string()) c.seed = parse_seed(it->get<std::string>(), "config seed");
        else throw Error("config: seed must be a non-negative integer");
    }
    c.log_level = j.value("log_level", c.log_level);
    return c;
}

Environment process_environment() {
    Environment env;
    for (char** e = environ; e && *e; ++e) {
        std::string_view entry(*e);
        if (entry.rfind("SOCIOVERSE_", 0) != 0) continue;
        const auto eq = entry.find('=');
        if (eq == std::string_view::npos) continue;
        env.emplace(std::string(entry.substr(0, eq)), std::string(entry.substr(eq + 1)));
    }
    return env;
}

ProjectConfig resolve_project_config(const std::optional<fs::path>& config_file, const Environment& env) {
    auto lookup = [&](const char* key) -> std::optional<std::string> {
        auto it = env.find(key);
        if (it == env.end() || it->second.empty()) return std::nullopt;
        return it->second;
    };

    ProjectConfig c;
    std::optional<fs::path> file = config_file;
    if (!file) {
        if (auto v = lookup("SOCIOVERSE_CONFIG")) file = fs::path(*v);
    }
    if (file) {
        std::ifstream in(*file);
        if (!in) throw Error("cannot open config file " + file->string());
        try {
            c = ProjectConfig::from_json(json::parse(in), file->parent_path());
        } catch (const json::exception& e) {
            throw FormatError(file->string(), 0, e.what());
        }
    }
    if (auto v = lookup("SOCIOVERSE_SEED")) c.seed = parse_seed(*v, "SOCIOVERSE_SEED");
    if (auto v = lookup("SOCIOVERSE_RUNS_DIR")) c.paths.runs = *v;
    if (auto v = lookup("SOCIOVERSE_POOL")) c.paths.pool = fs::path(*v);
    if (auto v = lookup("SOCIOVERSE_SCHEMA")) c.paths.schema = fs::path(*v);
    if (auto v = lookup("SOCIOVERSE_BACKEND")) c.backend.kind = backend_kind_from_string(*v);
    if (auto v = lookup("SOCIOVERSE_ENDPOINT")) c.backend.endpoint = *v;
    if (auto v = lookup("SOCIOVERSE_MODEL")) c.backend.model = *v;
    if (auto v = lookup("SOCIOVERSE_LOG_LEVEL")) c.log_level = *v;
    return c;
}

fs::path make_run_directory(const fs::path& runs_root, const std::string& scenario_id, std::uint64_t seed) {
    const auto now = std::chrono::system_clock::now();
    std::string stamp = format_timestamp(std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
    stamp.erase(std::remove_if(stamp.begin(), stamp.end(), [](char ch) { return ch == '-' || ch == ':'; }), stamp.end());
    const fs::path parent = runs_root / scenario_id;
    fs::create_directories(parent);
    const std::string base = fmt::format("{}-{}", stamp, seed);
    for (int k = 1;; ++k) {
        const fs::path dir = parent / (k == 1 ? base : fmt::format("{}-{}", base, k));
        if (fs::create_directory(dir)) return dir;
    }
}

// --- command helpers --------------------------------------------------------

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    bool json = false;
    ProjectConfig config;
};

void emit(Context& ctx, const ordered_json& summary, const std::string& text) {
    if (ctx.json) ctx.out << summary.dump(2) << "\n";
    else ctx.out << text;
}

void write_text(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
    if (!f) throw Error("failed writing " + path.string());
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    return f;
}

fs::path require_path(const std::string& flag_value, const std::optional<fs::path>& fallback, const char* what) {
    if (!flag_value.empty()) return flag_value;
    if (fallback) return *fallback;
    throw Error(fmt::format("no {} given (use the flag, the config file or the environment)", what));
}

void configure_logging(const std::string& level) {
    static std::once_flag once;
    std::call_once(once, [] {
        auto logger = spdlog::stderr_color_mt("socioverse");
        logger->set_pattern("[%l] %v");
        spdlog::set_default_logger(logger);
    });
    spdlog::set_level(spdlog::level::from_str(level));
}

// --- pool -------------------------------------------------------------------

struct PoolArgs {
    std::string schema;
    std::string input;
    std::string output;
    std::string removed;
    std::string votes;
    double threshold = kDefaultRepetitionThreshold;
    std::size_t min_posts = kDefaultMinPosts;
    std::vector<std::string> attributes;
};

UserPool open_pool(Context& ctx, const PoolArgs& a) {
    const auto schema = load_schema(require_path(a.schema, ctx.config.paths.schema, "schema"));
    return load_pool(require_path(a.input, ctx.config.paths.pool, "pool file"), schema);
}

void write_pool(const UserPool& pool, const fs::path& path) {
    auto f = open_output(path);
    export_pool(pool, f);
}

int cmd_pool_ingest(Context& ctx, const PoolArgs& a) {
    const auto pool = open_pool(ctx, a);
    if (!a.output.empty()) write_pool(pool, a.output);
    ordered_json s{{"users", pool.size()}, {"posts", pool.post_count()}};
    if (!a.output.empty()) s["output"] = a.output;
    emit(ctx, s, fmt::format("ingested {} users, {} posts{}\n", pool.size(), pool.post_count(),
                             a.output.empty() ? "" : " -> " + a.output));
    return kExitOk;
}

int cmd_pool_clean(Context& ctx, const PoolArgs& a) {
    const auto pool = open_pool(ctx, a);
    const auto report = filter_abnormal(pool, a.threshold, a.min_posts);
    if (!a.output.empty()) write_pool(report.kept, a.output);

    auto removed = ordered_json::array();
    for (const auto& r : report.removed) {
        removed.push_back({{"platform", r.key.platform}, {"user_id", r.key.user_id}, {"ratio", r.ratio}});
    }
    if (!a.removed.empty()) {
        auto f = open_output(a.removed);
        for (const auto& r : removed) f << r.dump() << '\n';
    }
    ordered_json s{{"examined", report.examined},
                   {"kept", report.kept.size()},
                   {"removed", report.removed.size()},
                   {"retention_rate", report.retention_rate},
                   {"threshold", a.threshold},
                   {"removed_users", removed}};
    std::string text = fmt::format("examined {} users, removed {} (threshold {}), kept {} ({:.1f}%)\n", report.examined,
                                   report.removed.size(), a.threshold, report.kept.size(), 100.0 * report.retention_rate);
    for (const auto& r : report.removed) text += fmt::format("  removed {} ratio {:.3f}\n", r.key.str(), r.ratio);
    emit(ctx, s, text);
    return kExitOk;
}

int cmd_pool_stats(Context& ctx, const PoolArgs& a) {
    const auto pool = open_pool(ctx, a);
    std::vector<std::string> attrs = a.attributes;
    if (attrs.empty()) {
        for (const auto& s : pool.schema().attributes()) {
            if (s.kind == AttributeKind::categorical) attrs.push_back(s.name);
        }
    }
    ordered_json s{{"users", pool.size()}, {"posts", pool.post_count()}};
    std::string text = fmt::format("users {}\nposts {}\n", pool.size(), pool.post_count());
    auto margs = ordered_json::object();
    for (const auto& attr : attrs) {
        ordered_json m;
        try {
            const auto mg = marginal_distribution(pool, attr);
            m = {{"labeled", mg.labeled}, {"missing", mg.missing}};
            auto dist = ordered_json::object();
            text += fmt::format("\n{} (labeled {}, missing {})\n", attr, mg.labeled, mg.missing);
            for (std::size_t i = 0; i < mg.categories.size(); ++i) {
                dist[mg.categories[i]] = {{"count", mg.counts[i]}, {"share", mg.probabilities[i]}};
                text += fmt::format("  {:<28} {:>7} {:>8.4f}\n", mg.categories[i], mg.counts[i], mg.probabilities[i]);
            }
            m["categories"] = std::move(dist);
        } catch (const Error& e) {
            m = {{"error", e.what()}};
            text += fmt::format("\n{}: {}\n", attr, e.what());
        }
        margs[attr] = std::move(m);
    }
    s["marginals"] = std::move(margs);
    emit(ctx, s, text);
    return kExitOk;
}

int cmd_pool_annotate(Context& ctx, const PoolArgs& a) {
    const auto pool = open_pool(ctx, a);
    std::ifstream in(a.votes);
    if (!in) throw Error("cannot open votes file " + a.votes);
    std::map<UserKey, std::vector<LabelVote>> votes;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = json::parse(line);
            votes[{j.at("platform").get<std::string>(), j.at("user_id").get<std::string>()}].push_back(
                {j.at("attribute").get<std::string>(), j.at("value").get<std::string>(), j.value("annotator", "")});
        } catch (const json::exception& e) {
            throw FormatError(a.votes, n, e.what());
        }
    }
    const auto report = apply_votes(pool, votes);
    if (!a.output.empty()) write_pool(report.pool, a.output);
    auto ties = ordered_json::array();
    for (const auto& [key, attr] : report.ties) {
        ties.push_back({{"platform", key.platform}, {"user_id", key.user_id}, {"attribute", attr}});
    }
    emit(ctx, {{"labels_set", report.labels_set}, {"ties", ties}},
         fmt::format("set {} labels, {} ties left unlabeled\n", report.labels_set, report.ties.size()));
    return kExitOk;
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
    std::string targets;
    std::string seed_table;
    std::string table;
    std::string regions;
    std::string params;
    std::string output;
    double tol = 1e-6;
    std::size_t max_iter = 1000;
    std::size_t n = 0;
    std::optional<std::uint64_t> seed;
    std::optional<double> mean;
    std::optional<double> sd;
    std::optional<double> share;
    std::optional<double> alpha;
    double income_cv = 0.6;
    bool allow_omission = false;
};

template <typename Json = ordered_json>
Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

void write_profiles(const std::vector<AgentProfile>& profiles, const fs::path& path) {
    auto f = open_output(path);
    for (const auto& p : profiles) f << profile_to_json(p).dump() << '\n';
}

int cmd_synth_ipf(Context& ctx, const SynthArgs& a) {
    // Category order comes from the file, so keep insertion order here.
    const auto targets_doc = read_json(a.targets);
    const ContingencyTable seed = a.seed_table.empty()
                                      ? ContingencyTable::filled(axes_from_marginals(targets_doc), 1.0)
                                      : load_table(a.seed_table);
    const auto targets = MarginalTargets::from_json(read_json<json>(a.targets), seed.axes());
    const auto r = ipf_fit(seed, targets, {a.tol, a.max_iter});
    if (!a.output.empty()) write_text(a.output, r.fitted.to_json().dump(2) + "\n");
    ordered_json s{{"iterations", r.iterations},
                   {"converged", r.converged},
                   {"max_relative_marginal_gap", r.max_relative_marginal_gap},
                   {"cells", r.fitted.size()},
                   {"total", r.fitted.total()}};
    emit(ctx, s,
         fmt::format("IPF {} after {} sweeps, max relative marginal gap {:.3e}, {} cells\n",
                     r.converged ? "converged" : "did not converge", r.iterations, r.max_relative_marginal_gap,
                     r.fitted.size()));
    return r.converged ? kExitOk : kExitFailure;
}

int cmd_synth_sample(Context& ctx, const SynthArgs& a) {
    const auto table = load_table(a.table);
    const auto seed = a.seed.value_or(ctx.config.seed);
    const auto profiles = sample_profiles(table, a.n, seed);
    if (!a.output.empty()) write_profiles(profiles, a.output);
    emit(ctx, {{"profiles", profiles.size()}, {"seed", seed}},
         fmt::format("sampled {} profiles (seed {}){}\n", profiles.size(), seed,
                     a.output.empty() ? "" : " -> " + a.output));
    return kExitOk;
}

int cmd_synth_income(Context& ctx, const SynthArgs& a) {
    IncomeMixtureParams params;
    if (!a.params.empty()) params = IncomeMixtureParams::from_json(read_json<json>(a.params));
    if (a.mean) params.mu_actual = *a.mean;
    if (a.sd) params.sigma_actual = *a.sd;
    if (a.share) params.lognormal_share = *a.share;
    if (a.alpha) params.pareto_alpha = *a.alpha;
    params.validate();
    const auto seed = a.seed.value_or(ctx.config.seed);
    auto values = income_mixture_sample(params, a.n, seed);
    if (!a.output.empty()) {
        auto f = open_output(a.output);
        for (double v : values) f << fmt::format("{:.17g}\n", v);
    }
    const double x_min = params.x_min();
    double sum = 0.0;
    std::size_t tail = 0;
    for (double v : values) {
        sum += v;
        if (v >= x_min) ++tail;
    }
    auto sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(values.size());
    const double mean = values.empty() ? 0.0 : sum / n;
    const double median = values.empty() ? 0.0 : sorted[sorted.size() / 2];
    const double tail_fraction = values.empty() ? 0.0 : static_cast<double>(tail) / n;
    ordered_json s{{"n", values.size()},
                   {"seed", seed},
                   {"mean", mean},
                   {"median", median},
                   {"x_min", std::isfinite(x_min) ? ordered_json(x_min) : ordered_json(nullptr)},
                   {"pareto_fraction", tail_fraction},
                   {"lognormal_mu", params.lognormal_mu()},
                   {"lognormal_sigma", params.lognormal_sigma()}};
    emit(ctx, s,
         fmt::format("n {}  mean {:.2f}  median {:.2f}  x_min {:.2f}  pareto fraction {:.4f}\n", values.size(), mean,
                     median, x_min, tail_fraction));
    return kExitOk;
}

int cmd_synth_regional(Context& ctx, const SynthArgs& a) {
    const auto regions = load_regions(a.regions);
    RegionalOptions opt;
    opt.income_cv = a.income_cv;
    if (a.share) opt.lognormal_share = *a.share;
    if (a.alpha) opt.pareto_alpha = *a.alpha;
    opt.allow_omission = a.allow_omission;
    const auto seed = a.seed.value_or(ctx.config.seed);
    const auto profiles = proportional_regional_profiles(regions, a.n, seed, opt);
    if (!a.output.empty()) write_profiles(profiles, a.output);
    std::map<std::string, std::size_t> counts;
    for (const auto& p : profiles) ++counts[p.attributes.at(opt.attribute)];
    ordered_json per = ordered_json::object();
    std::string text = fmt::format("{} profiles over {} regions (seed {})\n", profiles.size(), regions.size(), seed);
    for (const auto& r : regions) {
        per[r.name] = counts[r.name];
        text += fmt::format("  {:<24} {:>8}\n", r.name, counts[r.name]);
    }
    emit(ctx, {{"profiles", profiles.size()}, {"seed", seed}, {"regions", per}}, text);
    return kExitOk;
}

// --- scenario, run, evaluate ------------------------------------------------

struct ScenarioArgs {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> size;
    bool no_knowledge = false;
    bool random_demographics = false;
};

struct BackendArgs {
    std::string backend;
    std::string endpoint;
    std::string model;
    std::optional<double> rpm;
    std::optional<std::size_t> max_attempts;
    std::vector<std::int64_t> backoff_ms;
    std::optional<double> timeout;
    std::size_t concurrency = 1;
};

struct RunArgs {
    std::string plan;
    std::string results;
    std::string manifest;
    std::optional<std::uint64_t> seed;
};

struct EvalArgs {
    std::string results;
    std::string truth;
    std::string config;
    std::string subset;
    std::string csv;
    std::string output;
};

fs::path resolve_scenario_ref(const Context& ctx, const std::string& ref) {
    fs::path p(ref);
    if (fs::exists(p)) return p;
    const auto named = ctx.config.paths.scenarios / (ref + ".json");
    if (fs::exists(named)) return named;
    throw Error(fmt::format("scenario '{}' not found (also tried {})", ref, named.string()));
}

ScenarioConfig load_scenario_with_overrides(const Context& ctx, const ScenarioArgs& a) {
    auto c = load_scenario(resolve_scenario_ref(ctx, a.config));
    if (a.size) c.population.size = *a.size;
    if (a.no_knowledge) c.ablation.no_knowledge = true;
    if (a.random_demographics) c.ablation.random_demographics = true;
    return c;
}

std::string findings_text(const std::vector<Finding>& findings) {
    std::string text;
    for (const auto& f : findings) {
        text += fmt::format("{} [{}] {}\n", f.severity == Finding::Severity::error ? "error" : "warning", f.code,
                            f.message);
    }
    return text;
}

ordered_json findings_json(const std::vector<Finding>& findings) {
    auto arr = ordered_json::array();
    for (const auto& f : findings) {
        arr.push_back({{"severity", f.severity == Finding::Severity::error ? "error" : "warning"},
                       {"code", f.code},
                       {"message", f.message}});
    }
    return arr;
}

int cmd_scenario_validate(Context& ctx, const ScenarioArgs& a) {
    const auto c = load_scenario_with_overrides(ctx, a);
    const auto findings = validate_scenario(c);
    const bool runnable = !has_errors(findings);
    emit(ctx, {{"scenario_id", c.scenario_id}, {"runnable", runnable}, {"findings", findings_json(findings)}},
         findings.empty() ? fmt::format("{}: ok\n", c.scenario_id) : findings_text(findings));
    return runnable ? kExitOk : kExitFailure;
}

SimulationPlan plan_scenario(Context& ctx, const ScenarioConfig& c, std::uint64_t seed) {
    const auto findings = validate_scenario(c);
    if (!findings.empty()) ctx.err << findings_text(findings);
    if (has_errors(findings)) throw Error(fmt::format("scenario {} is not runnable", c.scenario_id));
    return build_plan(c, load_scenario_pool(c), seed);
}

int cmd_scenario_plan(Context& ctx, const ScenarioArgs& a) {
    const auto c = load_scenario_with_overrides(ctx, a);
    const auto seed = a.seed.value_or(ctx.config.seed);
    const auto plan = plan_scenario(ctx, c, seed);
    const auto text = plan.serialize();
    if (!a.output.empty()) write_text(a.output, text);
    emit(ctx,
         {{"scenario_id", plan.scenario_id},
          {"agents", plan.agents.size()},
          {"seed", seed},
          {"plan_hash", plan_hash(plan)},
          {"diagnostics", plan.diagnostics}},
         a.output.empty() ? text
                          : fmt::format("planned {} agents for {} (seed {}) -> {}\n", plan.agents.size(),
                                        plan.scenario_id, seed, a.output));
    return kExitOk;
}

BackendDescriptor make_descriptor(const Context& ctx, const BackendArgs& a, const SimulationPlan& plan) {
    BackendDescriptor d = ctx.config.backend;
    if (!a.backend.empty()) d.kind = backend_kind_from_string(a.backend);
    if (!a.endpoint.empty()) d.endpoint = a.endpoint;
    if (!a.model.empty()) d.model = a.model;
    if (a.rpm) d.requests_per_minute = *a.rpm;
    if (a.max_attempts) d.retry.max_attempts = *a.max_attempts;
    if (!a.backoff_ms.empty()) {
        d.retry.backoff.clear();
        for (auto ms : a.backoff_ms) d.retry.backoff.emplace_back(ms);
    }
    if (a.timeout) d.timeout_seconds = *a.timeout;
    d.temperature = plan.generation.temperature;
    d.max_tokens = plan.generation.max_tokens;
    d.validate();
    return d;
}

struct RunOutcome {
    RunResult result;
    fs::path results_path;
    fs::path manifest_path;
};

RunOutcome execute_plan(Context& ctx, const SimulationPlan& plan, const BackendArgs& b, std::uint64_t seed,
                        const fs::path& results_path, const fs::path& manifest_path) {
    const auto descriptor = make_descriptor(ctx, b, plan);
    std::unique_ptr<AgentBackend> backend;
    if (descriptor.kind == BackendKind::rule_oracle) backend = std::make_unique<RuleOracleBackend>(seed);
    else backend = std::make_unique<HttpLlmBackend>(descriptor);

    if (results_path.has_parent_path()) fs::create_directories(results_path.parent_path());
    fs::path stream_path = results_path;
    stream_path += ".partial";
    fs::remove(stream_path);

    RunOptions opt;
    opt.concurrency = std::max<std::size_t>(1, b.concurrency);
    opt.master_seed = seed;
    opt.stream_path = stream_path;
    RunOutcome outcome{run_simulation(plan, *backend, descriptor, opt), results_path, manifest_path};

    write_results(results_path, outcome.result.sheets, plan.questionnaire);
    fs::remove(stream_path);
    write_text(manifest_path, outcome.result.manifest.to_json().dump(2) + "\n");
    return outcome;
}

std::string run_summary_text(const RunManifest& m, const fs::path& results) {
    std::string text = fmt::format("completed {}  invalid {}  unmatched {}", m.counts.completed, m.counts.invalid,
                                   m.counts.unmatched);
    if (m.aborted) text += fmt::format("  not run {}  ABORTED: {}", m.counts.not_run, m.abort_reason);
    return text + fmt::format("\nresults -> {}\n", results.string());
}

int cmd_run(Context& ctx, const RunArgs& a, const BackendArgs& b) {
    const auto plan = load_plan(a.plan);
    const auto seed = a.seed.value_or(plan.seed);
    const fs::path dir = fs::path(a.plan).parent_path();
    const fs::path results = a.results.empty() ? dir / "results.jsonl" : fs::path(a.results);
    const fs::path manifest = a.manifest.empty() ? dir / "manifest.json" : fs::path(a.manifest);
    const auto outcome = execute_plan(ctx, plan, b, seed, results, manifest);
    const auto& m = outcome.result.manifest;
    emit(ctx, {{"results", results.string()}, {"manifest", m.to_json()}}, run_summary_text(m, results));
    return m.aborted ? kExitFailure : kExitOk;
}

EvaluationContext evaluation_context(const ScenarioConfig& c, const Questionnaire& qn, const std::string& subset_flag) {
    EvaluationContext ec;
    ec.scenario_id = c.scenario_id;
    ec.kind = c.kind;
    ec.questionnaire = &qn;
    ec.vote_question = c.evaluation.vote_question;
    if (!subset_flag.empty()) ec.subsets = load_subsets(subset_flag);
    else if (c.evaluation.subsets) ec.subsets = load_subsets(c.resolve(*c.evaluation.subsets));
    return ec;
}

void emit_report(Context& ctx, const EvaluationReport& report, const EvalArgs& a) {
    const auto text = report.to_json().dump(2) + "\n";
    if (!a.output.empty()) write_text(a.output, text);
    if (!a.csv.empty()) write_text(a.csv, report.to_csv());
    if (ctx.json) ctx.out << text;
    else ctx.out << report.to_text();
}

int cmd_evaluate(Context& ctx, const EvalArgs& a) {
    const auto c = load_scenario(resolve_scenario_ref(ctx, a.config));
    const auto qn = load_questionnaire(c.resolve(c.questionnaire));
    const fs::path truth_path = !a.truth.empty() ? fs::path(a.truth)
                                : c.ground_truth ? c.resolve(*c.ground_truth)
                                                 : throw Error("no ground truth given");
    const auto truth = load_ground_truth(truth_path);
    const auto sheets = load_results(a.results, qn);
    const auto report = evaluate(sheets, truth, evaluation_context(c, qn, a.subset));
    emit_report(ctx, report, a);
    return kExitOk;
}

int cmd_truth(Context& ctx, const EvalArgs& a) {
    const auto c = load_scenario(resolve_scenario_ref(ctx, a.config));
    const auto qn = load_questionnaire(c.resolve(c.questionnaire));
    const auto sheets = load_results(a.results, qn);
    const auto truth = derive_ground_truth(sheets, qn, c.kind, c.evaluation.vote_question);
    const auto text = truth.to_json().dump(2) + "\n";
    if (!a.output.empty()) write_text(a.output, text);
    if (ctx.json || a.output.empty()) ctx.out << text;
    else ctx.out << fmt::format("ground truth for {} -> {}\n", c.scenario_id, a.output);
    return kExitOk;
}

int cmd_pipeline(Context& ctx, const ScenarioArgs& s, const BackendArgs& b, const EvalArgs& e,
                 const std::string& runs_dir) {
    const auto c = load_scenario_with_overrides(ctx, s);
    const auto seed = s.seed.value_or(ctx.config.seed);
    const fs::path runs_root = runs_dir.empty() ? ctx.config.paths.runs : fs::path(runs_dir);

    const auto plan = plan_scenario(ctx, c, seed);
    const auto dir = make_run_directory(runs_root, c.scenario_id, seed);
    write_text(dir / "plan.json", plan.serialize());

    const auto outcome = execute_plan(ctx, plan, b, seed, dir / "results.jsonl", dir / "manifest.json");
    const auto& m = outcome.result.manifest;
    if (m.aborted) {
        ctx.err << fmt::format("error: run aborted: {}\nartifacts kept in {}\n", m.abort_reason, dir.string());
        return kExitFailure;
    }

    const fs::path truth_path = !e.truth.empty() ? fs::path(e.truth)
                                : c.ground_truth ? c.resolve(*c.ground_truth)
                                                 : fs::path();
    if (truth_path.empty() || !fs::exists(truth_path)) {
        ctx.err << fmt::format("error: ground truth not found{}\nartifacts kept in {}\n",
                               truth_path.empty() ? "" : ": " + truth_path.string(), dir.string());
        return kExitFailure;
    }
    const auto truth = load_ground_truth(truth_path);
    const auto qn = plan.questionnaire;
    const auto report = evaluate(outcome.result.sheets, truth, evaluation_context(c, qn, e.subset));
    const auto report_text = report.to_json().dump(2) + "\n";
    write_text(dir / "report.json", report_text);
    if (!e.csv.empty()) write_text(e.csv, report.to_csv());

    if (ctx.json) {
        ordered_json j{{"run_dir", dir.string()}, {"manifest", m.to_json()}, {"report", report.to_json()}};
        ctx.out << j.dump(2) << "\n";
    } else {
        ctx.out << fmt::format("run directory {}\n", dir.string()) << run_summary_text(m, outcome.results_path) << "\n"
                << report.to_text();
    }
    return kExitOk;
}

void add_backend_flags(CLI::App* app, BackendArgs& b) {
    app->add_option("--backend", b.backend, "Agent backend")->check(CLI::IsMember({"oracle", "http"}));
    app->add_option("--concurrency", b.concurrency, "Maximum in-flight agent calls")->check(CLI::Range(1, 1024));
    app->add_option("--endpoint", b.endpoint, "Chat-completions URL for the http backend");
    app->add_option("--model", b.model, "Model name sent to the http backend");
    app->add_option("--rpm", b.rpm, "Requests per minute (0 = unlimited)")->check(CLI::NonNegativeNumber);
    app->add_option("--max-attempts", b.max_attempts, "Attempts per agent")->check(CLI::PositiveNumber);
    app->add_option("--backoff-ms", b.backoff_ms, "Backoff schedule in milliseconds")->delimiter(',');
    app->add_option("--timeout", b.timeout, "HTTP timeout in seconds")->check(CLI::PositiveNumber);
}

void add_scenario_overrides(CLI::App* app, ScenarioArgs& s) {
    app->add_option("--size", s.size, "Override the population size")->check(CLI::PositiveNumber);
    app->add_flag("--no-knowledge", s.no_knowledge, "Drop past posts from every prompt");
    app->add_flag("--random-demographics", s.random_demographics, "Use a uniform joint over the same attributes");
}

}  // namespace

// --- entry point ------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const Environment& env) {
    CLI::App app{"Agent-based social simulation driven by LLM personas", "socioverse"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(SOCIOVERSE_VERSION));

    std::string config_file;
    std::string log_level;
    bool json_out = false;
    app.add_option("--config", config_file, "Project config file (default: $SOCIOVERSE_CONFIG)");
    app.add_flag("--json", json_out, "Machine-readable JSON output");
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
    // Flags are accepted after the subcommand as well.
    app.fallthrough();

    auto* version = app.add_subcommand("version", "Print version information");

    PoolArgs pa;
    auto* pool = app.add_subcommand("pool", "Inspect and clean user pools");
    pool->require_subcommand(1);
    auto* pool_ingest = pool->add_subcommand("ingest", "Validate a pool file and write it in canonical form");
    auto* pool_clean = pool->add_subcommand("clean", "Remove users with repetitive posting");
    auto* pool_stats = pool->add_subcommand("stats", "Print label marginals");
    auto* pool_annotate = pool->add_subcommand("annotate", "Apply majority-voted labels");
    pool_ingest->add_option("input", pa.input, "Pool file (JSONL)")->required();
    for (auto* sub : {pool_ingest, pool_clean, pool_stats, pool_annotate}) {
        sub->add_option("--schema", pa.schema, "Attribute schema (JSON)");
    }
    for (auto* sub : {pool_clean, pool_stats, pool_annotate}) sub->add_option("-i,--input", pa.input, "Pool file (JSONL)");
    for (auto* sub : {pool_ingest, pool_clean, pool_annotate}) sub->add_option("-o,--output", pa.output, "Output pool");
    pool_clean->add_option("--threshold", pa.threshold, "Maximum word repetition ratio")->check(CLI::Range(0.0, 1.0));
    pool_clean->add_option("--min-posts", pa.min_posts, "Users with fewer posts are kept");
    pool_clean->add_option("--removed", pa.removed, "Write removed users (JSONL)");
    pool_stats->add_option("--attribute", pa.attributes, "Attributes to summarize (default: all categorical)");
    pool_annotate->add_option("--votes", pa.votes, "Annotator votes (JSONL)")->required();

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Synthesize populations");
    synth->require_subcommand(1);
    auto* synth_ipf = synth->add_subcommand("ipf", "Fit a joint table to marginal targets");
    synth_ipf->add_option("--targets", sa.targets, "Marginal targets {attribute: {category: mass}}")->required();
    synth_ipf->add_option("--seed,--seed-table", sa.seed_table, "Seed table (default: all ones)");
    synth_ipf->add_option("--tol", sa.tol, "Convergence tolerance")->check(CLI::PositiveNumber);
    synth_ipf->add_option("--max-iter", sa.max_iter, "Maximum sweeps")->check(CLI::PositiveNumber);
    auto* synth_sample = synth->add_subcommand("sample", "Draw profiles from a joint table");
    synth_sample->add_option("--joint,--table", sa.table, "Joint table (JSON)")->required();
    auto* synth_income = synth->add_subcommand("income", "Sample the log-normal/Pareto income mixture");
    synth_income->add_option("--params", sa.params, "Mixture parameters (JSON)");
    synth_income->add_option("--mean", sa.mean, "Mean income");
    synth_income->add_option("--sd", sa.sd, "Income standard deviation");
    auto* synth_regional = synth->add_subcommand("regional", "Allocate agents to regions by population");
    synth_regional->add_option("--regions", sa.regions, "Regions file (JSON)")->required();
    synth_regional->add_option("--income-cv", sa.income_cv, "sd/mean for regions without income_sd");
    synth_regional->add_flag("--allow-omission", sa.allow_omission, "Permit fewer agents than regions");
    for (auto* sub : {synth_income, synth_regional}) {
        sub->add_option("--share", sa.share, "Log-normal share")->check(CLI::Range(0.0, 1.0));
        sub->add_option("--alpha", sa.alpha, "Pareto shape")->check(CLI::PositiveNumber);
    }
    for (auto* sub : {synth_sample, synth_income, synth_regional}) {
        sub->add_option("-n,--count", sa.n, "Number of draws")->required();
        sub->add_option("--seed", sa.seed, "Random seed");
    }
    for (auto* sub : {synth_ipf, synth_sample, synth_income, synth_regional}) {
        sub->add_option("-o,--output", sa.output, "Output file");
    }

    ScenarioArgs sc;
    auto* scenario = app.add_subcommand("scenario", "Validate scenarios and build plans");
    scenario->require_subcommand(1);
    auto* sc_validate = scenario->add_subcommand("validate", "Check a scenario config");
    auto* sc_plan = scenario->add_subcommand("plan", "Build a simulation plan");
    for (auto* sub : {sc_validate, sc_plan}) {
        sub->add_option("config", sc.config, "Scenario config (path or name)")->required();
        add_scenario_overrides(sub, sc);
    }
    sc_plan->add_option("--seed", sc.seed, "Plan seed");
    sc_plan->add_option("-o,--output", sc.output, "Plan file (default: stdout)");

    RunArgs ra;
    BackendArgs ba;
    auto* run_cmd = app.add_subcommand("run", "Execute a plan against an agent backend");
    run_cmd->add_option("--plan", ra.plan, "Plan file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--seed", ra.seed, "Master seed (default: the plan's seed)");
    run_cmd->add_option("--results", ra.results, "Results file (default: next to the plan)");
    run_cmd->add_option("--manifest", ra.manifest, "Manifest file (default: next to the plan)");
    add_backend_flags(run_cmd, ba);

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("evaluate", "Score results against ground truth");
    eval_cmd->add_option("--results", ea.results, "Results file (JSONL)")->required();
    eval_cmd->add_option("--truth", ea.truth, "Ground truth (default: the scenario's)");
    eval_cmd->add_option("--config", ea.config, "Scenario config")->required();
    auto* truth_cmd = app.add_subcommand("truth", "Derive ground truth from a results file");
    truth_cmd->add_option("--results", ea.results, "Results file (JSONL)")->required();
    truth_cmd->add_option("--config", ea.config, "Scenario config")->required();
    truth_cmd->add_option("-o,--output", ea.output, "Ground truth file");
    eval_cmd->add_option("-o,--output", ea.output, "Report file (JSON)");

    std::string runs_dir;
    auto* pipeline = app.add_subcommand("pipeline", "plan, run and evaluate in a fresh run directory");
    pipeline->add_option("config", sc.config, "Scenario config (path or name)")->required();
    pipeline->add_option("--seed", sc.seed, "Seed for planning and the oracle");
    pipeline->add_option("--runs-dir", runs_dir, "Root of run directories");
    pipeline->add_option("--truth", ea.truth, "Ground truth (default: the scenario's)");
    add_scenario_overrides(pipeline, sc);
    add_backend_flags(pipeline, ba);
    for (auto* sub : {eval_cmd, pipeline}) {
        sub->add_option("--subset", ea.subset, "Subset group lists {name: [groups]}");
        sub->add_option("--csv", ea.csv, "Write metric series as CSV");
    }
    // The global --config names the project config; keep the subcommand's own.
    eval_cmd->fallthrough(false);
    truth_cmd->fallthrough(false);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        Context ctx{out, err, json_out, resolve_project_config(
                                            config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), env)};
        configure_logging(log_level.empty() ? ctx.config.log_level : log_level);

        if (version->parsed()) {
            emit(ctx, {{"socioverse", SOCIOVERSE_VERSION}}, fmt::format("socioverse {}\n", SOCIOVERSE_VERSION));
            return kExitOk;
        }
        if (pool_ingest->parsed()) return cmd_pool_ingest(ctx, pa);
        if (pool_clean->parsed()) return cmd_pool_clean(ctx, pa);
        if (pool_stats->parsed()) return cmd_pool_stats(ctx, pa);
        if (pool_annotate->parsed()) return cmd_pool_annotate(ctx, pa);
        if (synth_ipf->parsed()) return cmd_synth_ipf(ctx, sa);
        if (synth_sample->parsed()) return cmd_synth_sample(ctx, sa);
        if (synth_income->parsed()) return cmd_synth_income(ctx, sa);
        if (synth_regional->parsed()) return cmd_synth_regional(ctx, sa);
        if (sc_validate->parsed()) return cmd_scenario_validate(ctx, sc);
        if (sc_plan->parsed()) return cmd_scenario_plan(ctx, sc);
        if (run_cmd->parsed()) return cmd_run(ctx, ra, ba);
        if (eval_cmd->parsed()) return cmd_evaluate(ctx, ea);
        if (truth_cmd->parsed()) return cmd_truth(ctx, ea);
        if (pipeline->parsed()) return cmd_pipeline(ctx, sc, ba, ea, runs_dir);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    err << app.help();
    return kExitUsage;
}

}  // namespace socioverse::cli
