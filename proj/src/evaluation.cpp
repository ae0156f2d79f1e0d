#include "socioverse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "socioverse/error.hpp"

namespace socioverse {

using nlohmann::json;
using nlohmann::ordered_json;

// --- metrics ----------------------------------------------------------------

double rmse(std::span<const double> pred, std::span<const double> actual) {
    if (pred.size() != actual.size()) {
        throw Error(fmt::format("rmse: length mismatch ({} vs {})", pred.size(), actual.size()));
    }
    if (pred.empty()) throw Error("rmse: empty vectors");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - actual[i];
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(pred.size()));
}

double nrmse(std::span<const double> pred, std::span<const double> actual) {
    const double r = rmse(pred, actual);
    const auto [lo, hi] = std::minmax_element(actual.begin(), actual.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) throw Error("nrmse: actual values are constant, the range normalizer is undefined");
    return r / range;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double epsilon) {
    if (p.size() != q.size()) throw Error(fmt::format("kl_divergence: length mismatch ({} vs {})", p.size(), q.size()));
    if (p.empty()) throw Error("kl_divergence: empty distributions");
    if (!(epsilon >= 0.0)) throw Error("kl_divergence: epsilon must be >= 0");
    auto check = [](std::span<const double> v, const char* name) {
        double s = 0.0;
        for (double x : v) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw Error(fmt::format("kl_divergence: {} has a negative entry", name));
            s += x;
        }
        if (std::abs(s - 1.0) > 1e-9) throw Error(fmt::format("kl_divergence: {} sums to {}, not 1", name, s));
    };
    check(p, "p");
    check(q, "q");
    const double norm = 1.0 + epsilon * static_cast<double>(p.size());
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double ps = (p[i] + epsilon) / norm;
        const double qs = (q[i] + epsilon) / norm;
        if (ps > 0.0) kl += ps * std::log(ps / qs);
    }
    return std::max(kl, 0.0);
}

double accuracy(const WinnerMap& pred, const WinnerMap& actual, std::optional<std::span<const std::string>> subset) {
    std::vector<std::string> groups;
    if (subset) {
        groups.assign(subset->begin(), subset->end());
    } else {
        for (const auto& [g, _] : actual) groups.push_back(g);
        for (const auto& [g, _] : pred) {
            if (!actual.count(g)) throw Error(fmt::format("accuracy: group '{}' has no actual winner", g));
        }
    }
    if (groups.empty()) throw Error("accuracy: no groups to evaluate");
    std::size_t hits = 0;
    for (const auto& g : groups) {
        auto p = pred.find(g);
        auto a = actual.find(g);
        if (p == pred.end()) throw Error(fmt::format("accuracy: group '{}' has no predicted winner", g));
        if (a == actual.end()) throw Error(fmt::format("accuracy: group '{}' has no actual winner", g));
        if (p->second == a->second) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(groups.size());
}

Winner pick_winner(const std::map<std::string, double>& shares) {
    if (shares.empty()) throw Error("pick_winner: no candidates");
    Winner w;
    double best = -1.0;
    for (const auto& [label, share] : shares) {  // map order = lexicographic
        if (share > best) {
            best = share;
            w.label = label;
            w.tie = false;
        } else if (share == best) {
            w.tie = true;
        }
    }
    return w;
}

// --- election ---------------------------------------------------------------

std::map<std::string, double> GroupVotes::share_map() const {
    std::map<std::string, double> m;
    for (std::size_t i = 0; i < candidates.size() && i < shares.size(); ++i) m[candidates[i]] = shares[i];
    return m;
}

WinnerReport winner_takes_all(std::span<const AnswerSheet> sheets, const Question& vote_question,
                              std::span<const std::string> expected_groups) {
    if (vote_question.kind != AnswerKind::single_choice) {
        throw Error(fmt::format("vote question {} is not single choice", vote_question.id));
    }
    WinnerReport report;
    auto blank = [&] {
        GroupVotes g;
        for (const auto& o : vote_question.options) g.candidates.push_back(o.label);
        g.counts.assign(g.candidates.size(), 0);
        return g;
    };
    for (const auto& name : expected_groups) report.groups.emplace(name, blank());

    for (const auto& s : sheets) {
        if (!s.group) throw Error(fmt::format("sheet {} carries no group", s.agent_id));
        auto [it, _] = report.groups.try_emplace(*s.group, blank());
        if (!s.valid) continue;
        auto a = s.answers.find(vote_question.id);
        if (a == s.answers.end() || a->second.empty()) continue;
        const auto* opt = vote_question.option(a->second.front());
        if (!opt) continue;
        auto& g = it->second;
        ++g.counts[static_cast<std::size_t>(opt - vote_question.options.data())];
        ++g.valid;
    }

    for (auto& [name, g] : report.groups) {
        if (g.valid == 0) {
            report.warnings.push_back(fmt::format("group {} has no valid sheets", name));
            continue;
        }
        g.shares.resize(g.counts.size());
        for (std::size_t i = 0; i < g.counts.size(); ++i) {
            g.shares[i] = static_cast<double>(g.counts[i]) / static_cast<double>(g.valid);
        }
        std::map<std::string, double> counts;
        for (std::size_t i = 0; i < g.counts.size(); ++i) counts[g.candidates[i]] = static_cast<double>(g.counts[i]);
        const auto w = pick_winner(counts);
        g.winner = w.label;
        g.tie = w.tie;
    }
    return report;
}

// --- Likert -----------------------------------------------------------------

const LikertSummary* LikertAggregate::find(std::string_view dimension) const {
    for (const auto& d : dimensions) {
        if (d.dimension == dimension) return &d;
    }
    return nullptr;
}

LikertAggregate likert_aggregate(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire) {
    LikertAggregate agg;
    for (const auto& s : sheets) {
        if (!s.valid) ++agg.excluded_invalid;
    }
    for (const auto& dim : questionnaire.dimensions) {
        std::vector<const Question*> qs;
        for (const auto& qid : dim.question_ids) {
            const auto* q = questionnaire.find(qid);
            if (q->kind != AnswerKind::likert_1_5) {
                throw Error(fmt::format("dimension {} holds non-Likert question {}", dim.tag, qid));
            }
            qs.push_back(q);
        }
        std::array<std::size_t, 5> hist{};
        std::size_t n = 0;
        for (const auto& s : sheets) {
            if (!s.valid) continue;
            for (const auto* q : qs) {
                auto a = s.answers.find(q->id);
                if (a == s.answers.end() || a->second.empty()) continue;
                const auto* o = q->option(a->second.front());
                if (!o || !o->numeric_value) continue;
                ++hist[static_cast<std::size_t>(*o->numeric_value) - 1];
                ++n;
            }
        }
        if (n == 0) {
            agg.warnings.push_back(fmt::format("dimension {} has no answers", dim.tag));
            continue;
        }
        LikertSummary sum;
        sum.dimension = dim.tag;
        sum.values = n;
        double total = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            sum.distribution[k] = static_cast<double>(hist[k]) / static_cast<double>(n);
            total += static_cast<double>((k + 1) * hist[k]);
        }
        sum.mean = total / static_cast<double>(n);
        agg.dimensions.push_back(sum);
    }
    return agg;
}

// --- spending ---------------------------------------------------------------

double interval_midpoint(const Interval& interval) {
    if (!interval.hi) return 1.25 * interval.lo;
    return (interval.lo + *interval.hi) / 2.0;
}

std::vector<std::string> spending_categories(const Questionnaire& questionnaire) {
    std::vector<std::string> cats;
    for (const auto& q : questionnaire.questions) {
        if (q.is_spending() && std::find(cats.begin(), cats.end(), q.dimension) == cats.end()) {
            cats.push_back(q.dimension);
        }
    }
    return cats;
}

SpendingAggregate spending_aggregate(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire) {
    SpendingAggregate agg;
    agg.categories = spending_categories(questionnaire);
    if (agg.categories.empty()) throw Error(fmt::format("questionnaire {} has no spending questions", questionnaire.id));
    const std::size_t k = agg.categories.size();

    std::vector<std::pair<const Question*, std::size_t>> spend_questions;
    for (const auto& q : questionnaire.questions) {
        if (!q.is_spending()) continue;
        const auto c = static_cast<std::size_t>(
            std::find(agg.categories.begin(), agg.categories.end(), q.dimension) - agg.categories.begin());
        spend_questions.emplace_back(&q, c);
    }

    std::vector<double> overall(k, 0.0);
    std::map<std::string, std::vector<double>> sums;
    for (const auto& s : sheets) {
        if (!s.valid) {
            ++agg.excluded_invalid;
            continue;
        }
        std::vector<double> spend(k, 0.0);
        for (const auto& [q, c] : spend_questions) {
            auto a = s.answers.find(q->id);
            if (a == s.answers.end() || a->second.empty()) continue;
            if (const auto* o = q->option(a->second.front()); o && o->interval) spend[c] += interval_midpoint(*o->interval);
        }
        const double total = std::accumulate(spend.begin(), spend.end(), 0.0);
        if (!(total > 0.0)) {
            ++agg.excluded_zero;
            agg.warnings.push_back(fmt::format("agent {} reports zero total spending", s.agent_id));
            continue;
        }
        for (auto& x : spend) x /= total;
        for (std::size_t c = 0; c < k; ++c) overall[c] += spend[c];
        ++agg.agents;
        if (s.group) {
            auto& g = sums[*s.group];
            if (g.empty()) g.assign(k, 0.0);
            for (std::size_t c = 0; c < k; ++c) g[c] += spend[c];
            ++agg.group_agents[*s.group];
        }
    }
    if (agg.agents == 0) {
        agg.warnings.push_back("no agent contributed spending shares");
        return agg;
    }
    for (auto& x : overall) x /= static_cast<double>(agg.agents);
    agg.overall = std::move(overall);
    for (auto& [name, g] : sums) {
        const double n = static_cast<double>(agg.group_agents[name]);
        for (auto& x : g) x /= n;
        agg.groups[name] = std::move(g);
    }
    return agg;
}

// --- ground truth -----------------------------------------------------------

namespace {

void check_distribution(std::span<const double> v, const std::string& what) {
    double s = 0.0;
    for (double x : v) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw Error(fmt::format("ground truth {}: negative or non-finite share", what));
        s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw Error(fmt::format("ground truth {}: shares sum to {}, not 1", what, s));
}

}  // namespace

void GroundTruth::validate() const {
    switch (kind) {
        case ScenarioKind::election:
            if (vote_shares.empty()) throw Error("ground truth: no groups");
            for (const auto& [g, shares] : vote_shares) {
                std::vector<double> v;
                for (const auto& [_, x] : shares) v.push_back(x);
                check_distribution(v, "group " + g);
            }
            break;
        case ScenarioKind::news:
            if (dimensions.empty()) throw Error("ground truth: no dimensions");
            for (const auto& [d, t] : dimensions) {
                check_distribution(t.distribution, "dimension " + d);
                if (!(t.mean >= 1.0 && t.mean <= 5.0)) throw Error(fmt::format("ground truth dimension {}: mean outside [1, 5]", d));
            }
            break;
        case ScenarioKind::economic:
            if (categories.empty()) throw Error("ground truth: no categories");
            if (overall.size() != categories.size()) throw Error("ground truth: overall shares do not match categories");
            check_distribution(overall, "overall");
            for (const auto& [g, v] : groups) {
                if (v.size() != categories.size()) throw Error(fmt::format("ground truth group {}: wrong length", g));
                check_distribution(v, "group " + g);
            }
            break;
    }
}

ordered_json GroundTruth::to_json() const {
    ordered_json j;
    j["kind"] = to_string(kind);
    switch (kind) {
        case ScenarioKind::election: {
            auto groups_j = ordered_json::object();
            for (const auto& [g, shares] : vote_shares) {
                auto s = ordered_json::object();
                for (const auto& [label, x] : shares) s[label] = x;
                groups_j[g] = std::move(s);
            }
            j["groups"] = std::move(groups_j);
            break;
        }
        case ScenarioKind::news: {
            auto dims = ordered_json::object();
            for (const auto& [d, t] : dimensions) dims[d] = {{"distribution", t.distribution}, {"mean", t.mean}};
            j["dimensions"] = std::move(dims);
            break;
        }
        case ScenarioKind::economic: {
            j["categories"] = categories;
            j["overall"] = overall;
            auto groups_j = ordered_json::object();
            for (const auto& [g, v] : groups) groups_j[g] = v;
            j["groups"] = std::move(groups_j);
            break;
        }
    }
    return j;
}

GroundTruth GroundTruth::from_json(const json& j) {
    GroundTruth t;
    t.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
    switch (t.kind) {
        case ScenarioKind::election:
            t.vote_shares = j.at("groups").get<std::map<std::string, std::map<std::string, double>>>();
            break;
        case ScenarioKind::news:
            for (const auto& [d, v] : j.at("dimensions").items()) {
                LikertTarget lt;
                const auto dist = v.at("distribution").get<std::vector<double>>();
                if (dist.size() != 5) throw Error(fmt::format("ground truth dimension {}: need 5 bins", d));
                std::copy(dist.begin(), dist.end(), lt.distribution.begin());
                if (auto it = v.find("mean"); it != v.end()) {
                    lt.mean = it->get<double>();
                } else {
                    for (std::size_t k = 0; k < 5; ++k) lt.mean += static_cast<double>(k + 1) * lt.distribution[k];
                }
                t.dimensions[d] = lt;
            }
            break;
        case ScenarioKind::economic:
            t.categories = j.at("categories").get<std::vector<std::string>>();
            t.overall = j.at("overall").get<std::vector<double>>();
            if (auto it = j.find("groups"); it != j.end()) {
                t.groups = it->get<std::map<std::string, std::vector<double>>>();
            }
            break;
    }
    t.validate();
    return t;
}

GroundTruth load_ground_truth(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open ground truth file " + path.string());
    try {
        return GroundTruth::from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

GroundTruth derive_ground_truth(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire,
                                ScenarioKind kind, const std::string& vote_question) {
    GroundTruth t;
    t.kind = kind;
    switch (kind) {
        case ScenarioKind::election: {
            const auto* q = questionnaire.find(vote_question);
            if (!q) throw Error(fmt::format("vote question '{}' not in questionnaire", vote_question));
            const auto wta = winner_takes_all(sheets, *q);
            for (const auto& [g, votes] : wta.groups) {
                if (votes.valid > 0) t.vote_shares[g] = votes.share_map();
            }
            break;
        }
        case ScenarioKind::news: {
            const auto agg = likert_aggregate(sheets, questionnaire);
            for (const auto& d : agg.dimensions) {
                t.dimensions[d.dimension] = {d.distribution, d.mean};
            }
            break;
        }
        case ScenarioKind::economic: {
            auto agg = spending_aggregate(sheets, questionnaire);
            t.categories = agg.categories;
            t.overall = agg.overall;
            t.groups = agg.groups;
            break;
        }
    }
    t.validate();
    return t;
}

// --- reports ----------------------------------------------------------------

ordered_json MetricSet::to_json() const {
    ordered_json j = ordered_json::object();
    if (acc) j["acc"] = *acc;
    if (rmse) j["rmse"] = *rmse;
    if (nrmse) j["nrmse"] = *nrmse;
    if (kl_div) j["kl_div"] = *kl_div;
    return j;
}

ordered_json EvaluationReport::to_json() const {
    ordered_json j;
    j["scenario_id"] = scenario_id;
    j["kind"] = to_string(kind);
    j["sheets"] = sheets;
    j["invalid_excluded"] = invalid_excluded;
    j["metrics"] = metrics.to_json();
    auto subs = ordered_json::object();
    for (const auto& [name, m] : subsets) subs[name] = m.to_json();
    j["subsets"] = std::move(subs);
    j["breakdown"] = breakdown;
    j["warnings"] = warnings;
    j["notes"] = notes;
    return j;
}

namespace {

void metric_rows(const MetricSet& m, const std::function<void(const char*, const std::optional<double>&)>& row) {
    row("acc", m.acc);
    row("rmse", m.rmse);
    row("nrmse", m.nrmse);
    row("kl_div", m.kl_div);
}

}  // namespace

std::string EvaluationReport::to_text() const {
    std::string out;
    out += fmt::format("scenario  {} ({})\n", scenario_id, to_string(kind));
    out += fmt::format("sheets    {} ({} invalid excluded)\n\n", sheets, invalid_excluded);

    std::vector<std::pair<std::string, const MetricSet*>> cols{{"overall", &metrics}};
    for (const auto& [name, m] : subsets) cols.emplace_back(name, &m);
    std::size_t width = 10;
    for (const auto& [name, _] : cols) width = std::max(width, name.size() + 2);

    out += fmt::format("{:<8}", "metric");
    for (const auto& [name, _] : cols) out += fmt::format("{:>{}}", name, width);
    out += "\n";
    auto line = [&](const char* metric, auto get) {
        bool any = false;
        for (const auto& [_, m] : cols) any = any || get(*m).has_value();
        if (!any) return;
        out += fmt::format("{:<8}", metric);
        for (const auto& [_, m] : cols) {
            const auto v = get(*m);
            out += v ? fmt::format("{:>{}.6f}", *v, width) : fmt::format("{:>{}}", "-", width);
        }
        out += "\n";
    };
    line("acc", [](const MetricSet& m) { return m.acc; });
    line("rmse", [](const MetricSet& m) { return m.rmse; });
    line("nrmse", [](const MetricSet& m) { return m.nrmse; });
    line("kl_div", [](const MetricSet& m) { return m.kl_div; });

    for (const auto& n : notes) out += "note: " + n + "\n";
    for (const auto& w : warnings) out += "warning: " + w + "\n";
    return out;
}

std::string EvaluationReport::to_csv() const {
    std::string out = "section,name,metric,value\n";
    auto emit = [&](std::string_view section, std::string_view name, const MetricSet& m) {
        metric_rows(m, [&](const char* metric, const std::optional<double>& v) {
            if (v) out += fmt::format("{},{},{},{:.17g}\n", section, name, metric, *v);
        });
    };
    emit("overall", "all", metrics);
    for (const auto& [name, m] : subsets) emit("subset", name, m);
    for (const auto& [name, g] : breakdown.items()) {
        for (const auto& [field, v] : g.items()) {
            if (v.is_number()) out += fmt::format("group,{},{},{:.17g}\n", name, field, v.get<double>());
        }
    }
    return out;
}

namespace {

void check_subset_groups(const SubsetMap& subsets, const std::set<std::string>& groups) {
    for (const auto& [name, members] : subsets) {
        if (members.empty()) throw Error(fmt::format("subset {} is empty", name));
        for (const auto& g : members) {
            if (!groups.count(g)) throw Error(fmt::format("subset {} names unknown group '{}'", name, g));
        }
    }
}

std::optional<double> safe_nrmse(std::span<const double> pred, std::span<const double> actual,
                                 std::vector<std::string>& warnings, std::string_view where) {
    try {
        return nrmse(pred, actual);
    } catch (const Error& e) {
        warnings.push_back(fmt::format("{}: nrmse omitted ({})", where, e.what()));
        return std::nullopt;
    }
}

void evaluate_election(std::span<const AnswerSheet> sheets, const GroundTruth& truth, const EvaluationContext& ctx,
                       EvaluationReport& report) {
    const auto* q = ctx.questionnaire->find(ctx.vote_question);
    if (!q) throw Error(fmt::format("vote question '{}' not in questionnaire", ctx.vote_question));

    std::vector<std::string> truth_groups;
    std::set<std::string> group_set;
    for (const auto& [g, _] : truth.vote_shares) {
        truth_groups.push_back(g);
        group_set.insert(g);
    }
    check_subset_groups(ctx.subsets, group_set);

    auto wta = winner_takes_all(sheets, *q, truth_groups);
    report.warnings.insert(report.warnings.end(), wta.warnings.begin(), wta.warnings.end());

    WinnerMap pred, actual;
    for (const auto& [g, shares] : truth.vote_shares) actual[g] = pick_winner(shares).label;
    for (const auto& [g, votes] : wta.groups) {
        if (!group_set.count(g)) {
            report.warnings.push_back(fmt::format("group {} is not in the ground truth and was ignored", g));
            continue;
        }
        if (votes.winner) pred[g] = *votes.winner;
    }

    auto score = [&](std::span<const std::string> groups) {
        MetricSet m;
        std::vector<std::string> scored;
        std::vector<double> p, a;
        for (const auto& g : groups) {
            if (!pred.count(g)) continue;  // empty group, excluded with a warning above
            scored.push_back(g);
            const auto& votes = wta.groups.at(g);
            const auto& ts = truth.vote_shares.at(g);
            for (std::size_t i = 0; i < votes.candidates.size(); ++i) {
                p.push_back(votes.shares[i]);
                auto it = ts.find(votes.candidates[i]);
                a.push_back(it == ts.end() ? 0.0 : it->second);
            }
        }
        if (scored.empty()) return m;
        m.acc = accuracy(pred, actual, std::span<const std::string>(scored));
        m.rmse = rmse(p, a);
        return m;
    };
    report.metrics = score(truth_groups);
    for (const auto& [name, members] : ctx.subsets) report.subsets[name] = score(members);

    for (const auto& g : truth_groups) {
        const auto& votes = wta.groups.at(g);
        ordered_json row;
        row["valid"] = votes.valid;
        row["predicted"] = votes.winner ? ordered_json(*votes.winner) : ordered_json(nullptr);
        row["actual"] = actual.at(g);
        row["tie"] = votes.tie;
        row["correct"] = votes.winner && *votes.winner == actual.at(g);
        auto sim = ordered_json::object();
        for (const auto& [label, x] : votes.share_map()) sim[label] = x;
        row["simulated_shares"] = std::move(sim);
        report.breakdown[g] = std::move(row);
    }
}

void evaluate_news(std::span<const AnswerSheet> sheets, const GroundTruth& truth, const EvaluationContext& ctx,
                   EvaluationReport& report) {
    if (!ctx.subsets.empty()) report.warnings.push_back("subsets are ignored for news scenarios");
    const auto agg = likert_aggregate(sheets, *ctx.questionnaire);
    report.warnings.insert(report.warnings.end(), agg.warnings.begin(), agg.warnings.end());

    std::vector<double> sim_means, truth_means;
    double kl_sum = 0.0;
    std::size_t dims = 0;
    for (const auto& d : ctx.questionnaire->dimensions) {
        auto t = truth.dimensions.find(d.tag);
        const auto* s = agg.find(d.tag);
        if (t == truth.dimensions.end()) {
            report.warnings.push_back(fmt::format("dimension {} has no ground truth", d.tag));
            continue;
        }
        if (!s) continue;
        const double kl = kl_divergence(t->second.distribution, s->distribution);
        kl_sum += kl;
        ++dims;
        sim_means.push_back(s->mean);
        truth_means.push_back(t->second.mean);
        report.breakdown[d.tag] = {{"simulated_mean", s->mean},
                                   {"truth_mean", t->second.mean},
                                   {"kl_div", kl},
                                   {"simulated_distribution", s->distribution},
                                   {"truth_distribution", t->second.distribution}};
    }
    for (const auto& [tag, _] : truth.dimensions) {
        if (!ctx.questionnaire->dimension(tag)) {
            report.warnings.push_back(fmt::format("ground truth dimension {} is not in the questionnaire", tag));
        }
    }
    if (dims == 0) throw Error("no dimension could be scored");
    report.metrics.kl_div = kl_sum / static_cast<double>(dims);
    report.metrics.rmse = rmse(sim_means, truth_means);
    report.metrics.nrmse = safe_nrmse(sim_means, truth_means, report.warnings, "dimension means");
    report.notes.push_back("kl_div is the mean over dimensions of KL(truth || simulated) on 5-bin distributions");
}

void evaluate_economic(std::span<const AnswerSheet> sheets, const GroundTruth& truth, const EvaluationContext& ctx,
                       EvaluationReport& report) {
    const auto agg = spending_aggregate(sheets, *ctx.questionnaire);
    report.warnings.insert(report.warnings.end(), agg.warnings.begin(), agg.warnings.end());
    if (agg.overall.empty()) throw Error("no agent contributed spending shares");

    // Align truth categories to the questionnaire's order.
    std::vector<std::size_t> idx;
    for (const auto& c : agg.categories) {
        auto it = std::find(truth.categories.begin(), truth.categories.end(), c);
        if (it == truth.categories.end()) throw Error(fmt::format("ground truth lacks spending category '{}'", c));
        idx.push_back(static_cast<std::size_t>(it - truth.categories.begin()));
    }
    if (truth.categories.size() != agg.categories.size()) {
        throw Error("ground truth has spending categories the questionnaire does not ask about");
    }
    auto aligned = [&](const std::vector<double>& v) {
        std::vector<double> out;
        for (auto i : idx) out.push_back(v[i]);
        return out;
    };

    const auto truth_overall = aligned(truth.overall);
    report.metrics.kl_div = kl_divergence(truth_overall, agg.overall);
    report.metrics.rmse = rmse(agg.overall, truth_overall);
    report.metrics.nrmse = safe_nrmse(agg.overall, truth_overall, report.warnings, "overall shares");

    std::set<std::string> group_set;
    for (const auto& [g, _] : truth.groups) group_set.insert(g);
    check_subset_groups(ctx.subsets, group_set);

    for (const auto& [g, tv] : truth.groups) {
        auto s = agg.groups.find(g);
        if (s == agg.groups.end()) {
            report.warnings.push_back(fmt::format("group {} has no simulated agents", g));
            continue;
        }
        const auto t = aligned(tv);
        report.breakdown[g] = {{"agents", agg.group_agents.at(g)},
                               {"kl_div", kl_divergence(t, s->second)},
                               {"rmse", rmse(s->second, t)},
                               {"simulated_shares", s->second},
                               {"truth_shares", t}};
    }
    for (const auto& [name, members] : ctx.subsets) {
        MetricSet m;
        std::vector<double> p, a;
        double kl = 0.0;
        std::size_t n = 0;
        for (const auto& g : members) {
            auto s = agg.groups.find(g);
            if (s == agg.groups.end()) continue;
            const auto t = aligned(truth.groups.at(g));
            kl += kl_divergence(t, s->second);
            ++n;
            p.insert(p.end(), s->second.begin(), s->second.end());
            a.insert(a.end(), t.begin(), t.end());
        }
        if (n > 0) {
            m.kl_div = kl / static_cast<double>(n);
            m.rmse = rmse(p, a);
            m.nrmse = safe_nrmse(p, a, report.warnings, "subset " + name);
        }
        report.subsets[name] = m;
    }
    report.notes.push_back("kl_div is KL(truth || simulated) over the category share distribution");
    report.notes.push_back("interval midpoints: closed (lo+hi)/2, open upper 1.25*lo");
}

}  // namespace

EvaluationReport evaluate(std::span<const AnswerSheet> sheets, const GroundTruth& truth,
                          const EvaluationContext& ctx) {
    if (truth.kind != ctx.kind) {
        throw Error(fmt::format("ground truth is for a {} scenario, not {}", to_string(truth.kind), to_string(ctx.kind)));
    }
    if (!ctx.questionnaire) throw Error("evaluate: no questionnaire");
    EvaluationReport report;
    report.scenario_id = ctx.scenario_id;
    report.kind = ctx.kind;
    report.sheets = sheets.size();
    report.invalid_excluded = static_cast<std::size_t>(
        std::count_if(sheets.begin(), sheets.end(), [](const AnswerSheet& s) { return !s.valid; }));

    switch (ctx.kind) {
        case ScenarioKind::election: evaluate_election(sheets, truth, ctx, report); break;
        case ScenarioKind::news: evaluate_news(sheets, truth, ctx, report); break;
        case ScenarioKind::economic: evaluate_economic(sheets, truth, ctx, report); break;
    }
    report.notes.push_back("nrmse normalizes rmse by the ground-truth range");
    return report;
}

}  // namespace socioverse
