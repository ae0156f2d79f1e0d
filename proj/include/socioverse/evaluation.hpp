#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "socioverse/behavior.hpp"
#include "socioverse/scenario.hpp"

namespace socioverse {

inline constexpr double kKlEpsilon = 1e-9;

// --- metrics ----------------------------------------------------------------

double rmse(std::span<const double> pred, std::span<const double> actual);
// rmse / (max(actual) - min(actual)); throws Error when actual is constant.
double nrmse(std::span<const double> pred, std::span<const double> actual);
// KL(p || q) after adding eps to every entry of both vectors and renormalizing.
double kl_divergence(std::span<const double> p, std::span<const double> q, double epsilon = kKlEpsilon);

using WinnerMap = std::map<std::string, std::string>;

// Share of groups whose predicted label equals the actual one, over `subset`
// (all actual groups when absent). Throws Error if a group is missing.
double accuracy(const WinnerMap& pred, const WinnerMap& actual,
                std::optional<std::span<const std::string>> subset = std::nullopt);

// Argmax label; ties go to the lexicographically smallest label.
struct Winner {
    std::string label;
    bool tie = false;
};
Winner pick_winner(const std::map<std::string, double>& shares);

// --- aggregation ------------------------------------------------------------

struct GroupVotes {
    std::vector<std::string> candidates;  // vote question option labels
    std::vector<std::size_t> counts;
    std::vector<double> shares;  // empty when the group has no valid sheet
    std::size_t valid = 0;
    std::optional<std::string> winner;
    bool tie = false;

    std::map<std::string, double> share_map() const;
};

struct WinnerReport {
    std::map<std::string, GroupVotes> groups;
    std::vector<std::string> warnings;
};

// Per-group vote tallies over valid sheets. `expected_groups` are reported even
// when no sheet names them. Throws Error if a sheet has no group.
WinnerReport winner_takes_all(std::span<const AnswerSheet> sheets, const Question& vote_question,
                              std::span<const std::string> expected_groups = {});

struct LikertSummary {
    std::string dimension;
    double mean = 0.0;
    std::array<double, 5> distribution{};
    std::size_t values = 0;
};

struct LikertAggregate {
    std::vector<LikertSummary> dimensions;  // questionnaire order, empty dimensions dropped
    std::size_t excluded_invalid = 0;
    std::vector<std::string> warnings;

    const LikertSummary* find(std::string_view dimension) const;
};

// Pools every Likert value per dimension. Throws Error if a dimension holds a
// non-Likert question.
LikertAggregate likert_aggregate(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire);

// Closed [lo, hi] -> (lo + hi) / 2, open upper bound -> 1.25 * lo.
double interval_midpoint(const Interval& interval);

// Spending categories: dimensions of interval-valued questions, in order.
std::vector<std::string> spending_categories(const Questionnaire& questionnaire);

struct SpendingAggregate {
    std::vector<std::string> categories;
    std::vector<double> overall;
    std::map<std::string, std::vector<double>> groups;
    std::map<std::string, std::size_t> group_agents;
    std::size_t agents = 0;
    std::size_t excluded_invalid = 0;
    std::size_t excluded_zero = 0;
    std::vector<std::string> warnings;
};

// Per agent: category spend from interval midpoints, normalized to shares;
// shares are then averaged per group and overall.
SpendingAggregate spending_aggregate(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire);

// --- ground truth -----------------------------------------------------------

struct LikertTarget {
    std::array<double, 5> distribution{};
    double mean = 0.0;
};

struct GroundTruth {
    ScenarioKind kind = ScenarioKind::election;
    // election: group -> candidate label -> vote share
    std::map<std::string, std::map<std::string, double>> vote_shares;
    // news: dimension -> Likert distribution and mean
    std::map<std::string, LikertTarget> dimensions;
    // economic: category shares, overall and per group
    std::vector<std::string> categories;
    std::vector<double> overall;
    std::map<std::string, std::vector<double>> groups;

    void validate() const;  // throws Error
    nlohmann::ordered_json to_json() const;
    static GroundTruth from_json(const nlohmann::json& j);
};

GroundTruth load_ground_truth(const std::filesystem::path& path);

// Ground truth that a perfect simulator would reproduce from these sheets.
GroundTruth derive_ground_truth(std::span<const AnswerSheet> sheets, const Questionnaire& questionnaire,
                                ScenarioKind kind, const std::string& vote_question = {});

// --- reports ----------------------------------------------------------------

struct MetricSet {
    std::optional<double> acc;
    std::optional<double> rmse;
    std::optional<double> nrmse;
    std::optional<double> kl_div;

    nlohmann::ordered_json to_json() const;
};

struct EvaluationReport {
    std::string scenario_id;
    ScenarioKind kind = ScenarioKind::election;
    MetricSet metrics;
    std::map<std::string, MetricSet> subsets;
    nlohmann::ordered_json breakdown = nlohmann::ordered_json::object();
    std::size_t sheets = 0;
    std::size_t invalid_excluded = 0;
    std::vector<std::string> warnings;
    std::vector<std::string> notes;

    nlohmann::ordered_json to_json() const;
    std::string to_text() const;
    std::string to_csv() const;  // section,name,metric,value rows
};

struct EvaluationContext {
    std::string scenario_id;
    ScenarioKind kind = ScenarioKind::election;
    const Questionnaire* questionnaire = nullptr;
    std::string vote_question;
    SubsetMap subsets;
};

// Throws Error on a kind mismatch or a subset naming an unknown group.
EvaluationReport evaluate(std::span<const AnswerSheet> sheets, const GroundTruth& truth,
                          const EvaluationContext& context);

}  // namespace socioverse
