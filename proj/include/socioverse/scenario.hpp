#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "socioverse/synthesis.hpp"
#include "socioverse/user_pool.hpp"

namespace socioverse {

enum class AnswerKind { single_choice, multi_choice, likert_1_5 };

std::string_view to_string(AnswerKind kind);

// Closed [lo, hi], or [lo, inf) when hi is absent.
struct Interval {
    double lo = 0.0;
    std::optional<double> hi;

    bool operator==(const Interval&) const = default;
};

struct Option {
    std::string label;
    std::string text;
    std::optional<double> numeric_value;
    std::optional<Interval> interval;

    bool operator==(const Option&) const = default;
};

struct Question {
    std::string id;
    std::string text;
    std::string dimension;
    AnswerKind kind = AnswerKind::single_choice;
    std::vector<Option> options;

    const Option* option(std::string_view label) const;
    // Spend questions: single choice with an interval on every option.
    bool is_spending() const;
    bool operator==(const Question&) const = default;
};

struct Dimension {
    std::string tag;
    std::string name;
    std::vector<std::string> question_ids;

    bool operator==(const Dimension&) const = default;
};

struct Questionnaire {
    std::string id;
    std::string language = "EN";
    std::string title;
    bool canonical = true;  // false for placeholder instruments
    std::vector<Question> questions;
    std::vector<Dimension> dimensions;

    const Question* find(std::string_view id) const;
    const Dimension* dimension(std::string_view tag) const;
    // Throws FormatError describing the first violated invariant.
    void validate() const;

    static Questionnaire from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
    bool operator==(const Questionnaire&) const = default;
};

Questionnaire load_questionnaire(const std::filesystem::path& path);

// --- scenario configuration -------------------------------------------------

enum class ScenarioKind { election, news, economic };
enum class ScenarioType { questionnaire, indepth_interview, behavior_experiment, social_media_interaction };
enum class PopulationMethod { ipf, ids, regional };

std::string_view to_string(ScenarioKind kind);
std::string_view to_string(PopulationMethod method);
ScenarioKind scenario_kind_from_string(std::string_view s);

struct PopulationSpec {
    PopulationMethod method = PopulationMethod::ipf;
    std::size_t size = 0;
    std::vector<std::string> attributes;
    std::vector<std::string> match_attributes;  // empty: use `attributes`

    // ipf
    std::optional<std::filesystem::path> seed_table;
    std::optional<std::filesystem::path> targets;
    IpfOptions ipf;

    // ids
    Predicate reference;
    IdsOptions ids;

    // regional
    std::optional<std::filesystem::path> regions;
    RegionalOptions regional;
};

struct ContextPolicy {
    bool include_posts = true;
    std::size_t max_posts = 10;
    std::optional<std::filesystem::path> extra_context;
};

struct AblationFlags {
    bool no_knowledge = false;
    bool random_demographics = false;
};

struct GenerationSettings {
    double temperature = 0.7;
    std::size_t max_tokens = 2048;
    std::string prompt_language = "EN";
};

struct EvaluationSpec {
    std::string vote_question;  // election only
    std::optional<std::filesystem::path> subsets;
};

struct ScenarioConfig {
    std::string scenario_id;
    ScenarioKind kind = ScenarioKind::election;
    ScenarioType type = ScenarioType::questionnaire;
    std::filesystem::path base_dir;  // relative references resolve here

    std::filesystem::path questionnaire;
    std::optional<std::filesystem::path> pool;
    std::optional<std::filesystem::path> schema;
    PopulationSpec population;
    ContextPolicy context;
    std::optional<std::string> group_key;
    std::optional<std::filesystem::path> ground_truth;
    AblationFlags ablation;
    GenerationSettings generation;
    EvaluationSpec evaluation;

    std::filesystem::path resolve(const std::filesystem::path& p) const;
    std::vector<std::string> effective_match_attributes() const;

    static ScenarioConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

ScenarioConfig load_scenario(const std::filesystem::path& path);

// Group lists keyed by subset name, e.g. {"battleground": ["PA", "GA"]}.
using SubsetMap = std::map<std::string, std::vector<std::string>>;
SubsetMap load_subsets(const std::filesystem::path& path);

struct Finding {
    enum class Severity { error, warning };
    Severity severity = Severity::error;
    std::string code;
    std::string message;
};

// Empty result means the scenario is runnable.
std::vector<Finding> validate_scenario(const ScenarioConfig& config);
bool has_errors(std::span<const Finding> findings);

// Prompt template languages shipped with the behavior engine.
std::span<const std::string_view> prompt_languages();

// --- plans ------------------------------------------------------------------

struct PlannedAgent {
    AgentProfile profile;
    std::vector<std::string> context;  // post texts, newest first

    bool operator==(const PlannedAgent&) const = default;
};

struct SimulationPlan {
    std::string scenario_id;
    ScenarioKind kind = ScenarioKind::election;
    std::uint64_t seed = 0;
    Questionnaire questionnaire;
    std::optional<std::string> group_key;
    std::string scenario_context;
    GenerationSettings generation;
    AblationFlags ablation;
    std::vector<PlannedAgent> agents;
    nlohmann::ordered_json diagnostics = nlohmann::ordered_json::object();

    nlohmann::ordered_json to_json() const;
    static SimulationPlan from_json(const nlohmann::ordered_json& j);
    std::string serialize() const;  // canonical text form; hashing and files use this
};

SimulationPlan load_plan(const std::filesystem::path& path);

// Loads the pool named by the config (empty pool when none is configured).
UserPool load_scenario_pool(const ScenarioConfig& config);

// Materializes the population, the context bundles and the questionnaire.
SimulationPlan build_plan(const ScenarioConfig& config, const UserPool& pool, std::uint64_t seed);

}  // namespace socioverse
