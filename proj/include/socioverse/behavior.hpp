#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "socioverse/error.hpp"
#include "socioverse/scenario.hpp"

namespace socioverse {

// --- prompts ----------------------------------------------------------------

inline constexpr std::string_view kPostsBegin = "<<<POSTS";
inline constexpr std::string_view kPostsEnd = "POSTS>>>";
inline constexpr std::string_view kBackgroundBegin = "<<<BACKGROUND";
inline constexpr std::string_view kBackgroundEnd = "BACKGROUND>>>";

// Persona lines ("- name: value", attributes sorted by name, then income).
std::string render_persona(const AgentProfile& agent, std::string_view language = "EN");

// Full prompt: persona, optional background, optional posts, questions and the
// answer-format instruction. Throws Error for an unsupported language.
std::string render_prompt(const AgentProfile& agent, std::span<const std::string> context,
                          const Questionnaire& questionnaire, std::string_view scenario_context = {},
                          std::string_view language = "EN");

std::string render_prompt(const PlannedAgent& agent, const SimulationPlan& plan);

// --- responses --------------------------------------------------------------

// Selected labels per question id. Likert answers hold the digit label.
using AnswerMap = std::map<std::string, std::vector<std::string>>;

struct ParseIssue {
    std::string question_id;  // empty when not tied to a question
    std::string message;
};

struct ParsedResponse {
    AnswerMap answers;
    std::vector<ParseIssue> errors;
    std::vector<ParseIssue> warnings;

    bool ok() const noexcept { return errors.empty(); }
    std::string error_summary() const;
};

// Reads "<qid>: <answer>" lines anywhere in the text. Later lines override
// earlier ones. Never throws.
ParsedResponse parse_response(std::string_view raw, const Questionnaire& questionnaire);

// Rule oracle: options[oracle_hash(agent, question, seed) % |options|].
std::uint64_t oracle_hash(std::string_view agent_id, std::string_view question_id, std::uint64_t seed);
std::string rule_oracle_answer(const AgentProfile& agent, const Question& question, std::uint64_t seed);
// Transcript the oracle "speaks": one "<qid>: <label>" line per question.
std::string rule_oracle_transcript(const AgentProfile& agent, const Questionnaire& questionnaire, std::uint64_t seed);

// --- backends ---------------------------------------------------------------

enum class BackendKind { http_llm, rule_oracle };

std::string_view to_string(BackendKind kind);
BackendKind backend_kind_from_string(std::string_view s);

struct RetryPolicy {
    std::size_t max_attempts = 3;
    std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(1000), std::chrono::milliseconds(2000),
                                                   std::chrono::milliseconds(4000)};

    // Wait before attempt `attempt` + 1 (attempt counts from 1); the last
    // backoff entry repeats.
    std::chrono::milliseconds delay_after(std::size_t attempt) const;
};

struct BackendDescriptor {
    BackendKind kind = BackendKind::rule_oracle;
    std::string endpoint;  // e.g. http://127.0.0.1:8000/v1/chat/completions
    std::string model;
    std::string api_key_env = "SOCIOVERSE_API_KEY";
    double temperature = 0.7;
    std::size_t max_tokens = 2048;
    RetryPolicy retry;
    std::optional<double> requests_per_minute;  // unset: 60 for http, unlimited for the oracle
    double timeout_seconds = 120.0;
    std::size_t abort_after_failures = 5;  // consecutive agents lost to transport errors

    void validate() const;  // throws Error
    double effective_rpm() const;
    nlohmann::ordered_json to_json() const;  // never includes credentials
    static BackendDescriptor from_json(const nlohmann::json& j);
};

class TransportError : public Error {
public:
    TransportError(std::string what, bool retryable, int status = 0)
        : Error(std::move(what)), retryable_(retryable), status_(status) {}
    bool retryable() const noexcept { return retryable_; }
    int status() const noexcept { return status_; }  // HTTP status, 0 when none was received

private:
    bool retryable_;
    int status_;
};

struct AgentRequest {
    const PlannedAgent& agent;
    const SimulationPlan& plan;
    const std::string& prompt;
    std::size_t attempt;  // 1-based
};

class AgentBackend {
public:
    virtual ~AgentBackend() = default;
    // Raw transcript for one attempt. Throws TransportError on transport failure.
    virtual std::string respond(const AgentRequest& request) = 0;
};

class RuleOracleBackend final : public AgentBackend {
public:
    explicit RuleOracleBackend(std::uint64_t seed) : seed_(seed) {}
    std::string respond(const AgentRequest& request) override;

private:
    std::uint64_t seed_;
};

// Single chat-completion request; returns choices[0].message.content.
// `request_tag` is sent as the X-Socioverse-Agent header.
std::string http_llm_call(const BackendDescriptor& descriptor, std::string_view prompt,
                          std::string_view request_tag = {});

class HttpLlmBackend final : public AgentBackend {
public:
    explicit HttpLlmBackend(BackendDescriptor descriptor);
    std::string respond(const AgentRequest& request) override;

private:
    BackendDescriptor descriptor_;
};

// --- rate limiting ----------------------------------------------------------

// Token bucket refilled continuously at rpm / 60 tokens per second, burst 1.
class RateLimiter {
public:
    explicit RateLimiter(double requests_per_minute);  // <= 0: unlimited
    void acquire();

private:
    using clock = std::chrono::steady_clock;
    double interval_s_;
    std::mutex mutex_;
    clock::time_point next_;
};

// --- runs -------------------------------------------------------------------

struct AnswerSheet {
    std::string agent_id;
    std::optional<std::string> group;
    AnswerMap answers;
    bool valid = false;
    std::vector<std::string> raw_responses;
    std::size_t attempts_used = 0;
    std::vector<std::string> errors;  // diagnostics of failed attempts

    bool operator==(const AnswerSheet&) const = default;
};

// Single choice -> "A", multi choice -> ["A", "C"], Likert -> integer.
nlohmann::ordered_json sheet_to_json(const AnswerSheet& sheet, const Questionnaire& questionnaire);
AnswerSheet sheet_from_json(const nlohmann::json& j, const Questionnaire& questionnaire);
std::vector<AnswerSheet> load_results(const std::filesystem::path& path, const Questionnaire& questionnaire);

struct RunCounts {
    std::size_t completed = 0;
    std::size_t invalid = 0;
    std::size_t unmatched = 0;
    std::size_t not_run = 0;  // left unprocessed by an aborted run
};

struct RunManifest {
    std::string scenario_id;
    std::string plan_hash;
    nlohmann::ordered_json backend;
    std::uint64_t master_seed = 0;
    std::size_t concurrency = 1;
    std::string started_at;
    std::string finished_at;
    RunCounts counts;
    bool aborted = false;
    std::string abort_reason;
    std::map<std::string, std::string> versions;

    nlohmann::ordered_json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

std::string plan_hash(const SimulationPlan& plan);

struct RunOptions {
    std::size_t concurrency = 1;
    std::uint64_t master_seed = 0;
    // Completion-order stream of sheets; the ordered file is written by the caller.
    std::optional<std::filesystem::path> stream_path;
};

struct RunResult {
    std::vector<AnswerSheet> sheets;  // plan order; only processed agents when aborted
    RunManifest manifest;
};

RunResult run_simulation(const SimulationPlan& plan, AgentBackend& backend, const BackendDescriptor& descriptor,
                         const RunOptions& options);

// Writes sheets as JSONL in the given order.
void write_results(const std::filesystem::path& path, std::span<const AnswerSheet> sheets,
                   const Questionnaire& questionnaire);

}  // namespace socioverse
