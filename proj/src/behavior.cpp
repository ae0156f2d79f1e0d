#include "socioverse/behavior.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "socioverse/rng.hpp"

#ifndef SOCIOVERSE_VERSION
#define SOCIOVERSE_VERSION "0.0.0"
#endif

namespace socioverse {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct PromptText {
    std::string_view intro;
    std::string_view persona_heading;
    std::string_view income;
    std::string_view background_heading;
    std::string_view posts_heading;
    std::string_view questions_heading;
    std::string_view single_choice;
    std::string_view multi_choice;
    std::string_view likert;
    std::string_view format_heading;
    std::string_view format_rules;
};

constexpr PromptText kEnglish{
    "You are taking part in a survey as the person described below. Answer every question the way this person "
    "would.",
    "# Persona",
    "income",
    "# Background",
    "# Recent posts by this person",
    "# Questions",
    "single choice",
    "multiple choice",
    "scale 1-5",
    "# Answer format",
    "You may reason before answering. Finish with exactly one line per question, in the form\n"
    "<question id>: <label>\n"
    "Use the option label (letter or digit) only. For multiple choice questions list every chosen label, separated "
    "by commas.",
};

constexpr PromptText kChinese{
    "你正在以下面描述的这个人的身份参加一项问卷调查。请按照这个人的想法回答每一个问题。",
    "# 人物设定",
    "收入",
    "# 背景信息",
    "# 此人最近发布的帖子",
    "# 问题",
    "单选",
    "多选",
    "1-5 分量表",
    "# 回答格式",
    "你可以先进行思考。最后请每个问题输出一行，格式为\n"
    "<question id>: <label>\n"
    "只填写选项标号（字母或数字）。多选题请列出所有选中的标号，用英文逗号分隔。",
};

const PromptText& prompt_text(std::string_view language) {
    if (language == "EN") return kEnglish;
    if (language == "ZH") return kChinese;
    throw Error(fmt::format("no prompt template for language '{}'", language));
}

std::string_view kind_label(const PromptText& t, AnswerKind kind) {
    switch (kind) {
        case AnswerKind::single_choice: return t.single_choice;
        case AnswerKind::multi_choice: return t.multi_choice;
        case AnswerKind::likert_1_5: return t.likert;
    }
    return t.single_choice;
}

}  // namespace

std::string render_persona(const AgentProfile& agent, std::string_view language) {
    const auto& t = prompt_text(language);
    std::string out;
    for (const auto& [name, value] : agent.attributes) out += fmt::format("- {}: {}\n", name, value);
    if (agent.income) out += fmt::format("- {}: {:.2f}\n", t.income, *agent.income);
    return out;
}

std::string render_prompt(const AgentProfile& agent, std::span<const std::string> context,
                          const Questionnaire& questionnaire, std::string_view scenario_context,
                          std::string_view language) {
    const auto& t = prompt_text(language);
    std::string out;
    out += t.intro;
    out += "\n\n";
    out += t.persona_heading;
    out += "\n";
    out += render_persona(agent, language);

    if (!scenario_context.empty()) {
        out += fmt::format("\n{}\n{}\n{}\n{}\n", t.background_heading, kBackgroundBegin, scenario_context, kBackgroundEnd);
    }
    if (!context.empty()) {
        out += fmt::format("\n{}\n{}\n", t.posts_heading, kPostsBegin);
        for (std::size_t i = 0; i < context.size(); ++i) out += fmt::format("[{}] {}\n", i + 1, context[i]);
        out += fmt::format("{}\n", kPostsEnd);
    }

    out += fmt::format("\n{}\n", t.questions_heading);
    for (const auto& q : questionnaire.questions) {
        out += fmt::format("{} ({}): {}\n", q.id, kind_label(t, q.kind), q.text);
        for (const auto& o : q.options) out += fmt::format("   {}. {}\n", o.label, o.text);
    }
    out += fmt::format("\n{}\n{}\n", t.format_heading, t.format_rules);
    return out;
}

std::string render_prompt(const PlannedAgent& agent, const SimulationPlan& plan) {
    return render_prompt(agent.profile, agent.context, plan.questionnaire, plan.scenario_context,
                         plan.generation.prompt_language);
}

// --- parsing ----------------------------------------------------------------

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

// Strips markdown decoration such as "- ", "**", "`" and "> " around a token.
std::string_view strip_decoration(std::string_view s) {
    constexpr std::string_view deco = "*_`#>-+\"' \t";
    while (!s.empty() && deco.find(s.front()) != std::string_view::npos) s.remove_prefix(1);
    while (!s.empty() && deco.find(s.back()) != std::string_view::npos) s.remove_suffix(1);
    return s;
}

std::string_view strip_value(std::string_view s) {
    s = strip_decoration(trim(s));
    while (!s.empty() && (s.back() == '.' || s.back() == '*' || s.back() == '`')) s.remove_suffix(1);
    return trim(s);
}

// Splits at the first ':' or fullwidth colon.
bool split_colon(std::string_view line, std::string_view& key, std::string_view& value) {
    constexpr std::string_view fullwidth = "\xEF\xBC\x9A";
    const auto ascii = line.find(':');
    const auto wide = line.find(fullwidth);
    if (ascii == std::string_view::npos && wide == std::string_view::npos) return false;
    if (wide == std::string_view::npos || (ascii != std::string_view::npos && ascii < wide)) {
        key = line.substr(0, ascii);
        value = line.substr(ascii + 1);
    } else {
        key = line.substr(0, wide);
        value = line.substr(wide + fullwidth.size());
    }
    return true;
}

bool looks_like_qid(std::string_view s) {
    if (s.size() < 2 || (s[0] != 'Q' && s[0] != 'q')) return false;
    return std::all_of(s.begin() + 1, s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

std::string_view leading_token(std::string_view s) {
    std::size_t n = 0;
    while (n < s.size() && std::isalnum(static_cast<unsigned char>(s[n]))) ++n;
    return s.substr(0, n);
}

const Option* match_option(const Question& q, std::string_view value) {
    const auto v = lower(value);
    for (const auto& o : q.options) {
        if (lower(o.label) == v) return &o;
    }
    const auto token = lower(leading_token(value));
    if (!token.empty()) {
        for (const auto& o : q.options) {
            if (lower(o.label) == token) return &o;
        }
    }
    for (const auto& o : q.options) {
        if (!o.text.empty() && lower(o.text) == v) return &o;
    }
    return nullptr;
}

std::optional<std::vector<std::string>> interpret(const Question& q, std::string_view value, std::string& why) {
    value = strip_value(value);
    if (value.empty()) {
        why = "empty answer";
        return std::nullopt;
    }
    if (q.kind != AnswerKind::multi_choice) {
        if (const auto* o = match_option(q, value)) return std::vector<std::string>{o->label};
        why = fmt::format("'{}' is not one of the options", value);
        return std::nullopt;
    }

    std::vector<bool> chosen(q.options.size(), false);
    std::size_t count = 0;
    std::size_t i = 0;
    while (i < value.size()) {
        std::size_t j = i;
        while (j < value.size() && std::isalnum(static_cast<unsigned char>(value[j]))) ++j;
        if (j == i) {
            ++i;
            continue;
        }
        const auto token = value.substr(i, j - i);
        const auto* o = match_option(q, token);
        if (!o) {
            why = fmt::format("'{}' is not one of the options", token);
            return std::nullopt;
        }
        const auto idx = static_cast<std::size_t>(o - q.options.data());
        if (!chosen[idx]) ++count;
        chosen[idx] = true;
        i = j;
    }
    if (count == 0) {
        why = "no option selected";
        return std::nullopt;
    }
    std::vector<std::string> labels;
    for (std::size_t k = 0; k < q.options.size(); ++k) {
        if (chosen[k]) labels.push_back(q.options[k].label);
    }
    return labels;
}

}  // namespace

std::string ParsedResponse::error_summary() const {
    std::string out;
    for (const auto& e : errors) {
        if (!out.empty()) out += "; ";
        out += e.question_id.empty() ? e.message : e.question_id + ": " + e.message;
    }
    return out;
}

ParsedResponse parse_response(std::string_view raw, const Questionnaire& questionnaire) {
    ParsedResponse result;
    std::map<std::string, const Question*> by_lower;
    for (const auto& q : questionnaire.questions) by_lower.emplace(lower(q.id), &q);
    std::map<std::string, std::string> rejected;  // qid -> reason of the last illegal line

    std::size_t start = 0;
    while (start <= raw.size()) {
        auto end = raw.find('\n', start);
        if (end == std::string_view::npos) end = raw.size();
        const auto line = raw.substr(start, end - start);
        start = end + 1;

        std::string_view key, value;
        if (!split_colon(line, key, value)) continue;
        key = strip_decoration(trim(key));
        const auto it = by_lower.find(lower(key));
        if (it == by_lower.end()) {
            if (looks_like_qid(key)) {
                result.warnings.push_back({std::string(key), "answer for unknown question ignored"});
            }
            continue;
        }
        const Question& q = *it->second;
        std::string why;
        if (auto labels = interpret(q, value, why)) {
            result.answers[q.id] = std::move(*labels);
            rejected.erase(q.id);
        } else {
            rejected[q.id] = std::move(why);
        }
    }

    for (const auto& q : questionnaire.questions) {
        const bool answered = result.answers.count(q.id) > 0;
        auto r = rejected.find(q.id);
        if (r != rejected.end()) {
            if (answered) result.warnings.push_back({q.id, "illegal answer ignored: " + r->second});
            else result.errors.push_back({q.id, r->second});
        } else if (!answered) {
            result.errors.push_back({q.id, "no answer"});
        }
    }
    return result;
}

// --- oracle -----------------------------------------------------------------

std::uint64_t oracle_hash(std::string_view agent_id, std::string_view question_id, std::uint64_t seed) {
    std::uint64_t h = fnv1a64(agent_id);
    h = fnv1a64("\x1f", h);
    h = fnv1a64(question_id, h);
    return mix64(h ^ mix64(seed));
}

std::string rule_oracle_answer(const AgentProfile& agent, const Question& question, std::uint64_t seed) {
    const auto k = question.options.size();
    return question.options[oracle_hash(agent.agent_id, question.id, seed) % k].label;
}

std::string rule_oracle_transcript(const AgentProfile& agent, const Questionnaire& questionnaire,
                                   std::uint64_t seed) {
    std::string out;
    for (const auto& q : questionnaire.questions) {
        out += fmt::format("{}: {}\n", q.id, rule_oracle_answer(agent, q, seed));
    }
    return out;
}

std::string RuleOracleBackend::respond(const AgentRequest& request) {
    return rule_oracle_transcript(request.agent.profile, request.plan.questionnaire, seed_);
}

// --- descriptors ------------------------------------------------------------

std::string_view to_string(BackendKind kind) {
    return kind == BackendKind::http_llm ? "http" : "oracle";
}

BackendKind backend_kind_from_string(std::string_view s) {
    if (s == "http" || s == "http_llm") return BackendKind::http_llm;
    if (s == "oracle" || s == "rule_oracle") return BackendKind::rule_oracle;
    throw Error(fmt::format("unknown backend '{}' (expected oracle or http)", s));
}

std::chrono::milliseconds RetryPolicy::delay_after(std::size_t attempt) const {
    if (backoff.empty() || attempt == 0) return std::chrono::milliseconds(0);
    return backoff[std::min(attempt, backoff.size()) - 1];
}

void BackendDescriptor::validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw Error("backend: temperature must be >= 0");
    if (max_tokens < 1) throw Error("backend: max_tokens must be >= 1");
    if (retry.max_attempts < 1) throw Error("backend: max_attempts must be >= 1");
    if (requests_per_minute && *requests_per_minute < 0.0) throw Error("backend: requests_per_minute must be >= 0");
    if (kind == BackendKind::http_llm && endpoint.empty()) throw Error("backend: http backend needs an endpoint");
    if (!(timeout_seconds > 0.0)) throw Error("backend: timeout must be positive");
}

double BackendDescriptor::effective_rpm() const {
    if (requests_per_minute) return *requests_per_minute;
    return kind == BackendKind::http_llm ? 60.0 : 0.0;
}

ordered_json BackendDescriptor::to_json() const {
    ordered_json j;
    j["kind"] = to_string(kind);
    if (kind == BackendKind::http_llm) {
        j["endpoint"] = endpoint;
        j["model"] = model;
        j["api_key_env"] = api_key_env;
        j["timeout_seconds"] = timeout_seconds;
    }
    j["temperature"] = temperature;
    j["max_tokens"] = max_tokens;
    j["max_attempts"] = retry.max_attempts;
    auto backoff = ordered_json::array();
    for (auto d : retry.backoff) backoff.push_back(d.count());
    j["backoff_ms"] = std::move(backoff);
    j["requests_per_minute"] = effective_rpm();
    j["abort_after_failures"] = abort_after_failures;
    return j;
}

BackendDescriptor BackendDescriptor::from_json(const json& j) {
    BackendDescriptor d;
    d.kind = backend_kind_from_string(j.value("kind", "oracle"));
    d.endpoint = j.value("endpoint", "");
    d.model = j.value("model", "");
    d.api_key_env = j.value("api_key_env", d.api_key_env);
    d.timeout_seconds = j.value("timeout_seconds", d.timeout_seconds);
    d.temperature = j.value("temperature", d.temperature);
    d.max_tokens = j.value("max_tokens", d.max_tokens);
    d.retry.max_attempts = j.value("max_attempts", d.retry.max_attempts);
    if (auto it = j.find("backoff_ms"); it != j.end()) {
        d.retry.backoff.clear();
        for (const auto& ms : *it) d.retry.backoff.emplace_back(ms.get<std::int64_t>());
    }
    if (auto it = j.find("requests_per_minute"); it != j.end() && !it->is_null()) {
        d.requests_per_minute = it->get<double>();
    }
    d.abort_after_failures = j.value("abort_after_failures", d.abort_after_failures);
    return d;
}

HttpLlmBackend::HttpLlmBackend(BackendDescriptor descriptor) : descriptor_(std::move(descriptor)) {
    descriptor_.validate();
}

std::string HttpLlmBackend::respond(const AgentRequest& request) {
    return http_llm_call(descriptor_, request.prompt,
                         fmt::format("{}#{}", request.agent.profile.agent_id, request.attempt));
}

// --- rate limiting ----------------------------------------------------------

RateLimiter::RateLimiter(double rpm) : interval_s_(rpm > 0.0 ? 60.0 / rpm : 0.0), next_(clock::now()) {}

void RateLimiter::acquire() {
    if (interval_s_ <= 0.0) return;
    clock::time_point slot;
    {
        std::lock_guard lock(mutex_);
        const auto now = clock::now();
        slot = std::max(now, next_);
        next_ = slot + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(interval_s_));
    }
    std::this_thread::sleep_until(slot);
}

// --- sheets -----------------------------------------------------------------

ordered_json sheet_to_json(const AnswerSheet& sheet, const Questionnaire& questionnaire) {
    ordered_json j;
    j["agent_id"] = sheet.agent_id;
    j["group"] = sheet.group ? ordered_json(*sheet.group) : ordered_json(nullptr);
    j["valid"] = sheet.valid;
    j["attempts_used"] = sheet.attempts_used;
    auto answers = ordered_json::object();
    for (const auto& q : questionnaire.questions) {
        auto it = sheet.answers.find(q.id);
        if (it == sheet.answers.end()) continue;
        switch (q.kind) {
            case AnswerKind::multi_choice:
                answers[q.id] = it->second;
                break;
            case AnswerKind::likert_1_5: {
                const auto* o = q.option(it->second.at(0));
                answers[q.id] = o && o->numeric_value ? ordered_json(static_cast<int>(*o->numeric_value))
                                                      : ordered_json(it->second.at(0));
                break;
            }
            case AnswerKind::single_choice:
                answers[q.id] = it->second.at(0);
                break;
        }
    }
    j["answers"] = std::move(answers);
    j["raw_responses"] = sheet.raw_responses;
    j["errors"] = sheet.errors;
    return j;
}

AnswerSheet sheet_from_json(const json& j, const Questionnaire& questionnaire) {
    AnswerSheet s;
    s.agent_id = j.at("agent_id").get<std::string>();
    if (auto it = j.find("group"); it != j.end() && !it->is_null()) s.group = it->get<std::string>();
    s.valid = j.at("valid").get<bool>();
    s.attempts_used = j.at("attempts_used").get<std::size_t>();
    for (const auto& [qid, v] : j.at("answers").items()) {
        const auto* q = questionnaire.find(qid);
        if (!q) throw FormatError(fmt::format("sheet {}: answer for unknown question {}", s.agent_id, qid));
        std::vector<std::string> labels;
        if (v.is_array()) {
            labels = v.get<std::vector<std::string>>();
        } else if (v.is_number()) {
            const double value = v.get<double>();
            for (const auto& o : q->options) {
                if (o.numeric_value && *o.numeric_value == value) labels.push_back(o.label);
            }
        } else {
            labels.push_back(v.get<std::string>());
        }
        for (const auto& l : labels) {
            if (!q->option(l)) throw FormatError(fmt::format("sheet {}: illegal answer for {}", s.agent_id, qid));
        }
        if (labels.empty()) throw FormatError(fmt::format("sheet {}: illegal answer for {}", s.agent_id, qid));
        s.answers[qid] = std::move(labels);
    }
    s.raw_responses = j.value("raw_responses", std::vector<std::string>{});
    s.errors = j.value("errors", std::vector<std::string>{});
    return s;
}

std::vector<AnswerSheet> load_results(const std::filesystem::path& path, const Questionnaire& questionnaire) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open results file " + path.string());
    std::vector<AnswerSheet> sheets;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        try {
            sheets.push_back(sheet_from_json(json::parse(line), questionnaire));
        } catch (const json::exception& e) {
            throw FormatError(path.string(), n, e.what());
        } catch (const FormatError& e) {
            throw FormatError(path.string(), n, e.what());
        }
    }
    return sheets;
}

void write_results(const std::filesystem::path& path, std::span<const AnswerSheet> sheets,
                   const Questionnaire& questionnaire) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write results file " + path.string());
    for (const auto& s : sheets) out << sheet_to_json(s, questionnaire).dump() << '\n';
    if (!out) throw Error("failed writing results file " + path.string());
}

// --- manifest ---------------------------------------------------------------

ordered_json RunManifest::to_json() const {
    ordered_json j;
    j["scenario_id"] = scenario_id;
    j["plan_hash"] = plan_hash;
    j["backend"] = backend;
    j["master_seed"] = master_seed;
    j["concurrency"] = concurrency;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["counts"] = {{"completed", counts.completed},
                   {"invalid", counts.invalid},
                   {"unmatched", counts.unmatched},
                   {"not_run", counts.not_run}};
    j["aborted"] = aborted;
    if (aborted) j["abort_reason"] = abort_reason;
    j["versions"] = versions;
    return j;
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.scenario_id = j.at("scenario_id").get<std::string>();
    m.plan_hash = j.at("plan_hash").get<std::string>();
    m.backend = ordered_json::parse(j.at("backend").dump());
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.concurrency = j.value("concurrency", std::size_t{1});
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
    const auto& c = j.at("counts");
    m.counts = {c.at("completed").get<std::size_t>(), c.at("invalid").get<std::size_t>(),
                c.at("unmatched").get<std::size_t>(), c.value("not_run", std::size_t{0})};
    m.aborted = j.value("aborted", false);
    m.abort_reason = j.value("abort_reason", "");
    m.versions = j.value("versions", std::map<std::string, std::string>{});
    return m;
}

std::string plan_hash(const SimulationPlan& plan) {
    return fmt::format("fnv1a64:{:016x}", fnv1a64(plan.serialize()));
}

// --- runner -----------------------------------------------------------------

namespace {

std::string now_utc() {
    const auto now = std::chrono::system_clock::now();
    return format_timestamp(std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
}

enum class Outcome { answered, exhausted_parse, exhausted_transport, fatal };

}  // namespace

RunResult run_simulation(const SimulationPlan& plan, AgentBackend& backend, const BackendDescriptor& descriptor,
                         const RunOptions& options) {
    descriptor.validate();
    const std::size_t n = plan.agents.size();
    const std::size_t workers = std::max<std::size_t>(1, std::min(options.concurrency, std::max<std::size_t>(n, 1)));

    RunResult result;
    auto& m = result.manifest;
    m.scenario_id = plan.scenario_id;
    m.plan_hash = plan_hash(plan);
    m.backend = descriptor.to_json();
    m.master_seed = options.master_seed;
    m.concurrency = options.concurrency;
    m.started_at = now_utc();
    m.versions = {{"socioverse", SOCIOVERSE_VERSION}, {"plan_format", "socioverse-plan/1"}, {"oracle", "fnv1a-mix64/1"}};

    std::ofstream stream;
    if (options.stream_path) {
        stream.open(*options.stream_path, std::ios::binary | std::ios::app);
        if (!stream) throw Error("cannot open results stream " + options.stream_path->string());
    }

    std::vector<std::optional<AnswerSheet>> slots(n);
    RateLimiter limiter(descriptor.effective_rpm());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::mutex shared;  // guards stream, consecutive, abort_reason
    std::size_t consecutive = 0;
    std::string abort_reason;

    auto process = [&](std::size_t idx) {
        const auto& agent = plan.agents[idx];
        const std::string prompt = render_prompt(agent, plan);
        AnswerSheet sheet;
        sheet.agent_id = agent.profile.agent_id;
        sheet.group = agent.profile.group_key;
        Outcome outcome = Outcome::exhausted_parse;
        std::string fatal_reason;

        for (std::size_t attempt = 1; attempt <= descriptor.retry.max_attempts; ++attempt) {
            sheet.attempts_used = attempt;
            bool transport_failure = false;
            limiter.acquire();
            try {
                std::string raw = backend.respond({agent, plan, prompt, attempt});
                auto parsed = parse_response(raw, plan.questionnaire);
                sheet.raw_responses.push_back(std::move(raw));
                if (parsed.ok()) {
                    sheet.answers = std::move(parsed.answers);
                    sheet.valid = true;
                    outcome = Outcome::answered;
                    break;
                }
                sheet.errors.push_back(fmt::format("attempt {}: parse error: {}", attempt, parsed.error_summary()));
            } catch (const TransportError& e) {
                sheet.errors.push_back(fmt::format("attempt {}: transport error: {}", attempt, e.what()));
                if (!e.retryable()) {
                    outcome = Outcome::fatal;
                    fatal_reason = fmt::format("non-retryable backend error for {}: {}", sheet.agent_id, e.what());
                    break;
                }
                transport_failure = true;
            } catch (const std::exception& e) {
                sheet.errors.push_back(fmt::format("attempt {}: backend error: {}", attempt, e.what()));
                transport_failure = true;
            }
            outcome = transport_failure ? Outcome::exhausted_transport : Outcome::exhausted_parse;
            if (attempt < descriptor.retry.max_attempts) {
                std::this_thread::sleep_for(descriptor.retry.delay_after(attempt));
            }
        }

        std::lock_guard lock(shared);
        if (outcome == Outcome::fatal) {
            if (!stop.exchange(true)) abort_reason = fatal_reason;
            spdlog::error("{}", fatal_reason);
            return;
        }
        if (outcome == Outcome::exhausted_transport) {
            if (++consecutive >= descriptor.abort_after_failures && !stop.exchange(true)) {
                abort_reason = fmt::format("backend unreachable: {} consecutive agents failed after {} attempts",
                                           consecutive, descriptor.retry.max_attempts);
                spdlog::error("{}", abort_reason);
            }
        } else {
            consecutive = 0;
        }
        if (!sheet.valid) spdlog::warn("agent {} invalid after {} attempts", sheet.agent_id, sheet.attempts_used);
        if (stream.is_open()) {
            stream << sheet_to_json(sheet, plan.questionnaire).dump() << '\n';
            stream.flush();
        }
        slots[idx] = std::move(sheet);
    };

    auto worker = [&] {
        while (!stop.load()) {
            const auto idx = next.fetch_add(1);
            if (idx >= n) break;
            process(idx);
        }
    };

    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!plan.agents[i].profile.matched_user) ++m.counts.unmatched;
        if (!slots[i]) {
            ++m.counts.not_run;
            continue;
        }
        if (slots[i]->valid) ++m.counts.completed;
        else ++m.counts.invalid;
        result.sheets.push_back(std::move(*slots[i]));
    }
    m.aborted = stop.load();
    m.abort_reason = abort_reason;
    m.finished_at = now_utc();
    return result;
}

}  // namespace socioverse
