#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <random>
#include <set>

#include "socioverse/behavior.hpp"
#include "socioverse/error.hpp"
#include "support.hpp"

using namespace socioverse;
using nlohmann::json;

namespace {

Questionnaire mini_questionnaire() {
    return Questionnaire::from_json(json::parse(R"({
        "id": "mini",
        "dimensions": [{"tag": "PC", "name": "Cognition", "questions": ["Q01"]},
                       {"tag": "food", "name": "Food", "questions": ["Q02"]},
                       {"tag": "overall", "name": "Overall", "questions": ["Q03"]}],
        "questions": [
          {"id": "Q01", "text": "I have heard of ChatGPT.", "dimension": "PC", "answer_kind": "likert_1_5",
           "options": [{"label": "1", "text": "Disagree", "numeric_value": 1},
                       {"label": "2", "text": "Partially disagree", "numeric_value": 2},
                       {"label": "3", "text": "Neutral", "numeric_value": 3},
                       {"label": "4", "text": "Partially agree", "numeric_value": 4},
                       {"label": "5", "text": "Agree", "numeric_value": 5}]},
          {"id": "Q02", "text": "Monthly food spending?", "dimension": "food", "answer_kind": "single_choice",
           "options": [{"label": "A", "text": "Below 500 CNY", "interval": [0, 500]},
                       {"label": "B", "text": "501-650 CNY", "interval": [501, 650]},
                       {"label": "C", "text": "Above 650 CNY", "interval": [650, null]}]},
          {"id": "Q03", "text": "Which areas would you expand?", "dimension": "overall", "answer_kind": "multi_choice",
           "options": [{"label": "A", "text": "Food"}, {"label": "B", "text": "Clothing"}, {"label": "C", "text": "Housing"}]}
        ]})"));
}

AgentProfile mini_profile(std::string id = "agent-000000") {
    AgentProfile p;
    p.agent_id = std::move(id);
    p.attributes = {{"gender", "Female"}, {"age", "30-44"}, {"region", "Sichuan"}};
    p.income = 4321.5;
    p.group_key = "Sichuan";
    return p;
}

SimulationPlan mini_plan(std::size_t n, std::uint64_t seed = 1) {
    SimulationPlan plan;
    plan.scenario_id = "mini";
    plan.kind = ScenarioKind::economic;
    plan.seed = seed;
    plan.questionnaire = mini_questionnaire();
    plan.group_key = "region";
    plan.scenario_context = "A short background note.";
    const char* regions[] = {"Beijing", "Sichuan", "Gansu"};
    for (std::size_t i = 0; i < n; ++i) {
        PlannedAgent a;
        a.profile = mini_profile(agent_id_for(i));
        a.profile.attributes["region"] = regions[i % 3];
        a.profile.group_key = regions[i % 3];
        a.context = {"post number " + std::to_string(i)};
        plan.agents.push_back(std::move(a));
    }
    return plan;
}

BackendDescriptor fast_descriptor() {
    BackendDescriptor d;
    d.retry.backoff = {std::chrono::milliseconds(1)};
    return d;
}

std::string serialize(const RunResult& r, const Questionnaire& qn) {
    std::string out;
    for (const auto& s : r.sheets) out += sheet_to_json(s, qn).dump() + "\n";
    return out;
}

// Scripted backend: returns responses by (agent, attempt).
class ScriptedBackend : public AgentBackend {
public:
    std::function<std::string(const AgentRequest&)> fn;
    std::atomic<int> calls{0};
    std::string respond(const AgentRequest& r) override {
        ++calls;
        return fn(r);
    }
};

}  // namespace

TEST_CASE("prompt rendering matches the golden files") {
    const auto qn = mini_questionnaire();
    const std::vector<std::string> context{"Tried the new noodle place downtown.", "Rainy commute again."};
    for (const char* lang : {"EN", "ZH"}) {
        const auto prompt = render_prompt(mini_profile(), context, qn, "A short background note.", lang);
        const auto path = testing::golden_path(std::string("prompt_") + lang + ".txt");
        if (std::getenv("SOCIOVERSE_UPDATE_GOLDEN")) testing::write_file(path, prompt);
        CHECK(prompt == testing::read_file(path));
    }
    CHECK_THROWS_AS(render_prompt(mini_profile(), context, qn, "", "FR"), Error);

    SUBCASE("posts and background blocks only when present") {
        const auto bare = render_prompt(mini_profile(), {}, qn, "", "EN");
        CHECK(bare.find(kPostsBegin) == std::string::npos);
        CHECK(bare.find(kBackgroundBegin) == std::string::npos);
    }
}

TEST_CASE("persona blocks are injective on attribute values") {
    const auto base = render_persona(mini_profile());
    auto other = mini_profile();
    other.attributes["age"] = "45-64";
    CHECK(render_persona(other) != base);
    other = mini_profile();
    other.income = 4321.6;
    CHECK(render_persona(other) != base);
    other = mini_profile();
    other.attributes["hobby"] = "chess";
    CHECK(render_persona(other) != base);
    CHECK(render_persona(mini_profile()) == base);
}

TEST_CASE("parse_response") {
    const auto qn = mini_questionnaire();
    auto parse = [&](std::string_view s) { return parse_response(s, qn); };

    const auto r = parse("Let me think step by step.\nQ01: 4\nQ02: A\nQ03: A, C\n");
    REQUIRE(r.ok());
    CHECK(r.answers.at("Q01") == std::vector<std::string>{"4"});
    CHECK(r.answers.at("Q02") == std::vector<std::string>{"A"});
    CHECK(r.answers.at("Q03") == std::vector<std::string>{"A", "C"});

    SUBCASE("tolerant forms") {
        const auto t = parse("**Q01**：5\nq02: b. 501-650 CNY\n- Q03: Housing\n");
        REQUIRE(t.ok());
        CHECK(t.answers.at("Q01") == std::vector<std::string>{"5"});
        CHECK(t.answers.at("Q02") == std::vector<std::string>{"B"});
        CHECK(t.answers.at("Q03") == std::vector<std::string>{"C"});
    }
    SUBCASE("last legal answer wins, later junk is a warning") {
        const auto t = parse("Q01: 2\nQ02: A\nQ03: B\nQ01: 3\nQ02: Z\n");
        REQUIRE(t.ok());
        CHECK(t.answers.at("Q01") == std::vector<std::string>{"3"});
        CHECK(t.answers.at("Q02") == std::vector<std::string>{"A"});
        CHECK_FALSE(t.warnings.empty());
    }
    SUBCASE("multi-choice dedups in option order") {
        const auto t = parse("Q01: 1\nQ02: C\nQ03: C; A; C\n");
        REQUIRE(t.ok());
        CHECK(t.answers.at("Q03") == std::vector<std::string>{"A", "C"});
    }
    SUBCASE("missing and illegal answers are errors") {
        const auto t = parse("Q01: 6\nQ02: A\n");
        CHECK_FALSE(t.ok());
        std::set<std::string> bad;
        for (const auto& e : t.errors) bad.insert(e.question_id);
        CHECK(bad == std::set<std::string>{"Q01", "Q03"});
        CHECK_FALSE(t.error_summary().empty());
    }
    SUBCASE("unknown question ids warn") {
        const auto t = parse("Q01: 1\nQ02: A\nQ03: A\nQ99: A\n");
        CHECK(t.ok());
        CHECK(t.warnings.size() == 1);
    }
    SUBCASE("never throws on arbitrary bytes") {
        std::mt19937 gen(1);
        for (int trial = 0; trial < 3000; ++trial) {
            std::string s(gen() % 200, '\0');
            for (auto& c : s) c = static_cast<char>(gen() % 256);
            if (trial % 3 == 0) s = "Q0" + std::to_string(gen() % 4) + ":" + s;
            CHECK_NOTHROW(parse(s));
        }
    }
}

TEST_CASE("rule oracle") {
    const auto qn = mini_questionnaire();
    const auto p = mini_profile();
    CHECK(rule_oracle_answer(p, *qn.find("Q02"), 42) == rule_oracle_answer(p, *qn.find("Q02"), 42));
    const auto transcript = rule_oracle_transcript(p, qn, 42);
    const auto parsed = parse_response(transcript, qn);
    REQUIRE(parsed.ok());
    for (const auto& q : qn.questions) CHECK(parsed.answers.at(q.id) == std::vector<std::string>{rule_oracle_answer(p, q, 42)});

    SUBCASE("seed changes move the hash nearly always and answers at the 1 - 1/k rate") {
        const auto& q = *qn.find("Q01");
        int hash_changed = 0, answer_changed = 0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) {
            const auto id = agent_id_for(i);
            hash_changed += oracle_hash(id, q.id, 42) != oracle_hash(id, q.id, 43);
            AgentProfile a;
            a.agent_id = id;
            answer_changed += rule_oracle_answer(a, q, 42) != rule_oracle_answer(a, q, 43);
        }
        CHECK(hash_changed >= 0.99 * n);
        CHECK(std::abs(answer_changed / double(n) - 0.8) < 0.02);
    }
}

TEST_CASE("backend descriptor") {
    BackendDescriptor d;
    CHECK(d.effective_rpm() == 0.0);
    d.kind = BackendKind::http_llm;
    CHECK(d.effective_rpm() == 60.0);
    d.requests_per_minute = 0.0;
    CHECK(d.effective_rpm() == 0.0);
    d.endpoint = "http://localhost:1/v1/chat/completions";
    d.model = "m";
    CHECK_NOTHROW(d.validate());
    const auto j = d.to_json().dump();
    CHECK(j.find("api_key\"") == std::string::npos);
    CHECK(BackendDescriptor::from_json(json::parse(j)).to_json().dump() == j);
    d.retry.max_attempts = 0;
    CHECK_THROWS_AS(d.validate(), Error);
    d.retry.max_attempts = 3;
    d.endpoint.clear();
    CHECK_THROWS_AS(d.validate(), Error);

    RetryPolicy r;
    CHECK(r.delay_after(1) == std::chrono::milliseconds(1000));
    CHECK(r.delay_after(2) == std::chrono::milliseconds(2000));
    CHECK(r.delay_after(3) == std::chrono::milliseconds(4000));
    CHECK(r.delay_after(9) == std::chrono::milliseconds(4000));
}

TEST_CASE("rate limiter spaces requests") {
    RateLimiter unlimited(0);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 1000; ++i) unlimited.acquire();
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::milliseconds(100));

    RateLimiter limited(1200);  // one token every 50 ms
    const auto t1 = std::chrono::steady_clock::now();
    for (int i = 0; i < 5; ++i) limited.acquire();
    CHECK(std::chrono::steady_clock::now() - t1 >= std::chrono::milliseconds(190));
}

TEST_CASE("oracle runs are deterministic and conserve agents") {
    const auto plan = mini_plan(200, 9);
    RuleOracleBackend oracle(9);
    const auto d = fast_descriptor();
    RunOptions one{1, 9, std::nullopt};
    const auto base = run_simulation(plan, oracle, d, one);
    CHECK(base.sheets.size() == plan.agents.size());
    CHECK(base.manifest.counts.completed == 200);
    CHECK(base.manifest.counts.unmatched == 200);
    CHECK(base.manifest.plan_hash == plan_hash(plan));
    const auto text = serialize(base, plan.questionnaire);
    for (std::size_t c : {2, 4, 16}) {
        RunOptions opt{c, 9, std::nullopt};
        CHECK(serialize(run_simulation(plan, oracle, d, opt), plan.questionnaire) == text);
    }
    RuleOracleBackend other(10);
    CHECK(serialize(run_simulation(plan, other, d, one), plan.questionnaire) != text);
    for (std::size_t i = 0; i < base.sheets.size(); ++i) CHECK(base.sheets[i].agent_id == plan.agents[i].profile.agent_id);
}

TEST_CASE("results stream and ordered file") {
    testing::TempDir dir;
    const auto plan = mini_plan(30);
    RuleOracleBackend oracle(1);
    RunOptions opt{4, 1, dir / "stream.jsonl"};
    const auto r = run_simulation(plan, oracle, fast_descriptor(), opt);
    std::istringstream stream(testing::read_file(dir / "stream.jsonl"));
    std::set<std::string> ids;
    for (std::string line; std::getline(stream, line);) ids.insert(json::parse(line).at("agent_id").get<std::string>());
    CHECK(ids.size() == 30);

    write_results(dir / "results.jsonl", r.sheets, plan.questionnaire);
    const auto loaded = load_results(dir / "results.jsonl", plan.questionnaire);
    CHECK(loaded == r.sheets);
    const auto line = json::parse(testing::read_file(dir / "results.jsonl").substr(0, testing::read_file(dir / "results.jsonl").find('\n')));
    CHECK(line["answers"]["Q01"].is_number_integer());
    CHECK(line["answers"]["Q02"].is_string());
    CHECK(line["answers"]["Q03"].is_array());
}

TEST_CASE("retries, invalid sheets and aborts") {
    const auto plan = mini_plan(12);
    auto d = fast_descriptor();

    SUBCASE("garbage until the last attempt is retried then accepted") {
        ScriptedBackend b;
        b.fn = [](const AgentRequest& r) { return r.attempt < 3 ? std::string("no idea") : std::string("Q01: 1\nQ02: A\nQ03: B"); };
        const auto res = run_simulation(plan, b, d, {3, 1, std::nullopt});
        CHECK(res.manifest.counts.completed == 12);
        for (const auto& s : res.sheets) {
            CHECK(s.valid);
            CHECK(s.attempts_used == 3);
            CHECK(s.raw_responses.size() == 3);
            CHECK(s.errors.size() == 2);
        }
    }
    SUBCASE("always garbage: invalid after exactly max_attempts") {
        ScriptedBackend b;
        b.fn = [](const AgentRequest&) { return std::string("Q01: 9"); };
        const auto res = run_simulation(plan, b, d, {2, 1, std::nullopt});
        CHECK(res.manifest.counts.invalid == 12);
        CHECK_FALSE(res.manifest.aborted);
        for (const auto& s : res.sheets) {
            CHECK_FALSE(s.valid);
            CHECK(s.attempts_used == d.retry.max_attempts);
        }
    }
    SUBCASE("non-retryable failure aborts and counts reconcile") {
        ScriptedBackend b;
        b.fn = [](const AgentRequest& r) -> std::string {
            if (r.agent.profile.agent_id == agent_id_for(5)) throw TransportError("denied", false, 401);
            return "Q01: 1\nQ02: A\nQ03: B";
        };
        const auto res = run_simulation(plan, b, d, {1, 1, std::nullopt});
        CHECK(res.manifest.aborted);
        CHECK(res.manifest.abort_reason.find("denied") != std::string::npos);
        const auto& c = res.manifest.counts;
        CHECK(c.completed == 5);
        CHECK(c.completed + c.invalid + c.not_run == 12);
        CHECK(res.sheets.size() == 5);
    }
    SUBCASE("consecutive transport exhaustion aborts") {
        ScriptedBackend b;
        b.fn = [](const AgentRequest&) -> std::string { throw TransportError("refused", true); };
        d.abort_after_failures = 3;
        const auto res = run_simulation(plan, b, d, {1, 1, std::nullopt});
        CHECK(res.manifest.aborted);
        CHECK(res.manifest.counts.invalid == 3);
        CHECK(res.manifest.counts.not_run == 9);
        CHECK(b.calls == 9);
    }
}

TEST_CASE("manifest json round trip") {
    const auto plan = mini_plan(3);
    RuleOracleBackend oracle(1);
    const auto m = run_simulation(plan, oracle, fast_descriptor(), {1, 1, std::nullopt}).manifest;
    CHECK(json(RunManifest::from_json(json::parse(m.to_json().dump())).to_json()) == json(m.to_json()));
}
