#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "socioverse/error.hpp"
#include "socioverse/user_pool.hpp"
#include "support.hpp"

using namespace socioverse;
using testing::user;

namespace {

UserPool ingest_text(const std::string& text, const Schema& schema = testing::small_schema()) {
    std::istringstream in(text);
    return ingest_pool(in, schema, "test.jsonl");
}

std::string exported(const UserPool& pool) {
    std::ostringstream out;
    export_pool(pool, out);
    return out.str();
}

std::vector<Post> posts_of(std::initializer_list<const char*> texts) {
    std::vector<Post> out;
    for (const char* t : texts) out.push_back({t, std::nullopt, std::nullopt, std::nullopt, std::nullopt});
    return out;
}

// Pairwise overlap computed the slow way: split on spaces, remove matches one by one.
double brute_ratio(const std::vector<std::string>& texts) {
    auto words = [](const std::string& s) {
        std::vector<std::string> w;
        std::istringstream in(s);
        for (std::string t; in >> t;) w.push_back(t);
        return w;
    };
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        for (std::size_t j = i + 1; j < texts.size(); ++j) {
            auto a = words(texts[i]);
            auto b = words(texts[j]);
            const double denom = static_cast<double>(std::max(a.size(), b.size()));
            double common = 0;
            for (const auto& t : a) {
                auto it = std::find(b.begin(), b.end(), t);
                if (it != b.end()) {
                    ++common;
                    b.erase(it);
                }
            }
            sum += common / denom;
            ++pairs;
        }
    }
    return pairs ? sum / pairs : 0.0;
}

UserPool gender_pool() {
    return UserPool(testing::small_schema(), {user("u1", {{"gender", "M"}, {"region", "R1"}}),
                                              user("u2", {{"gender", "M"}, {"region", "R2"}}),
                                              user("u3", {{"gender", "F"}, {"region", "R1"}}),
                                              user("u4", {{"gender", "F"}, {"region", "R3"}})});
}

}  // namespace

TEST_CASE("ingest accepts valid records and rejects bad ones by line") {
    const std::string ok =
        R"({"user_id":"a","platform":"X","posts":[{"text":"hi there","likes":3}],"labels":{"gender":"M"}})"
        "\n"
        R"({"user_id":"b","platform":"X","posts":[],"labels":{}})"
        "\n\n"
        R"({"user_id":"a","platform":"Rednote","posts":[{"text":"你好","timestamp":"2024-05-01T08:00:00Z"}],"labels":{}})"
        "\n";
    const auto pool = ingest_text(ok);
    CHECK(pool.size() == 3);
    CHECK(pool.post_count() == 2);
    REQUIRE(pool.find({"Rednote", "a"}) != nullptr);
    CHECK(pool.find({"Rednote", "a"})->posts[0].timestamp == 1714550400);

    SUBCASE("unknown label value") {
        const std::string bad = R"({"user_id":"a","platform":"X","posts":[],"labels":{"gender":"unknown-value"}})";
        try {
            ingest_text("\n" + bad + "\n");
            FAIL("expected rejection");
        } catch (const FormatError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("unknown-value") != std::string::npos);
        }
    }
    SUBCASE("duplicate key names both lines") {
        const std::string dup = R"({"user_id":"a","platform":"X","posts":[],"labels":{}})";
        try {
            ingest_text(dup + "\n" + dup + "\n");
            FAIL("expected rejection");
        } catch (const FormatError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("line 1") != std::string::npos);
        }
    }
    SUBCASE("malformed json, unregistered label, negative count, blank text") {
        CHECK_THROWS_AS(ingest_text("{not json}\n"), FormatError);
        CHECK_THROWS_AS(ingest_text(R"({"user_id":"a","platform":"X","posts":[],"labels":{"shoe":"9"}})"),
                        FormatError);
        CHECK_THROWS_AS(ingest_text(R"({"user_id":"a","platform":"X","posts":[{"text":"x","likes":-1}],"labels":{}})"),
                        FormatError);
        CHECK_THROWS_AS(ingest_text(R"({"user_id":"a","platform":"X","posts":[{"text":"   "}],"labels":{}})"),
                        FormatError);
        CHECK_THROWS_AS(ingest_text(R"({"user_id":"","platform":"X","posts":[],"labels":{}})"), FormatError);
    }
}

TEST_CASE("fixture pool counts agree with an independent line scan") {
    const auto text = testing::read_file(testing::data_path("pool/users.jsonl"));
    std::size_t lines = 0, posts = 0;
    for (std::size_t pos = 0; (pos = text.find('\n', pos)) != std::string::npos; ++pos) ++lines;
    for (std::size_t pos = 0; (pos = text.find("\"text\":", pos)) != std::string::npos; ++pos) ++posts;
    const auto pool = testing::fixture_pool();
    CHECK(pool.size() == lines);
    CHECK(pool.size() == 1000);
    CHECK(pool.post_count() == posts);
}

TEST_CASE("ingest -> export -> ingest round-trips bit-identically") {
    const auto pool = testing::fixture_pool();
    const auto first = exported(pool);
    const auto again = ingest_text(first, pool.schema());
    CHECK(exported(again) == first);
    CHECK(std::equal(pool.users().begin(), pool.users().end(), again.users().begin(), again.users().end()));
}

TEST_CASE("timestamps parse in the accepted forms") {
    CHECK(parse_timestamp("1970-01-01T00:00:00Z") == 0);
    CHECK(parse_timestamp("2024-05-01T10:00:00+02:00") == 1714550400);
    CHECK(parse_timestamp("1714550400") == 1714550400);
    CHECK(!parse_timestamp("yesterday"));
    CHECK(format_timestamp(1714550400) == "2024-05-01T08:00:00Z");
}

TEST_CASE("word repetition ratio") {
    CHECK(word_repetition_ratio(posts_of({"buy now cheap", "buy now cheap", "buy now cheap", "buy now cheap",
                                          "buy now cheap"})) == doctest::Approx(1.0));
    CHECK(word_repetition_ratio(posts_of({"just one post"})) == 0.0);
    CHECK(word_repetition_ratio(posts_of({"a b c", "a b d"})) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(brute_ratio({"a b c", "a b d"}) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(word_repetition_ratio({}), Error);

    SUBCASE("matches a brute-force overlap on random lowercase posts") {
        std::mt19937 gen(7);
        const std::vector<std::string> vocab{"red", "blue", "green", "cat", "dog", "sun", "moon", "tea"};
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<std::string> texts;
            std::vector<Post> posts;
            const int n = 2 + static_cast<int>(gen() % 5);
            for (int k = 0; k < n; ++k) {
                std::string t;
                const int len = 1 + static_cast<int>(gen() % 6);
                for (int w = 0; w < len; ++w) t += (w ? " " : "") + vocab[gen() % vocab.size()];
                texts.push_back(t);
                posts.push_back({t, std::nullopt, std::nullopt, std::nullopt, std::nullopt});
            }
            CHECK(word_repetition_ratio(posts) == doctest::Approx(brute_ratio(texts)).epsilon(1e-12));
        }
    }
}

TEST_CASE("tokenize lowercases, splits punctuation and isolates CJK ideographs") {
    CHECK(tokenize("Hello, World! hello") == std::vector<std::string>{"hello", "world", "hello"});
    CHECK(tokenize("你好world") == std::vector<std::string>{"你", "好", "world"});
    CHECK(tokenize("  ...  ").empty());
}

TEST_CASE("filter_abnormal") {
    const auto schema = testing::small_schema();
    const UserPool pool(schema, {user("bot", {}, {"buy now cheap", "buy now cheap", "buy now cheap"}),
                                 user("human", {}, {"went hiking today", "new recipe for soup tonight",
                                                    "the train was late again"})});
    const auto report = filter_abnormal(pool, 0.3);
    REQUIRE(report.removed.size() == 1);
    CHECK(report.removed[0].key.user_id == "bot");
    CHECK(report.kept.size() == 1);
    CHECK(report.retention_rate == doctest::Approx(0.5));
    CHECK(pool.size() == 2);  // original untouched

    CHECK(filter_abnormal(pool, 1.0).removed.empty());
    // Too few posts to judge.
    CHECK(filter_abnormal(pool, 0.3, 4).removed.empty());

    SUBCASE("planted fixture: exactly the bots go, monotone and idempotent") {
        const auto fixture =
            load_pool(testing::data_path("pool/clean_fixture.jsonl"), load_schema(testing::data_path("pool/schema.json")));
        const auto r = filter_abnormal(fixture, 0.3);
        std::set<std::string> removed;
        for (const auto& u : r.removed) removed.insert(u.key.user_id);
        std::set<std::string> bots;
        for (const auto& u : fixture.users()) {
            if (u.user_id.rfind("bot", 0) == 0) bots.insert(u.user_id);
        }
        CHECK(bots.size() == 10);
        CHECK(removed == bots);
        CHECK(exported(filter_abnormal(r.kept, 0.3).kept) == exported(r.kept));

        std::set<std::string> kept_before;
        for (double t : {0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.9, 1.0}) {
            std::set<std::string> kept;
            const auto filtered = filter_abnormal(fixture, t);
            for (const auto& u : filtered.kept.users()) kept.insert(u.user_id);
            CHECK(std::includes(kept.begin(), kept.end(), kept_before.begin(), kept_before.end()));
            kept_before = kept;
        }
    }
    CHECK_THROWS_AS(filter_abnormal(pool, 1.5), Error);
}

TEST_CASE("majority_vote") {
    auto votes = [](std::initializer_list<const char*> values) {
        std::vector<LabelVote> out;
        int k = 0;
        for (const char* v : values) out.push_back({"gender", v, "annotator" + std::to_string(k++)});
        return out;
    };
    CHECK(majority_vote(votes({"A", "A", "B"}), "gender") == "A");
    CHECK(!majority_vote(votes({"A", "B"}), "gender"));
    CHECK(majority_vote(votes({"c", "a", "b", "a", "d", "b", "a"}), "gender") == "a");
    CHECK_THROWS_AS(majority_vote({}, "gender"), Error);

    SUBCASE("permutation invariance") {
        std::mt19937 gen(3);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<LabelVote> v;
            const int n = 1 + static_cast<int>(gen() % 7);
            for (int k = 0; k < n; ++k) v.push_back({"gender", std::string(1, static_cast<char>('a' + gen() % 3)), ""});
            const auto expected = majority_vote(v, "gender");
            std::shuffle(v.begin(), v.end(), gen);
            CHECK(majority_vote(v, "gender") == expected);
        }
    }
}

TEST_CASE("apply_votes sets majorities and unlabels ties") {
    const auto pool = gender_pool();
    std::map<UserKey, std::vector<LabelVote>> votes;
    votes[{"X", "u1"}] = {{"gender", "F", "m1"}, {"gender", "F", "m2"}, {"gender", "M", "m3"}};
    votes[{"X", "u2"}] = {{"gender", "F", "m1"}, {"gender", "M", "m2"}};
    const auto r = apply_votes(pool, votes);
    CHECK(r.labels_set == 1);
    CHECK(*r.pool.find({"X", "u1"})->label("gender") == "F");
    CHECK(r.pool.find({"X", "u2"})->label("gender") == nullptr);
    REQUIRE(r.ties.size() == 1);
    CHECK(r.ties[0].second == "gender");

    votes[{"X", "u3"}] = {{"gender", "Q", "m1"}};
    CHECK_THROWS_AS(apply_votes(pool, votes), Error);
}

TEST_CASE("marginal_distribution") {
    const auto m = marginal_distribution(gender_pool(), "gender");
    CHECK(m.probabilities == std::vector<double>{0.5, 0.5});
    CHECK(m.missing == 0);

    const auto fixture = testing::fixture_pool();
    const auto s = marginal_distribution(fixture, "settlement");
    CHECK(s.categories == std::vector<std::string>{"Rural", "Urban"});
    CHECK(s.probabilities == std::vector<double>{0.3, 0.7});

    for (const auto& attr : fixture.schema().attributes()) {
        if (attr.kind != AttributeKind::categorical) continue;
        const auto d = marginal_distribution(fixture, attr.name);
        double sum = 0.0;
        for (double p : d.probabilities) sum += p;
        CHECK(std::abs(sum - 1.0) <= 1e-12);
        CHECK(d.labeled + d.missing == fixture.size());
    }

    SUBCASE("missing labels are counted, not bucketed") {
        std::vector<UserRecord> users;
        for (int i = 0; i < 1000; ++i) {
            std::map<std::string, std::string> labels;
            if (i >= 10) labels["gender"] = i % 2 ? "M" : "F";
            users.push_back(user("u" + std::to_string(i), labels));
        }
        const auto d = marginal_distribution(UserPool(testing::small_schema(), users), "gender");
        CHECK(d.labeled == 990);
        CHECK(d.missing == 10);
        CHECK(d.counts == std::vector<std::size_t>{495, 495});
    }
    CHECK_THROWS_AS(marginal_distribution(fixture, "shoe_size"), Error);
    CHECK_THROWS_AS(marginal_distribution(fixture, "income"), Error);
}

TEST_CASE("query_users") {
    const auto pool = gender_pool();
    const auto f = query_users(pool, {{"gender", "F"}});
    REQUIRE(f.size() == 2);
    CHECK(f.users()[0].user_id == "u3");
    CHECK(f.users()[1].user_id == "u4");
    CHECK(query_users(pool, {}).size() == 4);

    const auto fixture = testing::fixture_pool();
    const Predicate pred{{"region", "Pennsylvania"}, {"education", "Bachelor"}};
    std::vector<std::string> expected;
    std::istringstream lines(testing::read_file(testing::data_path("pool/users.jsonl")));
    for (std::string line; std::getline(lines, line);) {
        const auto j = nlohmann::json::parse(line);
        const auto& l = j["labels"];
        if (l.value("region", "") == "Pennsylvania" && l.value("education", "") == "Bachelor") {
            expected.push_back(j["user_id"]);
        }
    }
    std::vector<std::string> got;
    const auto matched = query_users(fixture, pred);
    for (const auto& u : matched.users()) got.push_back(u.user_id);
    CHECK(!expected.empty());
    CHECK(got == expected);
}

TEST_CASE("pool snapshots are safe to read from several threads") {
    const auto pool = testing::fixture_pool();
    const auto expected = marginal_distribution(pool, "age").counts;
    std::vector<int> ok(4, 0);
    {
        std::vector<std::jthread> threads;
        for (int t = 0; t < 4; ++t) {
            threads.emplace_back([&, t] {
                for (int k = 0; k < 20; ++k) ok[t] += marginal_distribution(pool, "age").counts == expected;
            });
        }
    }
    for (int v : ok) CHECK(v == 20);
}
