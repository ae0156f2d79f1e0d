#include "socioverse/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "socioverse/error.hpp"

namespace socioverse {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

template <typename Json = json>
Json read_json_file(const fs::path& path, std::string_view what) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open {} file {}", what, path.string()));
    try {
        return Json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open context file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) text.pop_back();
    return text;
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw Error(fmt::format("{}: expected an object", where));
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw Error(fmt::format("{}: unknown key '{}'", where, key));
        }
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    auto it = j.find(key);
    return it == j.end() || it->is_null() ? fallback : it->get<T>();
}

std::optional<fs::path> optional_path(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::nullopt;
    return fs::path(it->get<std::string>());
}

AnswerKind answer_kind_from_string(std::string_view s) {
    if (s == "single_choice") return AnswerKind::single_choice;
    if (s == "multi_choice") return AnswerKind::multi_choice;
    if (s == "likert_1_5") return AnswerKind::likert_1_5;
    throw Error(fmt::format("unknown answer_kind '{}'", s));
}

std::string_view to_string(ScenarioType type) {
    switch (type) {
        case ScenarioType::questionnaire: return "questionnaire";
        case ScenarioType::indepth_interview: return "indepth_interview";
        case ScenarioType::behavior_experiment: return "behavior_experiment";
        case ScenarioType::social_media_interaction: return "social_media_interaction";
    }
    return "?";
}

ScenarioType scenario_type_from_string(std::string_view s) {
    for (auto t : {ScenarioType::questionnaire, ScenarioType::indepth_interview, ScenarioType::behavior_experiment,
                   ScenarioType::social_media_interaction}) {
        if (to_string(t) == s) return t;
    }
    throw Error(fmt::format("unknown scenario type '{}'", s));
}

PopulationMethod method_from_string(std::string_view s) {
    if (s == "ipf") return PopulationMethod::ipf;
    if (s == "ids") return PopulationMethod::ids;
    if (s == "regional") return PopulationMethod::regional;
    throw Error(fmt::format("unknown population method '{}'", s));
}

constexpr std::array<std::string_view, 2> kPromptLanguages{"EN", "ZH"};

}  // namespace

std::string_view to_string(AnswerKind kind) {
    switch (kind) {
        case AnswerKind::single_choice: return "single_choice";
        case AnswerKind::multi_choice: return "multi_choice";
        case AnswerKind::likert_1_5: return "likert_1_5";
    }
    return "?";
}

std::string_view to_string(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::election: return "election";
        case ScenarioKind::news: return "news";
        case ScenarioKind::economic: return "economic";
    }
    return "?";
}

std::string_view to_string(PopulationMethod method) {
    switch (method) {
        case PopulationMethod::ipf: return "ipf";
        case PopulationMethod::ids: return "ids";
        case PopulationMethod::regional: return "regional";
    }
    return "?";
}

ScenarioKind scenario_kind_from_string(std::string_view s) {
    if (s == "election") return ScenarioKind::election;
    if (s == "news") return ScenarioKind::news;
    if (s == "economic") return ScenarioKind::economic;
    throw Error(fmt::format("unknown scenario kind '{}'", s));
}

std::span<const std::string_view> prompt_languages() { return kPromptLanguages; }

// --- questionnaire ----------------------------------------------------------

const Option* Question::option(std::string_view label) const {
    for (const auto& o : options) {
        if (o.label == label) return &o;
    }
    return nullptr;
}

bool Question::is_spending() const {
    return kind == AnswerKind::single_choice && !options.empty() &&
           std::all_of(options.begin(), options.end(), [](const Option& o) { return o.interval.has_value(); });
}

const Question* Questionnaire::find(std::string_view qid) const {
    for (const auto& q : questions) {
        if (q.id == qid) return &q;
    }
    return nullptr;
}

const Dimension* Questionnaire::dimension(std::string_view tag) const {
    for (const auto& d : dimensions) {
        if (d.tag == tag) return &d;
    }
    return nullptr;
}

void Questionnaire::validate() const {
    const std::string src = "questionnaire " + id;
    if (id.empty()) throw FormatError("questionnaire: empty id");
    if (questions.empty()) throw FormatError(src + ": no questions");

    std::set<std::string> ids;
    for (const auto& q : questions) {
        if (q.id.empty()) throw FormatError(src + ": question with empty id");
        if (!ids.insert(q.id).second) throw FormatError(fmt::format("{}: duplicate question id '{}'", src, q.id));
        if (q.dimension.empty()) throw FormatError(fmt::format("{}: question {} has no dimension", src, q.id));

        std::set<std::string> labels;
        for (const auto& o : q.options) {
            if (o.label.empty()) throw FormatError(fmt::format("{}: question {} has an option without label", src, q.id));
            if (!labels.insert(o.label).second) {
                throw FormatError(fmt::format("{}: question {} repeats option label '{}'", src, q.id, o.label));
            }
            if (o.interval) {
                const auto& iv = *o.interval;
                if (!std::isfinite(iv.lo) || iv.lo < 0.0 || (iv.hi && !(*iv.hi >= iv.lo && std::isfinite(*iv.hi)))) {
                    throw FormatError(fmt::format("{}: question {} option {} has a malformed interval", src, q.id, o.label));
                }
            }
        }
        if (q.kind == AnswerKind::likert_1_5) {
            if (q.options.size() != 5) {
                throw FormatError(fmt::format("{}: Likert question {} needs 5 options, has {}", src, q.id, q.options.size()));
            }
            for (std::size_t i = 0; i < 5; ++i) {
                const auto& v = q.options[i].numeric_value;
                if (!v || *v != static_cast<double>(i + 1)) {
                    throw FormatError(fmt::format("{}: Likert question {} option {} must carry numeric_value {}", src,
                                                  q.id, q.options[i].label, i + 1));
                }
            }
        } else if (q.options.size() < 2) {
            throw FormatError(fmt::format("{}: question {} needs at least 2 options", src, q.id));
        }
    }

    std::set<std::string> tags;
    std::set<std::string> listed;
    for (const auto& d : dimensions) {
        if (!tags.insert(d.tag).second) throw FormatError(fmt::format("{}: duplicate dimension '{}'", src, d.tag));
        for (const auto& qid : d.question_ids) {
            const auto* q = find(qid);
            if (!q) throw FormatError(fmt::format("{}: dimension {} references unknown question '{}'", src, d.tag, qid));
            if (q->dimension != d.tag) {
                throw FormatError(fmt::format("{}: dimension {} lists {}, which is tagged {}", src, d.tag, qid, q->dimension));
            }
            if (!listed.insert(qid).second) {
                throw FormatError(fmt::format("{}: question {} listed twice in dimensions", src, qid));
            }
        }
    }
    for (const auto& q : questions) {
        if (!tags.count(q.dimension)) {
            throw FormatError(fmt::format("{}: question {} has undeclared dimension '{}'", src, q.id, q.dimension));
        }
        if (!listed.count(q.id)) {
            throw FormatError(fmt::format("{}: question {} missing from dimension {}", src, q.id, q.dimension));
        }
    }
}

Questionnaire Questionnaire::from_json(const json& j) {
    check_keys(j, {"id", "language", "title", "canonical", "questions", "dimensions"}, "questionnaire");
    Questionnaire qn;
    qn.id = j.at("id").get<std::string>();
    qn.language = get_or<std::string>(j, "language", "EN");
    qn.title = get_or<std::string>(j, "title", "");
    qn.canonical = get_or<bool>(j, "canonical", true);
    for (const auto& jq : j.at("questions")) {
        check_keys(jq, {"id", "text", "dimension", "answer_kind", "options"}, "question");
        Question q;
        q.id = jq.at("id").get<std::string>();
        q.text = jq.at("text").get<std::string>();
        q.dimension = jq.at("dimension").get<std::string>();
        q.kind = answer_kind_from_string(jq.at("answer_kind").get<std::string>());
        for (const auto& jo : jq.at("options")) {
            check_keys(jo, {"label", "text", "numeric_value", "interval"}, "option of " + q.id);
            Option o;
            o.label = jo.at("label").get<std::string>();
            o.text = get_or<std::string>(jo, "text", "");
            if (auto it = jo.find("numeric_value"); it != jo.end() && !it->is_null()) o.numeric_value = it->get<double>();
            if (auto it = jo.find("interval"); it != jo.end() && !it->is_null()) {
                if (!it->is_array() || it->size() != 2) {
                    throw FormatError(fmt::format("question {} option {}: interval must be [lo, hi]", q.id, o.label));
                }
                Interval iv;
                iv.lo = it->at(0).get<double>();
                if (!it->at(1).is_null()) iv.hi = it->at(1).get<double>();
                o.interval = iv;
            }
            q.options.push_back(std::move(o));
        }
        qn.questions.push_back(std::move(q));
    }
    if (auto it = j.find("dimensions"); it != j.end()) {
        for (const auto& jd : *it) {
            check_keys(jd, {"tag", "name", "questions"}, "dimension");
            qn.dimensions.push_back({jd.at("tag").get<std::string>(), get_or<std::string>(jd, "name", ""),
                                     jd.at("questions").get<std::vector<std::string>>()});
        }
    } else {
        for (const auto& q : qn.questions) {
            auto d = std::find_if(qn.dimensions.begin(), qn.dimensions.end(),
                                  [&](const Dimension& x) { return x.tag == q.dimension; });
            if (d == qn.dimensions.end()) d = qn.dimensions.insert(qn.dimensions.end(), {q.dimension, "", {}});
            d->question_ids.push_back(q.id);
        }
    }
    qn.validate();
    return qn;
}

ordered_json Questionnaire::to_json() const {
    ordered_json j;
    j["id"] = id;
    j["language"] = language;
    if (!title.empty()) j["title"] = title;
    j["canonical"] = canonical;
    j["dimensions"] = ordered_json::array();
    for (const auto& d : dimensions) {
        ordered_json jd;
        jd["tag"] = d.tag;
        if (!d.name.empty()) jd["name"] = d.name;
        jd["questions"] = d.question_ids;
        j["dimensions"].push_back(std::move(jd));
    }
    j["questions"] = ordered_json::array();
    for (const auto& q : questions) {
        ordered_json jq;
        jq["id"] = q.id;
        jq["text"] = q.text;
        jq["dimension"] = q.dimension;
        jq["answer_kind"] = to_string(q.kind);
        jq["options"] = ordered_json::array();
        for (const auto& o : q.options) {
            ordered_json jo;
            jo["label"] = o.label;
            jo["text"] = o.text;
            if (o.numeric_value) jo["numeric_value"] = *o.numeric_value;
            if (o.interval) {
                jo["interval"] = ordered_json::array({o.interval->lo, nullptr});
                if (o.interval->hi) jo["interval"][1] = *o.interval->hi;
            }
            jq["options"].push_back(std::move(jo));
        }
        j["questions"].push_back(std::move(jq));
    }
    return j;
}

Questionnaire load_questionnaire(const fs::path& path) {
    const json j = read_json_file(path, "questionnaire");
    try {
        return Questionnaire::from_json(j);
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// --- scenario config --------------------------------------------------------

fs::path ScenarioConfig::resolve(const fs::path& p) const {
    return p.is_absolute() || base_dir.empty() ? p : (base_dir / p).lexically_normal();
}

std::vector<std::string> ScenarioConfig::effective_match_attributes() const {
    if (!population.match_attributes.empty()) return population.match_attributes;
    if (population.method == PopulationMethod::regional) return {population.regional.attribute};
    return population.attributes;
}

ScenarioConfig ScenarioConfig::from_json(const json& j, const fs::path& base_dir) {
    check_keys(j, {"scenario_id", "kind", "type", "questionnaire", "pool", "schema", "population", "context",
                   "group_key", "ground_truth", "ablation", "generation", "evaluation", "description"},
               "scenario");
    ScenarioConfig c;
    c.base_dir = base_dir;
    c.scenario_id = j.at("scenario_id").get<std::string>();
    if (c.scenario_id.empty()) throw Error("scenario: empty scenario_id");
    c.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
    c.type = scenario_type_from_string(get_or<std::string>(j, "type", "questionnaire"));
    c.questionnaire = j.at("questionnaire").get<std::string>();
    c.pool = optional_path(j, "pool");
    c.schema = optional_path(j, "schema");
    c.ground_truth = optional_path(j, "ground_truth");
    if (auto it = j.find("group_key"); it != j.end() && !it->is_null()) c.group_key = it->get<std::string>();

    const json& p = j.at("population");
    check_keys(p, {"method", "size", "attributes", "match_attributes", "seed_table", "targets", "tol", "max_iter",
                   "reference", "allocation", "allow_replacement", "regions", "region_attribute", "income_cv",
                   "lognormal_share", "pareto_alpha", "allow_omission"},
               "population");
    auto& pop = c.population;
    pop.method = method_from_string(p.at("method").get<std::string>());
    const auto size = p.at("size").get<std::int64_t>();
    pop.size = size < 0 ? 0 : static_cast<std::size_t>(size);
    pop.attributes = get_or<std::vector<std::string>>(p, "attributes", {});
    pop.match_attributes = get_or<std::vector<std::string>>(p, "match_attributes", {});
    pop.seed_table = optional_path(p, "seed_table");
    pop.targets = optional_path(p, "targets");
    pop.ipf.tol = get_or<double>(p, "tol", pop.ipf.tol);
    pop.ipf.max_iter = get_or<std::size_t>(p, "max_iter", pop.ipf.max_iter);
    if (auto it = p.find("reference"); it != p.end() && !it->is_null()) {
        for (const auto& [k, v] : it->items()) pop.reference.emplace_back(k, v.get<std::string>());
    }
    const auto allocation = get_or<std::string>(p, "allocation", "apportioned");
    if (allocation == "apportioned") pop.ids.allocation = StrataAllocation::apportioned;
    else if (allocation == "multinomial") pop.ids.allocation = StrataAllocation::multinomial;
    else throw Error(fmt::format("population: unknown allocation '{}'", allocation));
    pop.ids.with_replacement = get_or<bool>(p, "allow_replacement", false);
    pop.regions = optional_path(p, "regions");
    pop.regional.attribute = get_or<std::string>(p, "region_attribute", pop.regional.attribute);
    pop.regional.income_cv = get_or<double>(p, "income_cv", pop.regional.income_cv);
    pop.regional.lognormal_share = get_or<double>(p, "lognormal_share", pop.regional.lognormal_share);
    pop.regional.pareto_alpha = get_or<double>(p, "pareto_alpha", pop.regional.pareto_alpha);
    pop.regional.allow_omission = get_or<bool>(p, "allow_omission", false);

    if (auto it = j.find("context"); it != j.end()) {
        check_keys(*it, {"include_posts", "max_posts", "extra_context"}, "context");
        c.context.include_posts = get_or<bool>(*it, "include_posts", true);
        c.context.max_posts = get_or<std::size_t>(*it, "max_posts", 10);
        c.context.extra_context = optional_path(*it, "extra_context");
    }
    if (auto it = j.find("ablation"); it != j.end()) {
        check_keys(*it, {"no_knowledge", "random_demographics"}, "ablation");
        c.ablation.no_knowledge = get_or<bool>(*it, "no_knowledge", false);
        c.ablation.random_demographics = get_or<bool>(*it, "random_demographics", false);
    }
    if (auto it = j.find("generation"); it != j.end()) {
        check_keys(*it, {"temperature", "max_tokens", "prompt_language"}, "generation");
        c.generation.temperature = get_or<double>(*it, "temperature", c.generation.temperature);
        c.generation.max_tokens = get_or<std::size_t>(*it, "max_tokens", c.generation.max_tokens);
        c.generation.prompt_language = get_or<std::string>(*it, "prompt_language", c.generation.prompt_language);
    }
    if (auto it = j.find("evaluation"); it != j.end()) {
        check_keys(*it, {"vote_question", "subsets"}, "evaluation");
        c.evaluation.vote_question = get_or<std::string>(*it, "vote_question", "");
        c.evaluation.subsets = optional_path(*it, "subsets");
    }
    return c;
}

ScenarioConfig load_scenario(const fs::path& path) {
    const json j = read_json_file(path, "scenario");
    try {
        return ScenarioConfig::from_json(j, path.parent_path());
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

SubsetMap load_subsets(const fs::path& path) {
    const json j = read_json_file(path, "subset");
    try {
        return j.get<SubsetMap>();
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

// --- validation -------------------------------------------------------------

bool has_errors(std::span<const Finding> findings) {
    return std::any_of(findings.begin(), findings.end(),
                       [](const Finding& f) { return f.severity == Finding::Severity::error; });
}

std::vector<Finding> validate_scenario(const ScenarioConfig& c) {
    std::vector<Finding> out;
    auto error = [&](std::string code, std::string msg) {
        out.push_back({Finding::Severity::error, std::move(code), std::move(msg)});
    };
    auto warn = [&](std::string code, std::string msg) {
        out.push_back({Finding::Severity::warning, std::move(code), std::move(msg)});
    };
    auto need_file = [&](const std::optional<fs::path>& p, std::string_view what) -> bool {
        if (!p) {
            error("missing-reference", fmt::format("no {} configured", what));
            return false;
        }
        if (!fs::exists(c.resolve(*p))) {
            error("missing-file", fmt::format("{} file not found: {}", what, c.resolve(*p).string()));
            return false;
        }
        return true;
    };

    if (c.type != ScenarioType::questionnaire) {
        error("unsupported-type", fmt::format("scenario type '{}' is not executable", to_string(c.type)));
    }
    if (c.population.size < 1) error("bad-size", "population size must be at least 1");

    const auto& pop = c.population;
    std::vector<std::string> attribute_set = pop.attributes;
    if (pop.method == PopulationMethod::regional) {
        attribute_set = {pop.regional.attribute};
    } else if (pop.attributes.empty()) {
        error("no-attributes", "population attribute set is empty");
    }

    std::optional<Questionnaire> qn;
    if (need_file(c.questionnaire, "questionnaire")) {
        try {
            qn = load_questionnaire(c.resolve(c.questionnaire));
        } catch (const std::exception& e) {
            error("bad-questionnaire", e.what());
        }
    }

    std::optional<Schema> schema;
    if (c.schema) {
        if (need_file(c.schema, "schema")) {
            try {
                schema = load_schema(c.resolve(*c.schema));
            } catch (const std::exception& e) {
                error("bad-schema", e.what());
            }
        }
    } else if (pop.method == PopulationMethod::ipf || pop.method == PopulationMethod::ids) {
        error("missing-reference", "no schema configured");
    }
    if (c.pool) {
        need_file(c.pool, "pool");
    } else if (pop.method == PopulationMethod::ids) {
        error("missing-reference", "identical-distribution sampling needs a pool");
    }

    if (schema) {
        for (const auto& a : pop.attributes) {
            const auto* s = schema->find(a);
            if (!s) error("unknown-attribute", fmt::format("attribute '{}' is not registered in the schema", a));
            else if (s->kind != AttributeKind::categorical) {
                error("continuous-attribute", fmt::format("attribute '{}' is continuous; populations need categories", a));
            }
        }
        for (const auto& [a, v] : pop.reference) {
            const auto* s = schema->find(a);
            if (!s) error("unknown-attribute", fmt::format("reference attribute '{}' is not registered", a));
            else if (!s->allows(v)) error("bad-reference", fmt::format("reference value '{}' not allowed for '{}'", v, a));
        }
        if (pop.method != PopulationMethod::regional || !pop.match_attributes.empty()) {
            for (const auto& a : c.effective_match_attributes()) {
                if (!schema->find(a)) {
                    error("unknown-attribute", fmt::format("match attribute '{}' is not registered", a));
                }
            }
        }
    }

    switch (pop.method) {
        case PopulationMethod::ipf:
            need_file(pop.targets, "targets");
            if (pop.seed_table) need_file(pop.seed_table, "seed table");
            if (!(pop.ipf.tol > 0.0) || pop.ipf.max_iter < 1) error("bad-ipf", "IPF needs tol > 0 and max_iter >= 1");
            break;
        case PopulationMethod::ids:
            break;
        case PopulationMethod::regional:
            if (need_file(pop.regions, "regions")) {
                try {
                    const auto regions = load_regions(c.resolve(*pop.regions));
                    if (c.group_key && *c.group_key == pop.regional.attribute && regions.size() < 2) {
                        warn("few-groups", fmt::format("group_key '{}' has fewer than 2 groups", *c.group_key));
                    }
                    if (regions.size() > pop.size && !pop.regional.allow_omission) {
                        error("regions-omitted", fmt::format("{} agents cannot cover {} regions", pop.size, regions.size()));
                    }
                } catch (const std::exception& e) {
                    error("bad-regions", e.what());
                }
            }
            try {
                IncomeMixtureParams{1.0, 1.0, pop.regional.lognormal_share, pop.regional.pareto_alpha}.validate();
            } catch (const std::exception& e) {
                error("bad-income", e.what());
            }
            break;
    }

    if (c.group_key) {
        if (std::find(attribute_set.begin(), attribute_set.end(), *c.group_key) == attribute_set.end()) {
            error("group-key", fmt::format("group_key '{}' is not in the population attribute set", *c.group_key));
        } else if (schema && pop.method != PopulationMethod::regional) {
            if (const auto* s = schema->find(*c.group_key); s && s->values.size() < 2) {
                warn("few-groups", fmt::format("group_key '{}' has fewer than 2 groups", *c.group_key));
            }
        }
    }

    const auto& lang = c.generation.prompt_language;
    if (std::find(kPromptLanguages.begin(), kPromptLanguages.end(), lang) == kPromptLanguages.end()) {
        error("prompt-language", fmt::format("no prompt template for language '{}'", lang));
    } else if (qn && qn->language != lang) {
        warn("language-mismatch",
             fmt::format("questionnaire language {} differs from prompt template language {}", qn->language, lang));
    }
    if (c.generation.temperature < 0.0 || c.generation.max_tokens < 1) {
        error("bad-generation", "temperature must be >= 0 and max_tokens >= 1");
    }
    if (c.context.extra_context) need_file(c.context.extra_context, "extra context");

    if (qn) {
        if (!qn->canonical) warn("placeholder-instrument", fmt::format("questionnaire {} is a placeholder", qn->id));
        switch (c.kind) {
            case ScenarioKind::election: {
                const auto* q = qn->find(c.evaluation.vote_question);
                if (!q) error("vote-question", fmt::format("vote question '{}' not found", c.evaluation.vote_question));
                else if (q->kind != AnswerKind::single_choice) error("vote-question", "vote question must be single_choice");
                if (!c.group_key) error("group-key", "election scenarios need a group_key");
                break;
            }
            case ScenarioKind::news:
                if (std::none_of(qn->questions.begin(), qn->questions.end(),
                                 [](const Question& q) { return q.kind == AnswerKind::likert_1_5; })) {
                    error("instrument-kind", "news scenarios need Likert questions");
                }
                break;
            case ScenarioKind::economic:
                if (std::none_of(qn->questions.begin(), qn->questions.end(),
                                 [](const Question& q) { return q.is_spending(); })) {
                    error("instrument-kind", "economic scenarios need interval-valued spending questions");
                }
                break;
        }
    }

    if (!c.ground_truth) warn("ground-truth", "no ground truth configured; evaluation will fail");
    else if (!fs::exists(c.resolve(*c.ground_truth))) {
        warn("ground-truth", fmt::format("ground truth file not found: {}", c.resolve(*c.ground_truth).string()));
    }
    if (c.evaluation.subsets) need_file(c.evaluation.subsets, "subsets");
    return out;
}

// --- plans ------------------------------------------------------------------

ordered_json SimulationPlan::to_json() const {
    ordered_json j;
    j["format"] = "socioverse-plan/1";
    j["scenario_id"] = scenario_id;
    j["kind"] = to_string(kind);
    j["seed"] = seed;
    j["group_key"] = group_key ? ordered_json(*group_key) : ordered_json(nullptr);
    j["generation"] = {{"temperature", generation.temperature},
                       {"max_tokens", generation.max_tokens},
                       {"prompt_language", generation.prompt_language}};
    j["ablation"] = {{"no_knowledge", ablation.no_knowledge}, {"random_demographics", ablation.random_demographics}};
    j["scenario_context"] = scenario_context;
    j["diagnostics"] = diagnostics;
    j["questionnaire"] = questionnaire.to_json();
    j["agents"] = ordered_json::array();
    for (const auto& a : agents) {
        ordered_json ja;
        ja["profile"] = profile_to_json(a.profile);
        ja["context"] = a.context;
        j["agents"].push_back(std::move(ja));
    }
    return j;
}

SimulationPlan SimulationPlan::from_json(const ordered_json& j) {
    if (j.value("format", "") != "socioverse-plan/1") throw FormatError("plan: unsupported or missing format tag");
    SimulationPlan p;
    p.scenario_id = j.at("scenario_id").get<std::string>();
    p.kind = scenario_kind_from_string(j.at("kind").get<std::string>());
    p.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("group_key").is_null()) p.group_key = j.at("group_key").get<std::string>();
    const auto& g = j.at("generation");
    p.generation = {g.at("temperature").get<double>(), g.at("max_tokens").get<std::size_t>(),
                    g.at("prompt_language").get<std::string>()};
    const auto& a = j.at("ablation");
    p.ablation = {a.at("no_knowledge").get<bool>(), a.at("random_demographics").get<bool>()};
    p.scenario_context = j.at("scenario_context").get<std::string>();
    p.diagnostics = j.at("diagnostics");
    p.questionnaire = Questionnaire::from_json(json(j.at("questionnaire")));
    for (const auto& ja : j.at("agents")) {
        p.agents.push_back({profile_from_json(json(ja.at("profile"))), ja.at("context").get<std::vector<std::string>>()});
    }
    return p;
}

std::string SimulationPlan::serialize() const { return to_json().dump(2) + "\n"; }

SimulationPlan load_plan(const fs::path& path) {
    const auto j = read_json_file<ordered_json>(path, "plan");
    try {
        return SimulationPlan::from_json(j);
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

UserPool load_scenario_pool(const ScenarioConfig& config) {
    if (!config.schema) return UserPool();
    Schema schema = load_schema(config.resolve(*config.schema));
    if (!config.pool) return UserPool(std::move(schema), {});
    return load_pool(config.resolve(*config.pool), schema);
}

namespace {

std::vector<Axis> schema_axes(const Schema& schema, std::span<const std::string> attributes) {
    std::vector<Axis> axes;
    for (const auto& a : attributes) {
        const auto& s = schema.at(a);
        if (s.kind != AttributeKind::categorical) throw Error(fmt::format("attribute '{}' is not categorical", a));
        axes.push_back({a, s.values});
    }
    return axes;
}

ordered_json ipf_diagnostics(const IpfResult& r) {
    return {{"iterations", r.iterations},
            {"converged", r.converged},
            {"max_relative_marginal_gap", r.max_relative_marginal_gap}};
}

struct Population {
    std::vector<AgentProfile> profiles;
    bool matched = false;  // profiles already carry matched users
};

ContingencyTable fit_ipf(const ScenarioConfig& c, const Schema& schema, ordered_json& diag) {
    const auto& pop = c.population;
    const json targets = read_json_file(c.resolve(*pop.targets), "targets");

    std::vector<std::string> inner = pop.attributes;
    std::optional<std::string> group_attr;
    if (targets.contains("groups")) {
        group_attr = targets.at("group_attribute").get<std::string>();
        auto it = std::find(inner.begin(), inner.end(), *group_attr);
        if (it == inner.end()) {
            throw Error(fmt::format("targets are grouped by '{}', which is not a population attribute", *group_attr));
        }
        inner.erase(it);
        if (inner.empty()) throw Error("grouped targets need at least one attribute besides the group");
    }

    ContingencyTable seed_table;
    if (pop.seed_table) {
        seed_table = load_table(c.resolve(*pop.seed_table));
        std::vector<std::string> names;
        for (const auto& ax : seed_table.axes()) names.push_back(ax.name);
        if (std::set<std::string>(names.begin(), names.end()) != std::set<std::string>(inner.begin(), inner.end())) {
            throw Error("seed table axes do not match the population attributes");
        }
    } else {
        seed_table = ContingencyTable::filled(schema_axes(schema, inner), 1.0);
    }

    auto fit = [&](const json& t) {
        return ipf_fit(seed_table, MarginalTargets::from_json(t, seed_table.axes()), pop.ipf);
    };
    if (c.ablation.random_demographics) diag["ipf"] = "skipped: random demographics";
    if (!group_attr) {
        if (c.ablation.random_demographics) return ContingencyTable::filled(seed_table.axes(), 1.0);
        auto r = fit(targets);
        diag["ipf"] = ipf_diagnostics(r);
        return std::move(r.fitted);
    }

    const auto& gs = schema.at(*group_attr);
    const auto& groups = targets.at("groups");
    for (const auto& [name, _] : groups.items()) {
        if (!gs.allows(name)) throw Error(fmt::format("targets name unknown {} '{}'", *group_attr, name));
    }
    Axis group_axis{*group_attr, {}};
    std::vector<ContingencyTable> fitted;
    ordered_json per_group = ordered_json::object();
    for (const auto& g : gs.values) {
        if (!groups.contains(g)) continue;
        group_axis.categories.push_back(g);
        // Uniform over the same groups and categories.
        if (c.ablation.random_demographics) {
            fitted.push_back(ContingencyTable::filled(seed_table.axes(), 1.0));
            continue;
        }
        auto r = fit(groups.at(g));
        per_group[g] = ipf_diagnostics(r);
        fitted.push_back(std::move(r.fitted));
    }
    if (!c.ablation.random_demographics) diag["ipf"] = std::move(per_group);
    return stack_tables(group_axis, fitted);
}

Population synthesize(const ScenarioConfig& c, const UserPool& pool, std::uint64_t seed, ordered_json& diag) {
    const auto& pop = c.population;
    const auto pop_seed = derive_seed(seed, "population");
    Population out;
    switch (pop.method) {
        case PopulationMethod::ipf: {
            const auto joint = fit_ipf(c, pool.schema(), diag);
            out.profiles = sample_profiles(joint, pop.size, pop_seed);
            break;
        }
        case PopulationMethod::ids: {
            if (c.ablation.random_demographics) {
                const auto joint = ContingencyTable::filled(schema_axes(pool.schema(), pop.attributes), 1.0);
                out.profiles = sample_profiles(joint, pop.size, pop_seed);
            } else {
                const UserPool reference = pop.reference.empty() ? pool : query_users(pool, pop.reference);
                diag["reference_users"] = reference.size();
                out.profiles = identical_distribution_sample(pool, reference, pop.attributes, pop.size, pop_seed, pop.ids);
                out.matched = true;
            }
            break;
        }
        case PopulationMethod::regional: {
            auto regions = load_regions(c.resolve(*pop.regions));
            if (c.ablation.random_demographics) {
                for (auto& r : regions) r.population = 1;
            }
            out.profiles = proportional_regional_profiles(regions, pop.size, pop_seed, pop.regional);
            break;
        }
    }
    return out;
}

std::vector<std::string> recent_posts(const UserRecord& user, std::size_t max_posts) {
    std::vector<const Post*> posts;
    for (const auto& p : user.posts) posts.push_back(&p);
    std::stable_sort(posts.begin(), posts.end(), [](const Post* a, const Post* b) {
        if (a->timestamp.has_value() != b->timestamp.has_value()) return a->timestamp.has_value();
        return a->timestamp && *a->timestamp > *b->timestamp;
    });
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < posts.size() && i < max_posts; ++i) texts.push_back(posts[i]->text);
    return texts;
}

}  // namespace

SimulationPlan build_plan(const ScenarioConfig& c, const UserPool& pool, std::uint64_t seed) {
    const auto findings = validate_scenario(c);
    for (const auto& f : findings) {
        if (f.severity == Finding::Severity::error) {
            throw Error(fmt::format("scenario {}: {} ({})", c.scenario_id, f.message, f.code));
        }
    }

    SimulationPlan plan;
    plan.scenario_id = c.scenario_id;
    plan.kind = c.kind;
    plan.seed = seed;
    plan.questionnaire = load_questionnaire(c.resolve(c.questionnaire));
    plan.group_key = c.group_key;
    plan.generation = c.generation;
    plan.ablation = c.ablation;
    if (c.context.extra_context) plan.scenario_context = read_text_file(c.resolve(*c.context.extra_context));

    ordered_json diag;
    diag["method"] = to_string(c.population.method);

    Population population;
    try {
        population = synthesize(c, pool, seed, diag);
    } catch (const StratumExhausted&) {
        throw;
    } catch (const Error& e) {
        throw Error(fmt::format("scenario {}: population synthesis failed: {}", c.scenario_id, e.what()));
    }

    std::vector<AgentProfile> profiles = std::move(population.profiles);
    std::size_t unmatched = 0;
    std::size_t reused = 0;
    const auto match_attrs = c.effective_match_attributes();
    const bool can_match = pool.size() > 0 && std::all_of(match_attrs.begin(), match_attrs.end(), [&](const auto& a) {
                               return pool.schema().find(a) != nullptr;
                           });
    if (!population.matched) {
        if (can_match) {
            auto report = match_profiles_to_users(profiles, pool, match_attrs, seed);
            profiles = std::move(report.profiles);
            unmatched = report.unmatched;
            reused = report.reused.size();
        } else {
            unmatched = profiles.size();
        }
    }
    diag["match"] = {{"attributes", population.matched ? c.population.attributes : match_attrs},
                     {"matched", profiles.size() - unmatched},
                     {"unmatched", unmatched},
                     {"reused", reused}};

    plan.agents.reserve(profiles.size());
    for (auto& p : profiles) {
        if (c.group_key) {
            auto it = p.attributes.find(*c.group_key);
            if (it == p.attributes.end()) {
                throw Error(fmt::format("agent {} has no value for group_key '{}'", p.agent_id, *c.group_key));
            }
            p.group_key = it->second;
        }
        PlannedAgent agent{std::move(p), {}};
        if (c.context.include_posts && !c.ablation.no_knowledge && agent.profile.matched_user) {
            if (const auto* user = pool.find(*agent.profile.matched_user)) {
                agent.context = recent_posts(*user, c.context.max_posts);
            }
        }
        plan.agents.push_back(std::move(agent));
    }
    plan.diagnostics = std::move(diag);
    return plan;
}

}  // namespace socioverse
