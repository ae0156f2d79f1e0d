#include "socioverse/user_pool.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include <fmt/format.h>

#include "socioverse/error.hpp"

namespace socioverse {

using nlohmann::json;

const std::string* UserRecord::label(std::string_view attribute) const {
    auto it = labels.find(std::string(attribute));
    return it == labels.end() ? nullptr : &it->second;
}

std::size_t AttributeSchema::index_of(std::string_view value) const {
    auto it = std::find(values.begin(), values.end(), value);
    return it == values.end() ? std::string::npos : static_cast<std::size_t>(it - values.begin());
}

bool AttributeSchema::allows(std::string_view value) const {
    if (kind == AttributeKind::categorical) return index_of(value) != std::string::npos;
    try {
        std::size_t used = 0;
        const double v = std::stod(std::string(value), &used);
        return used == value.size() && std::isfinite(v);
    } catch (const std::exception&) {
        return false;
    }
}

Schema::Schema(std::vector<AttributeSchema> attributes) : attributes_(std::move(attributes)) {
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
        const auto& a = attributes_[i];
        if (a.name.empty()) throw Error("schema: attribute with empty name");
        for (std::size_t j = 0; j < i; ++j) {
            if (attributes_[j].name == a.name) throw Error("schema: duplicate attribute '" + a.name + "'");
        }
        if (a.kind == AttributeKind::categorical) {
            if (a.values.empty()) throw Error("schema: categorical attribute '" + a.name + "' has no values");
            auto sorted = a.values;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
                throw Error("schema: attribute '" + a.name + "' lists a value twice");
            }
        }
    }
}

const AttributeSchema* Schema::find(std::string_view name) const {
    for (const auto& a : attributes_) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

const AttributeSchema& Schema::at(std::string_view name) const {
    if (const auto* a = find(name)) return *a;
    throw Error(fmt::format("attribute '{}' is not registered in the schema", name));
}

Schema Schema::from_json(const json& j) {
    if (!j.is_array()) throw FormatError("schema: expected a JSON array of attributes");
    std::vector<AttributeSchema> attrs;
    for (const auto& item : j) {
        if (!item.is_object()) throw FormatError("schema: attribute entries must be objects");
        AttributeSchema a;
        a.name = item.value("name", "");
        const std::string kind = item.value("kind", "categorical");
        if (kind == "categorical") {
            a.kind = AttributeKind::categorical;
            if (!item.contains("values") || !item["values"].is_array()) {
                throw FormatError("schema: categorical attribute '" + a.name + "' needs a values array");
            }
            a.values = item["values"].get<std::vector<std::string>>();
        } else if (kind == "continuous") {
            a.kind = AttributeKind::continuous;
            a.unit = item.value("unit", "");
        } else {
            throw FormatError("schema: attribute '" + a.name + "' has unknown kind '" + kind + "'");
        }
        a.description = item.value("description", "");
        attrs.push_back(std::move(a));
    }
    return Schema(std::move(attrs));
}

nlohmann::ordered_json Schema::to_json() const {
    auto out = nlohmann::ordered_json::array();
    for (const auto& a : attributes_) {
        nlohmann::ordered_json item;
        item["name"] = a.name;
        if (a.kind == AttributeKind::categorical) {
            item["kind"] = "categorical";
            item["values"] = a.values;
        } else {
            item["kind"] = "continuous";
            item["unit"] = a.unit;
        }
        item["description"] = a.description;
        out.push_back(std::move(item));
    }
    return out;
}

Schema load_schema(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open schema file " + path.string());
    try {
        return Schema::from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

// --- pool storage -----------------------------------------------------------

struct UserPool::Data {
    Schema schema;
    std::vector<UserRecord> users;
    std::map<UserKey, std::size_t> index;
    std::size_t posts = 0;
};

UserPool::UserPool() : data_(std::make_shared<Data>()) {}

UserPool::UserPool(Schema schema, std::vector<UserRecord> users) {
    auto data = std::make_shared<Data>();
    data->schema = std::move(schema);
    data->users = std::move(users);
    for (std::size_t i = 0; i < data->users.size(); ++i) {
        const auto& u = data->users[i];
        auto [it, inserted] = data->index.emplace(u.key(), i);
        if (!inserted) {
            throw Error(fmt::format("duplicate user {} at positions {} and {}", u.key().str(),
                                    it->second + 1, i + 1));
        }
        data->posts += u.posts.size();
    }
    data_ = std::move(data);
}

const Schema& UserPool::schema() const noexcept { return data_->schema; }
std::span<const UserRecord> UserPool::users() const noexcept { return data_->users; }
std::size_t UserPool::post_count() const noexcept { return data_->posts; }

const UserRecord* UserPool::find(const UserKey& key) const {
    auto it = data_->index.find(key);
    return it == data_->index.end() ? nullptr : &data_->users[it->second];
}

UserPool UserPool::subset(std::span<const std::size_t> indices) const {
    std::vector<UserRecord> users;
    users.reserve(indices.size());
    for (std::size_t i : indices) users.push_back(data_->users.at(i));
    return UserPool(data_->schema, std::move(users));
}

// --- timestamps -------------------------------------------------------------

namespace {

// Howard Hinnant's civil-date algorithms.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp < 10 ? mp + 3 : mp - 9;
    y += m <= 2;
}

bool read_digits(std::string_view s, std::size_t pos, std::size_t n, int& out) {
    if (pos + n > s.size()) return false;
    out = 0;
    for (std::size_t i = pos; i < pos + n; ++i) {
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
        out = out * 10 + (s[i] - '0');
    }
    return true;
}

}  // namespace

std::string format_timestamp(std::int64_t epoch_seconds) {
    std::int64_t days = epoch_seconds / 86400;
    std::int64_t secs = epoch_seconds % 86400;
    if (secs < 0) {
        secs += 86400;
        --days;
    }
    std::int64_t y;
    unsigned m, d;
    civil_from_days(days, y, m, d);
    return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}Z", y, m, d, secs / 3600,
                       (secs / 60) % 60, secs % 60);
}

std::optional<std::int64_t> parse_timestamp(std::string_view s) {
    if (!s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c));
        })) {
        if (s.size() > 18) return std::nullopt;
        return std::stoll(std::string(s));
    }
    int y, mo, d, h, mi, se;
    if (s.size() < 20 || !read_digits(s, 0, 4, y) || s[4] != '-' || !read_digits(s, 5, 2, mo) ||
        s[7] != '-' || !read_digits(s, 8, 2, d) || (s[10] != 'T' && s[10] != ' ') ||
        !read_digits(s, 11, 2, h) || s[13] != ':' || !read_digits(s, 14, 2, mi) || s[16] != ':' ||
        !read_digits(s, 17, 2, se)) {
        return std::nullopt;
    }
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 60) return std::nullopt;
    std::size_t pos = 19;
    if (pos < s.size() && s[pos] == '.') {
        ++pos;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    std::int64_t offset = 0;
    if (pos < s.size() && s[pos] == 'Z') {
        ++pos;
    } else if (pos < s.size() && (s[pos] == '+' || s[pos] == '-')) {
        int oh, om;
        if (!read_digits(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
            !read_digits(s, pos + 4, 2, om)) {
            return std::nullopt;
        }
        offset = (s[pos] == '+' ? 1 : -1) * (oh * 3600 + om * 60);
        pos += 6;
    } else {
        return std::nullopt;
    }
    if (pos != s.size()) return std::nullopt;
    return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 +
           h * 3600 + mi * 60 + se - offset;
}

// --- JSONL codec ------------------------------------------------------------

namespace {

bool blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::optional<std::int64_t> read_count(const json& post, const char* field) {
    auto it = post.find(field);
    if (it == post.end() || it->is_null()) return std::nullopt;
    if (!it->is_number_integer()) throw Error(fmt::format("post field '{}' must be an integer", field));
    const auto v = it->get<std::int64_t>();
    if (v < 0) throw Error(fmt::format("post field '{}' must be non-negative", field));
    return v;
}

}  // namespace

UserRecord user_from_json(const json& j, const Schema& schema) {
    if (!j.is_object()) throw Error("record must be a JSON object");
    UserRecord u;
    if (!j.contains("user_id") || !j["user_id"].is_string()) throw Error("missing string field 'user_id'");
    u.user_id = j["user_id"].get<std::string>();
    if (u.user_id.empty()) throw Error("empty user_id");
    if (!j.contains("platform") || !j["platform"].is_string()) throw Error("missing string field 'platform'");
    u.platform = j["platform"].get<std::string>();
    if (u.platform.empty()) throw Error("empty platform");

    if (auto it = j.find("posts"); it != j.end()) {
        if (!it->is_array()) throw Error("'posts' must be an array");
        for (const auto& p : *it) {
            if (!p.is_object() || !p.contains("text") || !p["text"].is_string()) {
                throw Error("each post needs a string 'text'");
            }
            Post post;
            post.text = p["text"].get<std::string>();
            if (blank(post.text)) throw Error("post text is empty");
            if (auto ts = p.find("timestamp"); ts != p.end() && !ts->is_null()) {
                std::optional<std::int64_t> parsed;
                if (ts->is_string()) parsed = parse_timestamp(ts->get<std::string>());
                else if (ts->is_number_integer()) parsed = ts->get<std::int64_t>();
                if (!parsed) throw Error("unreadable post timestamp " + ts->dump());
                post.timestamp = parsed;
            }
            post.likes = read_count(p, "likes");
            post.comments = read_count(p, "comments");
            post.reposts = read_count(p, "reposts");
            u.posts.push_back(std::move(post));
        }
    }

    if (auto it = j.find("labels"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw Error("'labels' must be an object");
        for (const auto& [name, value] : it->items()) {
            if (!value.is_string()) throw Error("label '" + name + "' must be a string");
            const auto* attr = schema.find(name);
            if (!attr) throw Error("label '" + name + "' is not a registered attribute");
            const auto v = value.get<std::string>();
            if (!attr->allows(v)) {
                throw Error(fmt::format("label {}=\"{}\" is not an allowed value", name, v));
            }
            u.labels.emplace(name, v);
        }
    }
    return u;
}

nlohmann::ordered_json user_to_json(const UserRecord& user) {
    nlohmann::ordered_json j;
    j["user_id"] = user.user_id;
    j["platform"] = user.platform;
    auto posts = nlohmann::ordered_json::array();
    for (const auto& p : user.posts) {
        nlohmann::ordered_json pj;
        pj["text"] = p.text;
        if (p.timestamp) pj["timestamp"] = format_timestamp(*p.timestamp);
        if (p.likes) pj["likes"] = *p.likes;
        if (p.comments) pj["comments"] = *p.comments;
        if (p.reposts) pj["reposts"] = *p.reposts;
        posts.push_back(std::move(pj));
    }
    j["posts"] = std::move(posts);
    auto labels = nlohmann::ordered_json::object();
    for (const auto& [k, v] : user.labels) labels[k] = v;
    j["labels"] = std::move(labels);
    return j;
}

UserPool ingest_pool(std::istream& in, const Schema& schema, const std::string& source) {
    std::vector<UserRecord> users;
    std::map<UserKey, std::size_t> first_line;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (blank(line)) continue;
        UserRecord user;
        try {
            user = user_from_json(json::parse(line), schema);
        } catch (const json::exception& e) {
            throw FormatError(source, line_no, std::string("malformed record: ") + e.what());
        } catch (const Error& e) {
            throw FormatError(source, line_no, e.what());
        }
        auto [it, inserted] = first_line.emplace(user.key(), line_no);
        if (!inserted) {
            throw FormatError(source, line_no,
                              fmt::format("duplicate user {}: first seen at line {}, again at line {}",
                                          user.key().str(), it->second, line_no));
        }
        users.push_back(std::move(user));
    }
    return UserPool(schema, std::move(users));
}

UserPool load_pool(const std::filesystem::path& pool_file, const Schema& schema) {
    std::ifstream in(pool_file);
    if (!in) throw Error("cannot open pool file " + pool_file.string());
    return ingest_pool(in, schema, pool_file.string());
}

void export_pool(const UserPool& pool, std::ostream& out) {
    for (const auto& u : pool.users()) out << user_to_json(u).dump() << '\n';
}

// --- cleaning ---------------------------------------------------------------

namespace {

// Decodes one UTF-8 code point at s[i]; returns its byte length (1 on invalid input).
std::size_t decode_utf8(std::string_view s, std::size_t i, char32_t& cp) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = b0 < 0x80 ? 1 : (b0 >> 5) == 0x6 ? 2 : (b0 >> 4) == 0xE ? 3 : (b0 >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
        cp = b0;
        return 1;
    }
    cp = len == 1 ? b0 : len == 2 ? (b0 & 0x1F) : len == 3 ? (b0 & 0x0F) : (b0 & 0x07);
    for (std::size_t k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b >> 6) != 0x2) {
            cp = b0;
            return 1;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    return len;
}

bool is_ideograph(char32_t cp) {
    return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) ||
           (cp >= 0x20000 && cp <= 0x2A6DF) || (cp >= 0xF900 && cp <= 0xFAFF);
}

bool is_wide_separator(char32_t cp) {
    return (cp >= 0x3000 && cp <= 0x303F) || (cp >= 0xFF00 && cp <= 0xFF0F) ||
           (cp >= 0xFF1A && cp <= 0xFF20) || (cp >= 0xFF3B && cp <= 0xFF40) ||
           (cp >= 0xFF5B && cp <= 0xFF65) || (cp >= 0x2000 && cp <= 0x206F);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) tokens.push_back(std::move(current));
        current.clear();
    };
    for (std::size_t i = 0; i < text.size();) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (c < 0x80) {
            if (std::isspace(c) || std::ispunct(c) || c < 0x20) flush();
            else current.push_back(static_cast<char>(std::tolower(c)));
            ++i;
            continue;
        }
        char32_t cp;
        const std::size_t len = decode_utf8(text, i, cp);
        if (is_ideograph(cp)) {
            flush();
            tokens.emplace_back(text.substr(i, len));
        } else if (is_wide_separator(cp)) {
            flush();
        } else {
            current.append(text.substr(i, len));
        }
        i += len;
    }
    flush();
    return tokens;
}

double word_repetition_ratio(std::span<const Post> posts) {
    if (posts.empty()) throw Error("word_repetition_ratio: no posts");
    if (posts.size() == 1) return 0.0;
    std::vector<std::vector<std::string>> bags;
    bags.reserve(posts.size());
    for (const auto& p : posts) {
        auto t = tokenize(p.text);
        std::sort(t.begin(), t.end());
        bags.push_back(std::move(t));
    }
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < bags.size(); ++a) {
        for (std::size_t b = a + 1; b < bags.size(); ++b, ++pairs) {
            const auto& x = bags[a];
            const auto& y = bags[b];
            const std::size_t denom = std::max(x.size(), y.size());
            if (denom == 0) continue;  // two token-free posts share no words
            std::size_t common = 0;
            for (std::size_t i = 0, j = 0; i < x.size() && j < y.size();) {
                if (x[i] < y[j]) ++i;
                else if (y[j] < x[i]) ++j;
                else {
                    ++common;
                    ++i;
                    ++j;
                }
            }
            sum += static_cast<double>(common) / static_cast<double>(denom);
        }
    }
    return sum / static_cast<double>(pairs);
}

FilterReport filter_abnormal(const UserPool& pool, double threshold, std::size_t min_posts) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw Error(fmt::format("filter threshold {} outside [0, 1]", threshold));
    }
    FilterReport report;
    std::vector<std::size_t> keep;
    const auto users = pool.users();
    for (std::size_t i = 0; i < users.size(); ++i) {
        const auto& u = users[i];
        if (u.posts.size() >= min_posts && !u.posts.empty()) {
            const double ratio = word_repetition_ratio(u.posts);
            if (ratio > threshold) {
                report.removed.push_back({u.key(), ratio});
                continue;
            }
        }
        keep.push_back(i);
    }
    report.examined = users.size();
    report.retention_rate =
        users.empty() ? 1.0 : static_cast<double>(keep.size()) / static_cast<double>(users.size());
    report.kept = pool.subset(keep);
    return report;
}

// --- labels -----------------------------------------------------------------

std::optional<std::string> majority_vote(std::span<const LabelVote> votes, std::string_view attribute) {
    if (votes.empty()) throw Error("majority_vote: no votes");
    std::map<std::string, std::size_t> counts;
    for (const auto& v : votes) {
        if (v.attribute != attribute) {
            throw Error(fmt::format("majority_vote: vote for '{}' mixed into '{}'", v.attribute, attribute));
        }
        ++counts[v.value];
    }
    const std::string* best = nullptr;
    std::size_t best_count = 0;
    bool tie = false;
    for (const auto& [value, count] : counts) {
        if (count > best_count) {
            best = &value;
            best_count = count;
            tie = false;
        } else if (count == best_count) {
            tie = true;
        }
    }
    if (tie) return std::nullopt;
    return *best;
}

AnnotationReport apply_votes(const UserPool& pool,
                             const std::map<UserKey, std::vector<LabelVote>>& votes) {
    const auto& schema = pool.schema();
    AnnotationReport report;
    std::vector<UserRecord> users(pool.users().begin(), pool.users().end());
    for (auto& u : users) {
        auto it = votes.find(u.key());
        if (it == votes.end()) continue;
        std::map<std::string, std::vector<LabelVote>> by_attribute;
        for (const auto& v : it->second) {
            const auto& attr = schema.at(v.attribute);
            if (!attr.allows(v.value)) {
                throw Error(fmt::format("vote by '{}' for {} gives {}=\"{}\", not an allowed value",
                                        v.annotator, u.key().str(), v.attribute, v.value));
            }
            by_attribute[v.attribute].push_back(v);
        }
        for (const auto& [attribute, list] : by_attribute) {
            if (auto winner = majority_vote(list, attribute)) {
                u.labels[attribute] = *winner;
                ++report.labels_set;
            } else {
                u.labels.erase(attribute);
                report.ties.emplace_back(u.key(), attribute);
            }
        }
    }
    report.pool = UserPool(schema, std::move(users));
    return report;
}

// --- queries ----------------------------------------------------------------

Marginal marginal_distribution(const UserPool& pool, std::string_view attribute) {
    const auto& attr = pool.schema().at(attribute);
    if (attr.kind != AttributeKind::categorical) {
        throw Error(fmt::format("attribute '{}' is continuous; marginals need categories", attribute));
    }
    Marginal m;
    m.attribute = attr.name;
    m.categories = attr.values;
    m.counts.assign(attr.values.size(), 0);
    for (const auto& u : pool.users()) {
        const auto* v = u.label(attribute);
        if (!v) {
            ++m.missing;
            continue;
        }
        ++m.counts[attr.index_of(*v)];
        ++m.labeled;
    }
    if (m.labeled == 0) {
        throw Error(fmt::format("no user in the pool carries label '{}'", attribute));
    }
    m.probabilities.reserve(m.counts.size());
    for (auto c : m.counts) {
        m.probabilities.push_back(static_cast<double>(c) / static_cast<double>(m.labeled));
    }
    return m;
}

bool matches(const UserRecord& user, const Predicate& predicate) {
    for (const auto& [attribute, value] : predicate) {
        const auto* v = user.label(attribute);
        if (!v || *v != value) return false;
    }
    return true;
}

UserPool query_users(const UserPool& pool, const Predicate& predicate) {
    for (const auto& clause : predicate) pool.schema().at(clause.first);
    std::vector<std::size_t> hits;
    const auto users = pool.users();
    for (std::size_t i = 0; i < users.size(); ++i) {
        if (matches(users[i], predicate)) hits.push_back(i);
    }
    return pool.subset(hits);
}

}  // namespace socioverse
