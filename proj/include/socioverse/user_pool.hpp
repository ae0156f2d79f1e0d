#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace socioverse {

inline constexpr std::string_view kPlatformX = "X";
inline constexpr std::string_view kPlatformRednote = "Rednote";

struct Post {
    std::string text;
    std::optional<std::int64_t> timestamp;  // seconds since the Unix epoch, UTC
    std::optional<std::int64_t> likes;
    std::optional<std::int64_t> comments;
    std::optional<std::int64_t> reposts;

    bool operator==(const Post&) const = default;
};

struct UserKey {
    std::string platform;
    std::string user_id;

    auto operator<=>(const UserKey&) const = default;
    std::string str() const { return "(" + platform + ", " + user_id + ")"; }
};

struct UserRecord {
    std::string user_id;
    std::string platform;  // "X", "Rednote", or any custom platform name
    std::vector<Post> posts;
    std::map<std::string, std::string> labels;  // missing label = absent key

    UserKey key() const { return {platform, user_id}; }
    const std::string* label(std::string_view attribute) const;
    bool operator==(const UserRecord&) const = default;
};

enum class AttributeKind { categorical, continuous };

struct AttributeSchema {
    std::string name;
    AttributeKind kind = AttributeKind::categorical;
    std::vector<std::string> values;  // categorical only; order is the canonical category order
    std::string unit;                 // continuous only
    std::string description;

    bool allows(std::string_view value) const;
    // Position of value in `values`, or npos.
    std::size_t index_of(std::string_view value) const;
};

// Registered attributes of a pool, in declaration order.
class Schema {
public:
    Schema() = default;
    explicit Schema(std::vector<AttributeSchema> attributes);

    const AttributeSchema* find(std::string_view name) const;
    const AttributeSchema& at(std::string_view name) const;  // throws Error if unregistered
    const std::vector<AttributeSchema>& attributes() const noexcept { return attributes_; }
    bool empty() const noexcept { return attributes_.empty(); }

    static Schema from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;

private:
    std::vector<AttributeSchema> attributes_;
};

Schema load_schema(const std::filesystem::path& path);

// Immutable snapshot of a user pool. Copies share storage, reads are thread-safe.
class UserPool {
public:
    UserPool();
    UserPool(Schema schema, std::vector<UserRecord> users);

    const Schema& schema() const noexcept;
    std::span<const UserRecord> users() const noexcept;
    std::size_t size() const noexcept { return users().size(); }
    std::size_t post_count() const noexcept;
    const UserRecord* find(const UserKey& key) const;

    // New snapshot holding the given users (indices into users()), in the given order.
    UserPool subset(std::span<const std::size_t> indices) const;

private:
    struct Data;
    std::shared_ptr<const Data> data_;
};

// Reads the canonical JSONL pool format. Blank lines are skipped. Throws
// FormatError naming the line for malformed records, schema violations and
// duplicate (platform, user_id) keys.
UserPool ingest_pool(std::istream& in, const Schema& schema, const std::string& source = {});
UserPool load_pool(const std::filesystem::path& pool_file, const Schema& schema);

// Canonical JSONL: one record per line, fixed key order, labels sorted, LF endings.
void export_pool(const UserPool& pool, std::ostream& out);
nlohmann::ordered_json user_to_json(const UserRecord& user);
UserRecord user_from_json(const nlohmann::json& j, const Schema& schema);

std::string format_timestamp(std::int64_t epoch_seconds);
// Accepts "YYYY-MM-DDTHH:MM:SS[.fff](Z|+HH:MM|-HH:MM)" and plain epoch seconds.
std::optional<std::int64_t> parse_timestamp(std::string_view text);

// --- cleaning ---------------------------------------------------------------

// Lowercased word tokens. ASCII whitespace and punctuation separate tokens;
// each CJK ideograph is a token of its own.
std::vector<std::string> tokenize(std::string_view text);

// Mean over unordered post pairs of |multiset intersection| / max(|a|, |b|).
// One post gives 0. Throws Error on an empty list.
double word_repetition_ratio(std::span<const Post> posts);

inline constexpr double kDefaultRepetitionThreshold = 0.3;
inline constexpr std::size_t kDefaultMinPosts = 3;

struct RemovedUser {
    UserKey key;
    double ratio = 0.0;
};

struct FilterReport {
    UserPool kept;
    std::vector<RemovedUser> removed;
    std::size_t examined = 0;
    double retention_rate = 1.0;
};

// Removes users whose repetition ratio exceeds `threshold`. Users with fewer
// than `min_posts` posts are always kept.
FilterReport filter_abnormal(const UserPool& pool,
                             double threshold = kDefaultRepetitionThreshold,
                             std::size_t min_posts = kDefaultMinPosts);

// --- labels -----------------------------------------------------------------

struct LabelVote {
    std::string attribute;
    std::string value;
    std::string annotator;
};

// Strictly most frequent value; nullopt on a tie for first place.
std::optional<std::string> majority_vote(std::span<const LabelVote> votes,
                                         std::string_view attribute);

struct AnnotationReport {
    UserPool pool;
    std::size_t labels_set = 0;
    std::vector<std::pair<UserKey, std::string>> ties;  // (user, attribute) left unlabeled
};

// Applies majority-voted labels. Votes are validated against the schema; tied
// attributes are removed from the user's labels.
AnnotationReport apply_votes(const UserPool& pool,
                             const std::map<UserKey, std::vector<LabelVote>>& votes);

// --- queries ----------------------------------------------------------------

struct Marginal {
    std::string attribute;
    std::vector<std::string> categories;
    std::vector<std::size_t> counts;
    std::vector<double> probabilities;
    std::size_t labeled = 0;
    std::size_t missing = 0;
};

Marginal marginal_distribution(const UserPool& pool, std::string_view attribute);

// Conjunction of attribute == value clauses.
using Predicate = std::vector<std::pair<std::string, std::string>>;

UserPool query_users(const UserPool& pool, const Predicate& predicate);
bool matches(const UserRecord& user, const Predicate& predicate);

}  // namespace socioverse
