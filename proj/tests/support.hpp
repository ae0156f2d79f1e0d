#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "socioverse/user_pool.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path data_path(const std::string& rel) { return fs::path(SOCIOVERSE_DATA_DIR) / rel; }
inline fs::path golden_path(const std::string& rel) { return fs::path(SOCIOVERSE_GOLDEN_DIR) / rel; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        for (;;) {
            path_ = fs::temp_directory_path() / ("socioverse-test-" + std::to_string(rd()));
            if (fs::create_directory(path_)) break;
        }
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    f << text;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

inline socioverse::Schema small_schema() {
    using socioverse::AttributeKind;
    return socioverse::Schema({
        {"gender", AttributeKind::categorical, {"M", "F"}, "", ""},
        {"region", AttributeKind::categorical, {"R1", "R2", "R3"}, "", ""},
        {"education", AttributeKind::categorical, {"school", "college"}, "", ""},
        {"income", AttributeKind::continuous, {}, "CNY", ""},
    });
}

inline socioverse::UserRecord user(std::string id, std::map<std::string, std::string> labels,
                                   std::vector<std::string> posts = {"hello world"}) {
    socioverse::UserRecord u;
    u.user_id = std::move(id);
    u.platform = "X";
    for (auto& p : posts) u.posts.push_back({std::move(p), std::nullopt, std::nullopt, std::nullopt, std::nullopt});
    u.labels = std::move(labels);
    return u;
}

inline socioverse::UserPool fixture_pool() {
    return socioverse::load_pool(data_path("pool/users.jsonl"), socioverse::load_schema(data_path("pool/schema.json")));
}

// Asymptotic two-sample Kolmogorov-Smirnov p-value.
inline double ks_two_sample_p(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    const double ne = na * nb / (na + nb);
    const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
    double p = 0.0;
    for (int k = 1; k <= 100; ++k) {
        p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    }
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace testing
