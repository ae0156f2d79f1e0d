#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "socioverse/behavior.hpp"

namespace socioverse::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct ProjectPaths {
    std::optional<std::filesystem::path> pool;
    std::optional<std::filesystem::path> schema;
    std::filesystem::path scenarios = "scenarios";
    std::filesystem::path runs = "runs";
};

struct ProjectConfig {
    ProjectPaths paths;
    BackendDescriptor backend;
    std::uint64_t seed = 42;
    std::string log_level = "warn";

    // Relative paths in the file resolve against the file's directory.
    static ProjectConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
};

using Environment = std::map<std::string, std::string>;

Environment process_environment();

// Defaults, then the config file (explicit path, else SOCIOVERSE_CONFIG),
// then environment overrides. Command-line flags are applied by the caller.
ProjectConfig resolve_project_config(const std::optional<std::filesystem::path>& config_file,
                                     const Environment& env);

// Unique run directory runs/<scenario>/<timestamp>-<seed>[-k]; created on return.
std::filesystem::path make_run_directory(const std::filesystem::path& runs_root, const std::string& scenario_id,
                                         std::uint64_t seed);

// Entry point of the socioverse binary. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env = process_environment());

}  // namespace socioverse::cli
