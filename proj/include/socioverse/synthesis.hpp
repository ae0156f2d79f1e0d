#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "socioverse/error.hpp"
#include "socioverse/rng.hpp"
#include "socioverse/user_pool.hpp"

namespace socioverse {

struct Axis {
    std::string name;
    std::vector<std::string> categories;

    bool operator==(const Axis&) const = default;
};

// Dense N-dimensional table of non-negative masses, row-major in axis order
// (the last axis varies fastest).
class ContingencyTable {
public:
    ContingencyTable() = default;
    ContingencyTable(std::vector<Axis> axes, std::vector<double> cells);

    static ContingencyTable filled(std::vector<Axis> axes, double value);

    const std::vector<Axis>& axes() const noexcept { return axes_; }
    std::span<const double> cells() const noexcept { return cells_; }
    std::size_t size() const noexcept { return cells_.size(); }
    std::size_t rank() const noexcept { return axes_.size(); }

    std::size_t axis_index(std::string_view name) const;  // throws Error if absent
    std::size_t stride(std::size_t axis) const noexcept { return strides_[axis]; }
    // Category index along `axis` for a flat cell index.
    std::size_t coordinate(std::size_t flat, std::size_t axis) const noexcept {
        return (flat / strides_[axis]) % axes_[axis].categories.size();
    }
    std::size_t flat_index(std::span<const std::size_t> coords) const;

    double total() const noexcept;
    std::vector<double> marginal(std::size_t axis) const;
    ContingencyTable normalized() const;

    // {"axes": [{"name", "categories"}], "cells": [...]}
    static ContingencyTable from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;

    bool operator==(const ContingencyTable& other) const {
        return axes_ == other.axes_ && cells_ == other.cells_;
    }

private:
    std::vector<Axis> axes_;
    std::vector<double> cells_;
    std::vector<std::size_t> strides_;
};

ContingencyTable load_table(const std::filesystem::path& path);

struct MarginalTarget {
    std::string attribute;
    std::vector<double> mass;  // aligned with the matching axis' categories
};

// Per-attribute target masses. All targets must carry the same total mass.
class MarginalTargets {
public:
    MarginalTargets() = default;
    explicit MarginalTargets(std::vector<MarginalTarget> targets);

    const std::vector<MarginalTarget>& targets() const noexcept { return targets_; }
    const MarginalTarget* find(std::string_view attribute) const;
    double total() const noexcept { return total_; }

    // Reads {attribute: {category: mass}} with categories ordered by `axes`.
    static MarginalTargets from_json(const nlohmann::json& j, const std::vector<Axis>& axes);

private:
    std::vector<MarginalTarget> targets_;
    double total_ = 0.0;
};

// Axes in file order from a marginals document {attribute: {category: mass}}.
std::vector<Axis> axes_from_marginals(const nlohmann::ordered_json& j);

struct IpfOptions {
    double tol = 1e-6;            // max relative marginal gap accepted as converged
    std::size_t max_iter = 1000;  // sweeps
};

struct IpfResult {
    ContingencyTable fitted;
    std::size_t iterations = 0;
    bool converged = false;
    double max_relative_marginal_gap = 0.0;
    std::vector<std::vector<double>> gaps;  // per target, per category
    std::vector<double> gap_history;        // max gap after each sweep
};

// Relative gap |fitted - target| / target; a zero target reports fitted / total.
std::vector<std::vector<double>> marginal_gaps(const ContingencyTable& table,
                                               const MarginalTargets& targets);

// Iterative proportional fitting. One sweep rescales the table once along every
// targeted axis, in the table's axis order. Non-convergence is reported in the
// result, not thrown.
IpfResult ipf_fit(const ContingencyTable& seed, const MarginalTargets& targets,
                  const IpfOptions& options = {});

// Stacks per-group tables (same axes) under a new leading axis.
ContingencyTable stack_tables(const Axis& group_axis, std::span<const ContingencyTable> tables);

// --- profiles ---------------------------------------------------------------

struct AgentProfile {
    std::string agent_id;
    std::map<std::string, std::string> attributes;
    std::optional<double> income;
    std::optional<std::string> group_key;
    std::optional<UserKey> matched_user;

    bool operator==(const AgentProfile&) const = default;
};

std::string agent_id_for(std::size_t index);

nlohmann::ordered_json profile_to_json(const AgentProfile& profile);
AgentProfile profile_from_json(const nlohmann::json& j);

// Flat cell indices of n i.i.d. draws; draw i uses stream i of `seed`.
std::vector<std::size_t> sample_cells(const ContingencyTable& joint, std::size_t n, std::uint64_t seed);

// n i.i.d. profiles from the joint (need not be normalized).
std::vector<AgentProfile> sample_profiles(const ContingencyTable& joint, std::size_t n, std::uint64_t seed);

// Empirical joint counts of `users` over categorical `attributes` (schema order
// of categories). Throws if a user lacks one of the labels.
ContingencyTable empirical_joint(const UserPool& users, std::span<const std::string> attributes);

class StratumExhausted : public Error {
public:
    StratumExhausted(std::string stratum, std::size_t available, std::size_t demanded);
    const std::string& stratum() const noexcept { return stratum_; }

private:
    std::string stratum_;
};

enum class StrataAllocation {
    apportioned,  // largest-remainder quotas of the reference joint
    multinomial,  // i.i.d. draws from the reference joint
};

struct IdsOptions {
    StrataAllocation allocation = StrataAllocation::apportioned;
    bool with_replacement = false;
};

// Samples n pool users whose joint over `attributes` follows the reference set.
// Every returned profile carries matched_user.
std::vector<AgentProfile> identical_distribution_sample(const UserPool& pool, const UserPool& reference,
                                                        std::span<const std::string> attributes,
                                                        std::size_t n, std::uint64_t seed,
                                                        const IdsOptions& options = {});

// Largest-remainder apportionment of `seats` by integer weights; remainder ties
// go to the lexicographically smaller name.
std::vector<std::size_t> apportion(std::span<const std::uint64_t> weights,
                                   std::span<const std::string> names, std::size_t seats);

// --- income -----------------------------------------------------------------

struct IncomeMixtureParams {
    double mu_actual = 0.0;
    double sigma_actual = 0.0;
    double lognormal_share = 0.9;  // 1.0 gives a pure log-normal
    double pareto_alpha = 2.5;

    void validate() const;  // throws Error
    double lognormal_mu() const;
    double lognormal_sigma() const;
    // lognormal_share-quantile of the log-normal; +inf when share == 1.
    double x_min() const;

    static IncomeMixtureParams from_json(const nlohmann::json& j);
};

// Draws below x_min come from the log-normal restricted to (0, x_min); the
// rest from Pareto(alpha, x_min).
double income_draw(const IncomeMixtureParams& params, Rng& rng);
std::vector<double> income_mixture_sample(const IncomeMixtureParams& params, std::size_t n,
                                          std::uint64_t seed);

struct Region {
    std::string name;
    std::uint64_t population = 0;
    double mean_income = 0.0;
    std::optional<double> income_sd;
};

std::vector<Region> load_regions(const std::filesystem::path& path);
std::vector<Region> regions_from_json(const nlohmann::json& j);

struct RegionalOptions {
    std::string attribute = "region";
    double income_cv = 0.6;  // sigma_actual / mean when a region has no income_sd
    double lognormal_share = 0.9;
    double pareto_alpha = 2.5;
    bool allow_omission = false;  // permit n < number of regions
};

std::vector<AgentProfile> proportional_regional_profiles(std::span<const Region> regions, std::size_t n,
                                                         std::uint64_t seed,
                                                         const RegionalOptions& options = {});

// --- matching ---------------------------------------------------------------

struct MatchReport {
    std::vector<AgentProfile> profiles;
    std::size_t matched = 0;
    std::size_t unmatched = 0;
    std::vector<std::string> reused;  // agent ids matched after their stratum ran out
};

MatchReport match_profiles_to_users(std::span<const AgentProfile> profiles, const UserPool& pool,
                                    std::span<const std::string> attributes, std::uint64_t seed);

}  // namespace socioverse
