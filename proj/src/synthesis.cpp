#include "socioverse/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <fmt/format.h>

namespace socioverse {

using nlohmann::json;

// --- ContingencyTable -------------------------------------------------------

ContingencyTable::ContingencyTable(std::vector<Axis> axes, std::vector<double> cells)
    : axes_(std::move(axes)), cells_(std::move(cells)) {
    if (axes_.empty()) throw Error("contingency table needs at least one axis");
    std::size_t expected = 1;
    for (const auto& a : axes_) {
        if (a.categories.empty()) throw Error("axis '" + a.name + "' has no categories");
        auto sorted = a.categories;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw Error("axis '" + a.name + "' repeats a category");
        }
        for (const auto& b : axes_) {
            if (&a != &b && a.name == b.name) throw Error("axis '" + a.name + "' appears twice");
        }
        expected *= a.categories.size();
    }
    if (cells_.size() != expected) {
        throw Error(fmt::format("table has {} cells, axes require {}", cells_.size(), expected));
    }
    double total = 0.0;
    for (double c : cells_) {
        if (!std::isfinite(c) || c < 0.0) throw Error(fmt::format("table cell {} is not a finite mass >= 0", c));
        total += c;
    }
    if (!(total > 0.0)) throw Error("table has zero total mass");
    strides_.assign(axes_.size(), 1);
    for (std::size_t k = axes_.size() - 1; k > 0; --k) {
        strides_[k - 1] = strides_[k] * axes_[k].categories.size();
    }
}

ContingencyTable ContingencyTable::filled(std::vector<Axis> axes, double value) {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.categories.size();
    return ContingencyTable(std::move(axes), std::vector<double>(n, value));
}

std::size_t ContingencyTable::axis_index(std::string_view name) const {
    for (std::size_t k = 0; k < axes_.size(); ++k) {
        if (axes_[k].name == name) return k;
    }
    throw Error(fmt::format("table has no axis '{}'", name));
}

std::size_t ContingencyTable::flat_index(std::span<const std::size_t> coords) const {
    if (coords.size() != axes_.size()) throw Error("coordinate rank does not match table rank");
    std::size_t flat = 0;
    for (std::size_t k = 0; k < coords.size(); ++k) {
        if (coords[k] >= axes_[k].categories.size()) throw Error("coordinate out of range");
        flat += coords[k] * strides_[k];
    }
    return flat;
}

double ContingencyTable::total() const noexcept {
    return std::accumulate(cells_.begin(), cells_.end(), 0.0);
}

std::vector<double> ContingencyTable::marginal(std::size_t axis) const {
    std::vector<double> m(axes_.at(axis).categories.size(), 0.0);
    for (std::size_t i = 0; i < cells_.size(); ++i) m[coordinate(i, axis)] += cells_[i];
    return m;
}

ContingencyTable ContingencyTable::normalized() const {
    const double t = total();
    auto cells = cells_;
    for (auto& c : cells) c /= t;
    return ContingencyTable(axes_, std::move(cells));
}

ContingencyTable ContingencyTable::from_json(const json& j) {
    if (!j.is_object() || !j.contains("axes") || !j.contains("cells")) {
        throw FormatError("table JSON needs 'axes' and 'cells'");
    }
    std::vector<Axis> axes;
    for (const auto& a : j["axes"]) {
        axes.push_back({a.at("name").get<std::string>(), a.at("categories").get<std::vector<std::string>>()});
    }
    return ContingencyTable(std::move(axes), j["cells"].get<std::vector<double>>());
}

nlohmann::ordered_json ContingencyTable::to_json() const {
    nlohmann::ordered_json j;
    auto axes = nlohmann::ordered_json::array();
    for (const auto& a : axes_) {
        nlohmann::ordered_json aj;
        aj["name"] = a.name;
        aj["categories"] = a.categories;
        axes.push_back(std::move(aj));
    }
    j["axes"] = std::move(axes);
    j["cells"] = cells_;
    return j;
}

ContingencyTable load_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open table file " + path.string());
    try {
        return ContingencyTable::from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

// --- MarginalTargets --------------------------------------------------------

MarginalTargets::MarginalTargets(std::vector<MarginalTarget> targets) : targets_(std::move(targets)) {
    if (targets_.empty()) throw Error("no marginal targets");
    for (std::size_t i = 0; i < targets_.size(); ++i) {
        const auto& t = targets_[i];
        double sum = 0.0;
        for (double v : t.mass) {
            if (!std::isfinite(v) || v < 0.0) throw Error("target '" + t.attribute + "' has a negative or non-finite mass");
            sum += v;
        }
        if (!(sum > 0.0)) throw Error("target '" + t.attribute + "' has zero total mass");
        if (i == 0) {
            total_ = sum;
        } else if (std::abs(sum - total_) > 1e-9 * total_) {
            throw Error(fmt::format("inconsistent target masses: '{}' sums to {} but '{}' sums to {}",
                                    t.attribute, sum, targets_[0].attribute, total_));
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (targets_[j].attribute == t.attribute) throw Error("duplicate target '" + t.attribute + "'");
        }
    }
}

const MarginalTarget* MarginalTargets::find(std::string_view attribute) const {
    for (const auto& t : targets_) {
        if (t.attribute == attribute) return &t;
    }
    return nullptr;
}

MarginalTargets MarginalTargets::from_json(const json& j, const std::vector<Axis>& axes) {
    if (!j.is_object()) throw FormatError("marginals JSON must map attribute -> {category: mass}");
    std::vector<MarginalTarget> targets;
    for (const auto& axis : axes) {
        auto it = j.find(axis.name);
        if (it == j.end()) continue;
        if (!it->is_object()) throw FormatError("marginal '" + axis.name + "' must be an object");
        MarginalTarget t{axis.name, std::vector<double>(axis.categories.size(), 0.0)};
        std::vector<bool> seen(axis.categories.size(), false);
        for (const auto& [category, mass] : it->items()) {
            auto pos = std::find(axis.categories.begin(), axis.categories.end(), category);
            if (pos == axis.categories.end()) {
                throw FormatError("marginal '" + axis.name + "' names unknown category '" + category + "'");
            }
            const auto k = static_cast<std::size_t>(pos - axis.categories.begin());
            t.mass[k] = mass.get<double>();
            seen[k] = true;
        }
        for (std::size_t k = 0; k < seen.size(); ++k) {
            if (!seen[k]) {
                throw FormatError("marginal '" + axis.name + "' omits category '" + axis.categories[k] + "'");
            }
        }
        targets.push_back(std::move(t));
    }
    for (const auto& [name, _] : j.items()) {
        if (std::none_of(axes.begin(), axes.end(), [&](const Axis& a) { return a.name == name; })) {
            throw FormatError("marginal '" + name + "' does not match any table axis");
        }
    }
    return MarginalTargets(std::move(targets));
}

std::vector<Axis> axes_from_marginals(const nlohmann::ordered_json& j) {
    if (!j.is_object()) throw FormatError("marginals JSON must map attribute -> {category: mass}");
    std::vector<Axis> axes;
    for (const auto& [name, cats] : j.items()) {
        Axis a{name, {}};
        for (const auto& [category, _] : cats.items()) a.categories.push_back(category);
        axes.push_back(std::move(a));
    }
    return axes;
}

// --- IPF --------------------------------------------------------------------

namespace {

struct TargetBinding {
    std::size_t axis;
    const MarginalTarget* target;
};

std::vector<TargetBinding> bind_targets(const ContingencyTable& table, const MarginalTargets& targets) {
    std::vector<TargetBinding> bound;
    for (std::size_t k = 0; k < table.rank(); ++k) {
        const auto* t = targets.find(table.axes()[k].name);
        if (!t) continue;
        if (t->mass.size() != table.axes()[k].categories.size()) {
            throw Error(fmt::format("target '{}' has {} entries, axis has {} categories", t->attribute,
                                    t->mass.size(), table.axes()[k].categories.size()));
        }
        bound.push_back({k, t});
    }
    if (bound.size() != targets.targets().size()) {
        for (const auto& t : targets.targets()) table.axis_index(t.attribute);  // throws for the stray one
    }
    return bound;
}

}  // namespace

std::vector<std::vector<double>> marginal_gaps(const ContingencyTable& table, const MarginalTargets& targets) {
    std::vector<std::vector<double>> gaps;
    const double total = targets.total();
    for (const auto& t : targets.targets()) {
        const auto m = table.marginal(table.axis_index(t.attribute));
        std::vector<double> g(m.size());
        for (std::size_t k = 0; k < m.size(); ++k) {
            g[k] = t.mass[k] > 0.0 ? std::abs(m[k] - t.mass[k]) / t.mass[k] : m[k] / total;
        }
        gaps.push_back(std::move(g));
    }
    return gaps;
}

IpfResult ipf_fit(const ContingencyTable& seed, const MarginalTargets& targets, const IpfOptions& options) {
    const auto bound = bind_targets(seed, targets);
    std::vector<double> cells(seed.cells().begin(), seed.cells().end());
    IpfResult result;
    std::vector<double> marg;
    std::vector<double> factor;

    auto max_gap = [](const std::vector<std::vector<double>>& gaps) {
        double worst = 0.0;
        for (const auto& g : gaps) {
            for (double v : g) worst = std::max(worst, v);
        }
        return worst;
    };

    ContingencyTable current = seed;
    for (std::size_t sweep = 1; sweep <= std::max<std::size_t>(options.max_iter, 1); ++sweep) {
        for (const auto& [axis, target] : bound) {
            const std::size_t width = target->mass.size();
            marg.assign(width, 0.0);
            for (std::size_t i = 0; i < cells.size(); ++i) marg[seed.coordinate(i, axis)] += cells[i];
            factor.assign(width, 0.0);
            for (std::size_t k = 0; k < width; ++k) {
                factor[k] = marg[k] > 0.0 ? target->mass[k] / marg[k] : 0.0;
            }
            for (std::size_t i = 0; i < cells.size(); ++i) cells[i] *= factor[seed.coordinate(i, axis)];
        }
        result.iterations = sweep;
        if (std::accumulate(cells.begin(), cells.end(), 0.0) > 0.0) {
            current = ContingencyTable(seed.axes(), cells);
        }
        result.gaps = marginal_gaps(current, targets);
        result.max_relative_marginal_gap = max_gap(result.gaps);
        result.gap_history.push_back(result.max_relative_marginal_gap);
        if (result.max_relative_marginal_gap <= options.tol) {
            result.converged = true;
            break;
        }
    }
    result.fitted = std::move(current);
    return result;
}

ContingencyTable stack_tables(const Axis& group_axis, std::span<const ContingencyTable> tables) {
    if (tables.size() != group_axis.categories.size()) {
        throw Error("stack_tables: one table per group category required");
    }
    std::vector<Axis> axes{group_axis};
    axes.insert(axes.end(), tables.front().axes().begin(), tables.front().axes().end());
    std::vector<double> cells;
    for (const auto& t : tables) {
        if (t.axes() != tables.front().axes()) throw Error("stack_tables: group tables disagree on axes");
        cells.insert(cells.end(), t.cells().begin(), t.cells().end());
    }
    return ContingencyTable(std::move(axes), std::move(cells));
}

// --- profiles ---------------------------------------------------------------

std::string agent_id_for(std::size_t index) { return fmt::format("agent-{:06d}", index); }

nlohmann::ordered_json profile_to_json(const AgentProfile& p) {
    nlohmann::ordered_json j;
    j["agent_id"] = p.agent_id;
    auto attrs = nlohmann::ordered_json::object();
    for (const auto& [k, v] : p.attributes) attrs[k] = v;
    j["attributes"] = std::move(attrs);
    if (p.income) j["income"] = *p.income;
    if (p.group_key) j["group_key"] = *p.group_key;
    if (p.matched_user) {
        j["matched_user"] = {{"platform", p.matched_user->platform}, {"user_id", p.matched_user->user_id}};
    }
    return j;
}

AgentProfile profile_from_json(const json& j) {
    AgentProfile p;
    p.agent_id = j.at("agent_id").get<std::string>();
    p.attributes = j.at("attributes").get<std::map<std::string, std::string>>();
    if (auto it = j.find("income"); it != j.end() && !it->is_null()) p.income = it->get<double>();
    if (auto it = j.find("group_key"); it != j.end() && !it->is_null()) p.group_key = it->get<std::string>();
    if (auto it = j.find("matched_user"); it != j.end() && !it->is_null()) {
        p.matched_user = UserKey{it->at("platform").get<std::string>(), it->at("user_id").get<std::string>()};
    }
    return p;
}

std::vector<std::size_t> sample_cells(const ContingencyTable& joint, std::size_t n, std::uint64_t seed) {
    const auto cells = joint.cells();
    std::vector<double> cdf(cells.size());
    std::partial_sum(cells.begin(), cells.end(), cdf.begin());
    const double total = cdf.back();
    if (!(total > 0.0)) throw Error("cannot sample from a zero-mass joint");
    std::size_t last_nonzero = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] > 0.0) last_nonzero = i;
    }
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, i);
        const double u = rng.uniform() * total;
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        out[i] = it == cdf.end() ? last_nonzero : static_cast<std::size_t>(it - cdf.begin());
    }
    return out;
}

namespace {

std::map<std::string, std::string> cell_attributes(const ContingencyTable& t, std::size_t flat) {
    std::map<std::string, std::string> attrs;
    for (std::size_t k = 0; k < t.rank(); ++k) {
        attrs[t.axes()[k].name] = t.axes()[k].categories[t.coordinate(flat, k)];
    }
    return attrs;
}

std::string cell_name(const ContingencyTable& t, std::size_t flat) {
    std::string name;
    for (std::size_t k = 0; k < t.rank(); ++k) {
        if (k) name += ", ";
        name += t.axes()[k].name + "=" + t.axes()[k].categories[t.coordinate(flat, k)];
    }
    return name;
}

std::string stratum_key(const std::map<std::string, std::string>& labels, std::span<const std::string> attributes,
                        bool& complete) {
    std::string key;
    complete = true;
    for (const auto& a : attributes) {
        auto it = labels.find(a);
        if (it == labels.end()) {
            complete = false;
            return {};
        }
        key += a + "=" + it->second + '\x1f';
    }
    return key;
}

}  // namespace

std::vector<AgentProfile> sample_profiles(const ContingencyTable& joint, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw Error("sample_profiles: n must be at least 1");
    const auto cells = sample_cells(joint, n, seed);
    std::vector<AgentProfile> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        AgentProfile p;
        p.agent_id = agent_id_for(i);
        p.attributes = cell_attributes(joint, cells[i]);
        out.push_back(std::move(p));
    }
    return out;
}

ContingencyTable empirical_joint(const UserPool& users, std::span<const std::string> attributes) {
    if (attributes.empty()) throw Error("empirical_joint: no attributes");
    std::vector<Axis> axes;
    for (const auto& name : attributes) {
        const auto& attr = users.schema().at(name);
        if (attr.kind != AttributeKind::categorical) throw Error("attribute '" + name + "' is not categorical");
        axes.push_back({attr.name, attr.values});
    }
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.categories.size();
    std::vector<double> counts(n, 0.0);
    std::vector<std::size_t> coords(axes.size());
    for (const auto& u : users.users()) {
        for (std::size_t k = 0; k < axes.size(); ++k) {
            const auto* v = u.label(axes[k].name);
            if (!v) {
                throw Error(fmt::format("reference user {} lacks label '{}'", u.key().str(), axes[k].name));
            }
            coords[k] = users.schema().at(axes[k].name).index_of(*v);
        }
        std::size_t flat = 0, stride = 1;
        for (std::size_t k = axes.size(); k-- > 0;) {
            flat += coords[k] * stride;
            stride *= axes[k].categories.size();
        }
        counts[flat] += 1.0;
    }
    return ContingencyTable(std::move(axes), std::move(counts));
}

StratumExhausted::StratumExhausted(std::string stratum, std::size_t available, std::size_t demanded)
    : Error(fmt::format("stratum [{}] has {} pool users but {} are demanded", stratum, available, demanded)),
      stratum_(std::move(stratum)) {}

std::vector<std::size_t> apportion(std::span<const std::uint64_t> weights, std::span<const std::string> names,
                                   std::size_t seats) {
    if (weights.size() != names.size()) throw Error("apportion: weights and names differ in length");
    unsigned __int128 total = 0;
    for (auto w : weights) total += w;
    if (total == 0) throw Error("apportion: total weight is zero");
    std::vector<std::size_t> counts(weights.size());
    std::vector<unsigned __int128> remainder(weights.size());
    std::size_t given = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const unsigned __int128 scaled = static_cast<unsigned __int128>(weights[i]) * seats;
        counts[i] = static_cast<std::size_t>(scaled / total);
        remainder[i] = scaled % total;
        given += counts[i];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
        if (names[a] != names[b]) return names[a] < names[b];
        return a < b;
    });
    for (std::size_t k = 0; given < seats; ++k, ++given) ++counts[order[k]];
    return counts;
}

std::vector<AgentProfile> identical_distribution_sample(const UserPool& pool, const UserPool& reference,
                                                        std::span<const std::string> attributes,
                                                        std::size_t n, std::uint64_t seed,
                                                        const IdsOptions& options) {
    if (n == 0) throw Error("identical_distribution_sample: n must be at least 1");
    if (reference.size() == 0) throw Error("identical_distribution_sample: empty reference set");
    const ContingencyTable joint = empirical_joint(reference, attributes);

    // One stratum (flat cell) per agent slot, in agent order.
    std::vector<std::size_t> slots;
    if (options.allocation == StrataAllocation::multinomial) {
        slots = sample_cells(joint, n, derive_seed(seed, "ids-strata"));
    } else {
        std::vector<std::uint64_t> weights;
        std::vector<std::string> names;
        for (std::size_t c = 0; c < joint.size(); ++c) {
            weights.push_back(static_cast<std::uint64_t>(joint.cells()[c]));
            names.push_back(cell_name(joint, c));
        }
        const auto quotas = apportion(weights, names, n);
        for (std::size_t c = 0; c < quotas.size(); ++c) slots.insert(slots.end(), quotas[c], c);
        Rng order(derive_seed(seed, "ids-order"));
        for (std::size_t i = slots.size(); i > 1; --i) std::swap(slots[i - 1], slots[order.below(i)]);
    }

    std::vector<std::size_t> demand(joint.size(), 0);
    for (auto c : slots) ++demand[c];

    // Pool users per stratum, in pool order.
    std::vector<std::vector<std::size_t>> members(joint.size());
    const auto users = pool.users();
    std::vector<std::size_t> coords(joint.rank());
    for (std::size_t i = 0; i < users.size(); ++i) {
        bool complete = true;
        for (std::size_t k = 0; k < joint.rank() && complete; ++k) {
            const auto* v = users[i].label(joint.axes()[k].name);
            if (!v) complete = false;
            else coords[k] = pool.schema().at(joint.axes()[k].name).index_of(*v);
        }
        if (complete) members[joint.flat_index(coords)].push_back(i);
    }

    std::vector<std::vector<std::size_t>> drawn(joint.size());
    for (std::size_t c = 0; c < joint.size(); ++c) {
        if (demand[c] == 0) continue;
        auto avail = members[c];
        const std::size_t m = avail.size();
        if (m == 0 || (m < demand[c] && !options.with_replacement)) {
            throw StratumExhausted(cell_name(joint, c), m, demand[c]);
        }
        Rng rng(derive_seed(seed, "ids-draw"), c);
        const std::size_t distinct = std::min(m, demand[c]);
        for (std::size_t j = 0; j < distinct; ++j) std::swap(avail[j], avail[j + rng.below(m - j)]);
        drawn[c].assign(avail.begin(), avail.begin() + static_cast<std::ptrdiff_t>(distinct));
        for (std::size_t j = distinct; j < demand[c]; ++j) drawn[c].push_back(avail[rng.below(m)]);
    }

    std::vector<std::size_t> used(joint.size(), 0);
    std::vector<AgentProfile> out;
    out.reserve(n);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto c = slots[i];
        AgentProfile p;
        p.agent_id = agent_id_for(i);
        p.attributes = cell_attributes(joint, c);
        p.matched_user = users[drawn[c][used[c]++]].key();
        out.push_back(std::move(p));
    }
    return out;
}

// --- income -----------------------------------------------------------------

void IncomeMixtureParams::validate() const {
    if (!(std::isfinite(mu_actual) && mu_actual > 0.0)) throw Error("income: mu_actual must be > 0");
    if (!(std::isfinite(sigma_actual) && sigma_actual > 0.0)) throw Error("income: sigma_actual must be > 0");
    if (!(lognormal_share > 0.0 && lognormal_share <= 1.0)) {
        throw Error("income: lognormal_share must lie in (0, 1]");
    }
    if (!(std::isfinite(pareto_alpha) && pareto_alpha > 1.0)) throw Error("income: pareto_alpha must be > 1");
}

double IncomeMixtureParams::lognormal_mu() const {
    return std::log(mu_actual * mu_actual / std::sqrt(sigma_actual * sigma_actual + mu_actual * mu_actual));
}

double IncomeMixtureParams::lognormal_sigma() const {
    return std::sqrt(std::log1p(sigma_actual * sigma_actual / (mu_actual * mu_actual)));
}

double IncomeMixtureParams::x_min() const {
    if (lognormal_share >= 1.0) return std::numeric_limits<double>::infinity();
    const boost::math::normal_distribution<double> standard;
    return std::exp(lognormal_mu() + lognormal_sigma() * boost::math::quantile(standard, lognormal_share));
}

IncomeMixtureParams IncomeMixtureParams::from_json(const json& j) {
    IncomeMixtureParams p;
    p.mu_actual = j.at("mu_actual").get<double>();
    p.sigma_actual = j.at("sigma_actual").get<double>();
    p.lognormal_share = j.value("lognormal_share", p.lognormal_share);
    p.pareto_alpha = j.value("pareto_alpha", p.pareto_alpha);
    p.validate();
    return p;
}

double income_draw(const IncomeMixtureParams& params, Rng& rng) {
    static const boost::math::normal_distribution<double> standard;
    const double branch = rng.uniform();
    const double v = rng.uniform_open();
    if (params.lognormal_share >= 1.0 || branch < params.lognormal_share) {
        const double z = boost::math::quantile(standard, v * params.lognormal_share);
        return std::exp(params.lognormal_mu() + params.lognormal_sigma() * z);
    }
    return params.x_min() * std::pow(v, -1.0 / params.pareto_alpha);
}

std::vector<double> income_mixture_sample(const IncomeMixtureParams& params, std::size_t n, std::uint64_t seed) {
    params.validate();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, i);
        out[i] = income_draw(params, rng);
    }
    return out;
}

std::vector<Region> regions_from_json(const json& j) {
    if (!j.is_array()) throw FormatError("region file must be a JSON array");
    std::vector<Region> regions;
    for (const auto& r : j) {
        Region region;
        region.name = r.at("region").get<std::string>();
        const auto pop = r.at("population");
        if (!pop.is_number() || pop.get<double>() <= 0.0) {
            throw FormatError("region '" + region.name + "' needs a positive population");
        }
        region.population = pop.get<std::uint64_t>();
        region.mean_income = r.at("mean_income").get<double>();
        if (!(region.mean_income > 0.0)) throw FormatError("region '" + region.name + "' needs mean_income > 0");
        if (auto it = r.find("income_sd"); it != r.end() && !it->is_null()) region.income_sd = it->get<double>();
        regions.push_back(std::move(region));
    }
    return regions;
}

std::vector<Region> load_regions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open region file " + path.string());
    try {
        return regions_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError(path.string(), 0, e.what());
    }
}

std::vector<AgentProfile> proportional_regional_profiles(std::span<const Region> regions, std::size_t n,
                                                         std::uint64_t seed, const RegionalOptions& options) {
    if (regions.empty()) throw Error("proportional_regional_profiles: no regions");
    if (n < regions.size() && !options.allow_omission) {
        throw Error(fmt::format("{} agents cannot cover {} regions", n, regions.size()));
    }
    std::vector<std::uint64_t> weights;
    std::vector<std::string> names;
    for (const auto& r : regions) {
        if (r.population == 0) throw Error("region '" + r.name + "' has zero population");
        if (std::find(names.begin(), names.end(), r.name) != names.end()) {
            throw Error("region '" + r.name + "' listed twice");
        }
        weights.push_back(r.population);
        names.push_back(r.name);
    }
    const auto counts = apportion(weights, names, n);
    const auto income_seed = derive_seed(seed, "income");
    std::vector<AgentProfile> out;
    out.reserve(n);
    for (std::size_t r = 0; r < regions.size(); ++r) {
        IncomeMixtureParams params;
        params.mu_actual = regions[r].mean_income;
        params.sigma_actual = regions[r].income_sd.value_or(options.income_cv * regions[r].mean_income);
        params.lognormal_share = options.lognormal_share;
        params.pareto_alpha = options.pareto_alpha;
        params.validate();
        for (std::size_t k = 0; k < counts[r]; ++k) {
            const std::size_t i = out.size();
            AgentProfile p;
            p.agent_id = agent_id_for(i);
            p.attributes[options.attribute] = regions[r].name;
            p.group_key = regions[r].name;
            Rng rng(income_seed, i);
            p.income = income_draw(params, rng);
            out.push_back(std::move(p));
        }
    }
    return out;
}

// --- matching ---------------------------------------------------------------

MatchReport match_profiles_to_users(std::span<const AgentProfile> profiles, const UserPool& pool,
                                    std::span<const std::string> attributes, std::uint64_t seed) {
    for (const auto& a : attributes) pool.schema().at(a);
    std::map<std::string, std::vector<std::size_t>> strata;
    const auto users = pool.users();
    for (std::size_t i = 0; i < users.size(); ++i) {
        bool complete = false;
        auto key = stratum_key(users[i].labels, attributes, complete);
        if (complete) strata[key].push_back(i);
    }

    MatchReport report;
    report.profiles.assign(profiles.begin(), profiles.end());
    std::map<std::string, std::vector<std::size_t>> wanted;
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        bool complete = false;
        auto key = stratum_key(profiles[i].attributes, attributes, complete);
        report.profiles[i].matched_user.reset();
        if (complete) wanted[key].push_back(i);
        else ++report.unmatched;
    }

    const auto match_seed = derive_seed(seed, "match");
    for (const auto& [key, agents] : wanted) {
        auto it = strata.find(key);
        if (it == strata.end()) {
            report.unmatched += agents.size();
            continue;
        }
        auto avail = it->second;
        const std::size_t m = avail.size();
        Rng rng(match_seed, fnv1a64(key));
        for (std::size_t j = m; j > 1; --j) std::swap(avail[j - 1], avail[rng.below(j)]);
        for (std::size_t k = 0; k < agents.size(); ++k) {
            auto& profile = report.profiles[agents[k]];
            if (k < m) {
                profile.matched_user = users[avail[k]].key();
            } else {
                profile.matched_user = users[avail[rng.below(m)]].key();
                report.reused.push_back(profile.agent_id);
            }
            ++report.matched;
        }
    }
    return report;
}

}  // namespace socioverse
