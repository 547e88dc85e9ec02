#pragma once

// Experiment harness: configuration, presets, and the solve / approx-compare /
// robustness / validate commands. Commands write CSV and JSON only.
//
// CSV contract: header row always present, one record per line, floats with
// 17 significant digits, "nan" for undefined values.

#include "riskctl/riskctl.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace riskctl {

inline constexpr int kSchemaVersion = 1;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitEarlyStop = 2;
inline constexpr int kExitConfig = 64;

inline constexpr std::uint64_t kSolveTag = 0x534f4c56ULL;    // "SOLV"
inline constexpr std::uint64_t kIterateTag = 0x49544552ULL;  // "ITER"
inline constexpr std::uint64_t kCompareTag = 0x434d5052ULL;  // "CMPR"
inline constexpr std::uint64_t kRobustTag = 0x524f4255ULL;   // "ROBU"

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SystemSpec {
    std::string kind = "pendulum";  ///< pendulum | two_link_arm | double_integrator
    int horizon = 100;
    double duration = 5.0;  ///< T; the step is T / horizon
    std::vector<double> initial_state;  ///< empty: kind default
    std::vector<double> target;         ///< arm joint angles or double-integrator position
    PendulumParams pendulum;
    ArmParams arm;

    [[nodiscard]] double dt() const { return duration / horizon; }
};

struct CostSpec {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
    bool scale_effort_by_dt = true;
};

struct RiskSpec {
    double theta = 4.0;
    std::vector<double> thetas;  ///< robustness sweep
    double sigma = 1.0;          ///< multiplies sigma0
    std::string sigma0 = "unit";  ///< unit | inertia
    std::vector<double> sigma0_angles;  ///< inertia evaluation point; empty: initial angles
    std::string test_amplitude = "normalized";  ///< normalized: sigma_test / sigma0, absolute: sigma_test
};

struct SolverSpec {
    std::vector<std::string> algorithms{"regileqg", "ileqg"};
    std::string policy = "burn_in";  ///< constant | backtracking | burn_in
    double gamma_regularized = 16.0;
    double gamma_unregularized = 0.5;
    std::optional<double> reference_gamma_regularized;
    std::optional<double> reference_gamma_unregularized;
    BurnInParams burn_in;
    int iterations = 100;
    double tolerance = 1e-6;
    BacktrackingParams backtracking;
    int line_search_samples = 100;
    double line_search_slack = 0.0;
    bool retry_reduced_risk = false;
};

struct MonteCarloSpec {
    bool per_iterate = true;
    int samples = 100;
    int runs = 10;
    int test_simulations = 100;
    std::vector<double> sigma_test;
    int kick_stage = -1;  ///< -1: uniform over stages
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string name = "custom";
    SystemSpec system;
    CostSpec costs;
    RiskSpec risk;
    SolverSpec solver;
    MonteCarloSpec monte_carlo;
    std::uint64_t seed = 0;
    int threads = 1;
    bool timing = false;  ///< wall_ms column is 0 unless set
};

namespace detail {

class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + "expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        const auto it = j_.find(key);
        seen_.insert(key);
        if (it == j_.end()) return;
        out = convert<T>(*it, key);
    }

    template <class T>
    void get(const char* key, std::optional<T>& out) {
        const auto it = j_.find(key);
        seen_.insert(key);
        if (it == j_.end()) return;
        if (it->is_null()) {
            out.reset();
            return;
        }
        out = convert<T>(*it, key);
    }

    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    [[nodiscard]] std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(where() + "unknown key '" + it.key() + "'");
    }

private:
    [[nodiscard]] std::string where() const { return path_.empty() ? "config: " : "config." + path_ + ": "; }

    template <class T>
    T convert(const nlohmann::json& v, const char* key) const {
        const std::string field = path_.empty() ? key : path_ + "." + key;
        bool ok;
        if constexpr (std::is_same_v<T, bool>) {
            ok = v.is_boolean();
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
        } else if constexpr (std::is_integral_v<T>) {
            ok = v.is_number_integer();
        } else if constexpr (std::is_floating_point_v<T>) {
            ok = v.is_number();
        } else if constexpr (std::is_same_v<T, std::string>) {
            ok = v.is_string();
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& e) { return e.is_number(); });
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const auto& e) { return e.is_string(); });
        } else {
            static_assert(sizeof(T) == 0, "unsupported config type");
        }
        if (!ok) throw ConfigError("config." + field + ": wrong type");
        return v.get<T>();
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_pendulum(const nlohmann::json& j, PendulumParams& p, const std::string& path) {
    ObjectReader r(j, path);
    r.get("mass", p.mass);
    r.get("length", p.length);
    r.get("friction", p.friction);
    r.get("gravity", p.gravity);
    r.finish();
}

inline void read_arm(const nlohmann::json& j, ArmParams& a, const std::string& path) {
    ObjectReader r(j, path);
    r.get("length1", a.length1);
    r.get("length2", a.length2);
    r.get("inertia1", a.inertia1);
    r.get("inertia2", a.inertia2);
    r.get("mass2", a.mass2);
    r.get("com2", a.com2);
    r.get("b11", a.b11);
    r.get("b12", a.b12);
    r.get("b21", a.b21);
    r.get("b22", a.b22);
    r.finish();
}

}  // namespace detail

ExperimentConfig preset(const std::string& name);

inline void validate_config(const ExperimentConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (c.schema_version != kSchemaVersion) fail("unsupported schema_version " + std::to_string(c.schema_version));
    const auto& s = c.system;
    int state_dim = 0, target_dim = 0;
    if (s.kind == "pendulum") {
        state_dim = 2;
    } else if (s.kind == "two_link_arm") {
        state_dim = 4;
        target_dim = 2;
    } else if (s.kind == "double_integrator") {
        state_dim = 2;
        target_dim = 1;
    } else {
        fail("system.kind must be pendulum, two_link_arm or double_integrator");
    }
    if (s.horizon < 1) fail("system.horizon must be >= 1");
    if (!(s.duration > 0.0)) fail("system.duration must be positive");
    if (!s.initial_state.empty() && static_cast<int>(s.initial_state.size()) != state_dim)
        fail("system.initial_state must have " + std::to_string(state_dim) + " entries");
    if (!s.target.empty() && static_cast<int>(s.target.size()) != target_dim)
        fail("system.target must have " + std::to_string(target_dim) + " entries");
    if (!(c.costs.lambda1 >= 0.0) || !(c.costs.lambda2 >= 0.0)) fail("costs.lambda1 and lambda2 must be >= 0");
    const auto& r = c.risk;
    if (!(r.theta >= 0.0)) fail("risk.theta must be >= 0");
    for (double t : r.thetas)
        if (!(t >= 0.0)) fail("risk.thetas must be >= 0");
    if (!(r.sigma > 0.0)) fail("risk.sigma must be positive");
    if (r.sigma0 != "unit" && r.sigma0 != "inertia") fail("risk.sigma0 must be unit or inertia");
    if (r.sigma0 == "inertia" && s.kind != "two_link_arm") fail("risk.sigma0 = inertia needs the two-link arm");
    if (!r.sigma0_angles.empty() && r.sigma0_angles.size() != 2) fail("risk.sigma0_angles must have 2 entries");
    if (r.test_amplitude != "normalized" && r.test_amplitude != "absolute")
        fail("risk.test_amplitude must be normalized or absolute");
    const auto& v = c.solver;
    if (v.algorithms.empty()) fail("solver.algorithms must not be empty");
    for (const auto& a : v.algorithms)
        if (a != "regileqg" && a != "ileqg") fail("solver.algorithms entries must be regileqg or ileqg");
    if (v.policy != "constant" && v.policy != "backtracking" && v.policy != "burn_in")
        fail("solver.policy must be constant, backtracking or burn_in");
    if (!(v.gamma_regularized > 0.0) || !(v.gamma_unregularized > 0.0)) fail("solver.gamma values must be positive");
    if (v.burn_in.exponent_min > v.burn_in.exponent_max) fail("solver.burn_in grid is empty");
    if (v.burn_in.iterations < 0) fail("solver.burn_in.iterations must be >= 0");
    if (v.iterations < 0) fail("solver.iterations must be >= 0");
    if (!(v.tolerance >= 0.0)) fail("solver.tolerance must be >= 0");
    try {
        v.backtracking.validate();
    } catch (const std::invalid_argument& e) {
        fail(std::string("solver.backtracking: ") + e.what());
    }
    if (v.line_search_samples < 1) fail("solver.line_search.samples must be >= 1");
    if (!(v.line_search_slack >= 0.0)) fail("solver.line_search.slack must be >= 0");
    const auto& m = c.monte_carlo;
    if (m.samples < 1 || m.runs < 1 || m.test_simulations < 1) fail("monte_carlo counts must be >= 1");
    for (double t : m.sigma_test)
        if (!(t >= 0.0)) fail("monte_carlo.sigma_test must be >= 0");
    if (m.kick_stage < -1 || m.kick_stage >= s.horizon) fail("monte_carlo.kick_stage out of range");
    if (c.threads < 1) fail("threads must be >= 1");
}

/// Parses a config tree. A "preset" key selects the base that the remaining
/// keys override; otherwise defaults are those of pendulum-conv.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
    detail::ObjectReader top(j, "");
    ExperimentConfig c;
    std::string base;
    top.get("preset", base);
    if (!base.empty()) c = preset(base);
    if (!j.contains("schema_version")) throw ConfigError("config: schema_version is required");
    top.get("schema_version", c.schema_version);
    if (c.schema_version != kSchemaVersion)
        throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));
    top.get("name", c.name);
    top.get("seed", c.seed);
    top.get("threads", c.threads);
    top.get("timing", c.timing);

    if (const auto* s = top.child("system")) {
        detail::ObjectReader r(*s, "system");
        r.get("kind", c.system.kind);
        r.get("horizon", c.system.horizon);
        r.get("duration", c.system.duration);
        r.get("initial_state", c.system.initial_state);
        r.get("target", c.system.target);
        if (const auto* p = r.child("pendulum")) detail::read_pendulum(*p, c.system.pendulum, r.sub("pendulum"));
        if (const auto* a = r.child("arm")) detail::read_arm(*a, c.system.arm, r.sub("arm"));
        r.finish();
    }
    if (const auto* s = top.child("costs")) {
        detail::ObjectReader r(*s, "costs");
        r.get("lambda1", c.costs.lambda1);
        r.get("lambda2", c.costs.lambda2);
        r.get("scale_effort_by_dt", c.costs.scale_effort_by_dt);
        r.finish();
    }
    if (const auto* s = top.child("risk")) {
        detail::ObjectReader r(*s, "risk");
        r.get("theta", c.risk.theta);
        r.get("thetas", c.risk.thetas);
        r.get("sigma", c.risk.sigma);
        r.get("sigma0", c.risk.sigma0);
        r.get("sigma0_angles", c.risk.sigma0_angles);
        r.get("test_amplitude", c.risk.test_amplitude);
        r.finish();
    }
    if (const auto* s = top.child("solver")) {
        detail::ObjectReader r(*s, "solver");
        r.get("algorithms", c.solver.algorithms);
        r.get("policy", c.solver.policy);
        if (const auto* g = r.child("gamma")) {
            detail::ObjectReader gr(*g, "solver.gamma");
            gr.get("regileqg", c.solver.gamma_regularized);
            gr.get("ileqg", c.solver.gamma_unregularized);
            gr.finish();
        }
        if (const auto* g = r.child("reference_gamma")) {
            detail::ObjectReader gr(*g, "solver.reference_gamma");
            gr.get("regileqg", c.solver.reference_gamma_regularized);
            gr.get("ileqg", c.solver.reference_gamma_unregularized);
            gr.finish();
        }
        if (const auto* b = r.child("burn_in")) {
            detail::ObjectReader br(*b, "solver.burn_in");
            br.get("exponent_min", c.solver.burn_in.exponent_min);
            br.get("exponent_max", c.solver.burn_in.exponent_max);
            br.get("iterations", c.solver.burn_in.iterations);
            br.finish();
        }
        r.get("iterations", c.solver.iterations);
        r.get("tolerance", c.solver.tolerance);
        if (const auto* b = r.child("backtracking")) {
            detail::ObjectReader br(*b, "solver.backtracking");
            auto& bt = c.solver.backtracking;
            br.get("gamma0", bt.gamma0);
            br.get("shrink", bt.shrink);
            br.get("grow", bt.grow);
            br.get("gamma_min", bt.gamma_min);
            br.get("gamma_max", bt.gamma_max);
            br.get("max_trials", bt.max_trials);
            br.finish();
        }
        if (const auto* l = r.child("line_search")) {
            detail::ObjectReader lr(*l, "solver.line_search");
            lr.get("samples", c.solver.line_search_samples);
            lr.get("slack", c.solver.line_search_slack);
            lr.finish();
        }
        r.get("retry_reduced_risk", c.solver.retry_reduced_risk);
        r.finish();
    }
    if (const auto* s = top.child("monte_carlo")) {
        detail::ObjectReader r(*s, "monte_carlo");
        r.get("per_iterate", c.monte_carlo.per_iterate);
        r.get("samples", c.monte_carlo.samples);
        r.get("runs", c.monte_carlo.runs);
        r.get("test_simulations", c.monte_carlo.test_simulations);
        r.get("sigma_test", c.monte_carlo.sigma_test);
        r.get("kick_stage", c.monte_carlo.kick_stage);
        r.finish();
    }
    top.finish();
    validate_config(c);
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& s = c.system;
    json j;
    j["schema_version"] = c.schema_version;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["timing"] = c.timing;
    j["system"] = {{"kind", s.kind},
                   {"horizon", s.horizon},
                   {"duration", s.duration},
                   {"initial_state", s.initial_state},
                   {"target", s.target},
                   {"pendulum",
                    {{"mass", s.pendulum.mass},
                     {"length", s.pendulum.length},
                     {"friction", s.pendulum.friction},
                     {"gravity", s.pendulum.gravity}}},
                   {"arm",
                    {{"length1", s.arm.length1},
                     {"length2", s.arm.length2},
                     {"inertia1", s.arm.inertia1},
                     {"inertia2", s.arm.inertia2},
                     {"mass2", s.arm.mass2},
                     {"com2", s.arm.com2},
                     {"b11", s.arm.b11},
                     {"b12", s.arm.b12},
                     {"b21", s.arm.b21},
                     {"b22", s.arm.b22}}}};
    j["costs"] = {{"lambda1", c.costs.lambda1},
                  {"lambda2", c.costs.lambda2},
                  {"scale_effort_by_dt", c.costs.scale_effort_by_dt}};
    j["risk"] = {{"theta", c.risk.theta},
                 {"thetas", c.risk.thetas},
                 {"sigma", c.risk.sigma},
                 {"sigma0", c.risk.sigma0},
                 {"sigma0_angles", c.risk.sigma0_angles},
                 {"test_amplitude", c.risk.test_amplitude}};
    const auto& v = c.solver;
    auto opt = [](const std::optional<double>& x) { return x ? json(*x) : json(nullptr); };
    j["solver"] = {
        {"algorithms", v.algorithms},
        {"policy", v.policy},
        {"gamma", {{"regileqg", v.gamma_regularized}, {"ileqg", v.gamma_unregularized}}},
        {"reference_gamma",
         {{"regileqg", opt(v.reference_gamma_regularized)}, {"ileqg", opt(v.reference_gamma_unregularized)}}},
        {"burn_in",
         {{"exponent_min", v.burn_in.exponent_min},
          {"exponent_max", v.burn_in.exponent_max},
          {"iterations", v.burn_in.iterations}}},
        {"iterations", v.iterations},
        {"tolerance", v.tolerance},
        {"backtracking",
         {{"gamma0", v.backtracking.gamma0},
          {"shrink", v.backtracking.shrink},
          {"grow", v.backtracking.grow},
          {"gamma_min", v.backtracking.gamma_min},
          {"gamma_max", v.backtracking.gamma_max},
          {"max_trials", v.backtracking.max_trials}}},
        {"line_search", {{"samples", v.line_search_samples}, {"slack", v.line_search_slack}}},
        {"retry_reduced_risk", v.retry_reduced_risk}};
    const auto& m = c.monte_carlo;
    j["monte_carlo"] = {{"per_iterate", m.per_iterate},
                        {"samples", m.samples},
                        {"runs", m.runs},
                        {"test_simulations", m.test_simulations},
                        {"sigma_test", m.sigma_test},
                        {"kick_stage", m.kick_stage}};
    return j;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline std::vector<std::string> preset_names() {
    return {"pendulum-conv", "pendulum-robust", "arm-conv", "arm-robust", "linear-toy"};
}

inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    c.name = name;
    if (name == "pendulum-conv") {
        c.system.kind = "pendulum";
        c.system.initial_state = {0.0, 0.0};
        c.risk.theta = 4.0;
        c.solver.reference_gamma_regularized = 16.0;
        c.solver.reference_gamma_unregularized = 0.5;
    } else if (name == "pendulum-robust") {
        c.system.kind = "pendulum";
        c.system.initial_state = {0.0, 0.0};
        c.costs.lambda1 = 10.0;
        c.costs.lambda2 = 1e-3;
        // The surrogate at the zero command needs theta < 0.102 with sigma0 = 1.
        c.risk.thetas = {0.0, 0.05, 0.1};
        c.risk.theta = 0.1;
        c.solver.algorithms = {"regileqg"};
        c.solver.burn_in = {-5, 5, 10};
        c.solver.iterations = 50;
        c.monte_carlo.sigma_test = {0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0};
        // At 100 simulations the standard error at sigma_test = 32 exceeds the gap between controllers.
        c.monte_carlo.test_simulations = 2000;
    } else if (name == "arm-conv") {
        c.system.kind = "two_link_arm";
        c.system.initial_state = {0.5, 1.0, 0.0, 0.0};
        c.system.target = {1.2, 1.6};
        c.risk.sigma0 = "inertia";
        c.risk.theta = 4.0;
        c.solver.reference_gamma_regularized = 8.0;
        c.solver.reference_gamma_unregularized = 0.5;
        c.solver.gamma_regularized = 8.0;
    } else if (name == "arm-robust") {
        c.system.kind = "two_link_arm";
        c.system.initial_state = {0.5, 1.0, 0.0, 0.0};
        c.system.target = {1.2, 1.6};
        c.costs.lambda1 = 1e-2;
        c.costs.lambda2 = 1e-3;
        c.risk.sigma0 = "inertia";
        c.risk.thetas = {0.0, 1.0, 4.0};
        c.solver.algorithms = {"regileqg"};
        c.solver.burn_in = {-5, 5, 10};
        c.solver.iterations = 50;
        c.monte_carlo.sigma_test = {0.0, 0.5, 1.0, 2.0, 4.0};
    } else if (name == "linear-toy") {
        c.system.kind = "double_integrator";
        c.system.horizon = 10;
        c.system.duration = 1.0;
        c.system.initial_state = {0.0, 0.0};
        c.system.target = {1.0};
        c.costs.lambda1 = 0.1;
        c.costs.lambda2 = 0.1;
        c.risk.theta = 0.5;
        c.risk.sigma = 0.5;
        c.risk.thetas = {0.0, 0.5};
        c.solver.policy = "constant";
        c.solver.gamma_regularized = 1.0;
        c.solver.gamma_unregularized = 1.0;
        c.solver.iterations = 5;
        c.monte_carlo.sigma_test = {0.0, 1.0, 2.0};
    } else {
        std::string known;
        for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
    }
    return c;
}

// ---------------------------------------------------------------------------
// Problem construction
// ---------------------------------------------------------------------------

struct Problem {
    DynamicalSystem sys;
    StageCosts costs;
    ControlSequence u0;
    double sigma0 = 1.0;
    double sigma = 1.0;  ///< noise standard deviation in the risk objective
    TestCostOptions test;
};

inline Vec to_vec(const std::vector<double>& v) {
    Vec out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
    return out;
}

inline Problem build_problem(const ExperimentConfig& c) {
    validate_config(c);
    const auto& s = c.system;
    const double dt = s.dt();
    std::optional<DynamicalSystem> sys;
    std::optional<StageCosts> costs;
    double sigma0 = 1.0;
    if (s.kind == "pendulum") {
        const Vec x0 = s.initial_state.empty() ? Vec::Zero(2) : to_vec(s.initial_state);
        sys = pendulum_system(s.pendulum, dt, s.horizon, x0);
        costs = pendulum_costs({c.costs.lambda1, c.costs.lambda2, dt, c.costs.scale_effort_by_dt}, s.horizon);
    } else if (s.kind == "two_link_arm") {
        const Vec x0 = s.initial_state.empty() ? Vec::Zero(4) : to_vec(s.initial_state);
        sys = two_link_arm_system(s.arm, dt, s.horizon, x0);
        const Vec target = s.target.empty() ? Vec::Zero(2) : to_vec(s.target);
        costs = two_link_arm_costs({target, c.costs.lambda1, c.costs.lambda2, dt, c.costs.scale_effort_by_dt},
                                   s.horizon);
        if (c.risk.sigma0 == "inertia") {
            const Vec angles = c.risk.sigma0_angles.empty() ? Vec(x0.head(2)) : to_vec(c.risk.sigma0_angles);
            sigma0 = arm_noise_scale(s.arm, angles);
        }
    } else {
        const Vec x0 = s.initial_state.empty() ? Vec::Zero(2) : to_vec(s.initial_state);
        sys = double_integrator_system(dt, s.horizon, x0);
        Vec target = Vec::Zero(2);
        if (!s.target.empty()) target(0) = s.target[0];
        Mat W = Mat::Zero(2, 2);
        W(0, 0) = 1.0;
        W(1, 1) = c.costs.lambda1;
        const double effort = c.costs.lambda2 * (c.costs.scale_effort_by_dt ? dt : 1.0);
        costs = StageCosts::final_state(s.horizon, StageCost::weighted_target(W, target),
                                        StageCost::quadratic(Mat::Identity(1, 1) * 2.0 * effort, Vec::Zero(1)));
    }
    TestCostOptions test;
    test.sigma0 = sigma0;
    test.scale_by_sigma0 = c.risk.test_amplitude == "normalized";
    test.fixed_stage = c.monte_carlo.kick_stage;
    test.threads = c.threads;
    ControlSequence u0(s.horizon, sys->control_dim());
    return Problem{std::move(*sys), std::move(*costs), std::move(u0), sigma0, c.risk.sigma * sigma0, test};
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

inline std::string fmt17(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// Writes through a temporary file in the same directory and renames it.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << content;
        if (!out.flush()) throw std::runtime_error("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

class CsvWriter {
public:
    explicit CsvWriter(const std::vector<std::string>& header) : columns_(header.size()) { line(header); }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw std::logic_error("CsvWriter: row width does not match header");
        line(cells);
    }

    [[nodiscard]] std::string str() const { return out_.str(); }

private:
    void line(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }

    std::size_t columns_;
    std::ostringstream out_;
};

/// Number of k with f_k > f_{k-1}, undefined values counted as +inf.
inline int count_increases(const IterateTrace& t) {
    auto val = [](double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::infinity(); };
    int n = 0;
    for (std::size_t k = 1; k < t.rows.size(); ++k)
        if (val(t.rows[k].surrogate) > val(t.rows[k - 1].surrogate)) ++n;
    return n;
}

/// Smallest finite surrogate up to and including each iterate.
inline std::vector<double> best_so_far(const IterateTrace& t) {
    std::vector<double> out;
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : t.rows) {
        if (std::isfinite(r.surrogate) && !(r.surrogate >= best)) best = r.surrogate;
        out.push_back(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

struct AlgorithmRun {
    std::string name;
    Algorithm algorithm = Algorithm::Regularized;
    std::uint64_t seed = 0;
    double gamma = 0.0;
    std::optional<BurnInResult> burn_in;
    std::optional<IterateTrace> trace;
    std::string error;  ///< set when the run could not start (burn-in failure)

    [[nodiscard]] bool early_stop() const { return !trace || is_early_stop(trace->termination); }
};

inline SolverConfig solver_config(const ExperimentConfig& c, const Problem& p, double theta, std::uint64_t seed) {
    SolverConfig s;
    s.theta = theta;
    s.sigma = p.sigma;
    s.backtracking = c.solver.backtracking;
    s.burn_in = c.solver.burn_in;
    s.max_iterations = c.solver.iterations;
    s.tolerance = c.solver.tolerance;
    s.seed = seed;
    s.mc_samples = c.solver.line_search_samples;
    s.line_search_slack = c.solver.line_search_slack;
    s.retry_reduced_risk = c.solver.retry_reduced_risk;
    s.threads = c.threads;
    return s;
}

/// One algorithm under the configured step policy. Burn-in is run explicitly
/// so that the grid scores can be reported.
inline AlgorithmRun run_algorithm(const ExperimentConfig& c, const Problem& p, const std::string& name, double theta,
                                  std::uint64_t seed) {
    AlgorithmRun run;
    run.name = name;
    run.algorithm = name == "regileqg" ? Algorithm::Regularized : Algorithm::Unregularized;
    run.seed = seed;
    SolverConfig s = solver_config(c, p, theta, seed);
    s.gamma = run.algorithm == Algorithm::Regularized ? c.solver.gamma_regularized : c.solver.gamma_unregularized;
    if (c.solver.policy == "burn_in") {
        try {
            run.burn_in = burnin_tune(p.sys, p.costs, p.u0, s, run.algorithm,
                                      exponent_range(c.solver.burn_in.exponent_min, c.solver.burn_in.exponent_max));
        } catch (const std::runtime_error& e) {
            run.error = e.what();
            return run;
        }
        s.gamma = run.burn_in->gamma;
        s.policy = StepPolicy::Constant;
    } else {
        s.policy = c.solver.policy == "backtracking" ? StepPolicy::Backtracking : StepPolicy::Constant;
    }
    run.gamma = s.policy == StepPolicy::Backtracking ? s.backtracking.gamma0 : s.gamma;
    run.trace = run.algorithm == Algorithm::Regularized ? run_regileqg(p.sys, p.costs, p.u0, s)
                                                        : run_ileqg(p.sys, p.costs, p.u0, s);
    return run;
}

struct SolveResult {
    std::vector<AlgorithmRun> runs;
    int exit_code = kExitOk;
};

inline SolveResult run_solve(const ExperimentConfig& c, const Problem& p) {
    SolveResult r;
    for (std::size_t i = 0; i < c.solver.algorithms.size(); ++i) {
        const std::string& name = c.solver.algorithms[i];
        r.runs.push_back(run_algorithm(c, p, name, c.risk.theta, derive_seed(c.seed, i, kSolveTag)));
        if (r.runs.back().early_stop()) r.exit_code = kExitEarlyStop;
    }
    return r;
}

inline const std::vector<std::string>& trace_columns() {
    static const std::vector<std::string> cols{"iter",          "surrogate_value", "mc_value", "mc_stderr",
                                               "trunc_grad_norm", "mc_grad_norm",  "gamma",    "backtracks",
                                               "feasible",      "wall_ms"};
    return cols;
}

inline std::string trace_csv(const ExperimentConfig& c, const Problem& p, const AlgorithmRun& run) {
    CsvWriter csv(trace_columns());
    if (!run.trace) return csv.str();
    const McOptions mc{c.threads};
    for (const auto& row : run.trace->rows) {
        double mc_value = std::numeric_limits<double>::quiet_NaN(), mc_se = mc_value, mc_grad = mc_value;
        if (c.monte_carlo.per_iterate) {
            const std::uint64_t seed = derive_seed(run.seed, static_cast<std::uint64_t>(row.k), kIterateTag);
            try {
                const McEstimate e =
                    mc_risk_value(p.sys, p.costs, row.command, row.theta, p.sigma, c.monte_carlo.samples, seed, mc);
                mc_value = e.value;
                mc_se = e.std_error;
                mc_grad = mc_risk_gradient(p.sys, p.costs, row.command, row.theta, p.sigma, c.monte_carlo.samples,
                                           seed, mc)
                              .gradient.norm();
            } catch (const DivergedTrajectory&) {
            }
        }
        csv.row({std::to_string(row.k), fmt17(row.surrogate), fmt17(mc_value), fmt17(mc_se),
                 fmt17(row.trunc_grad_norm), fmt17(mc_grad), fmt17(row.gamma), std::to_string(row.backtracks),
                 row.feasible ? "1" : "0", fmt17(c.timing ? row.wall_ms : 0.0)});
    }
    return csv.str();
}

inline std::string best_csv(const AlgorithmRun& run) {
    CsvWriter csv({"iter", "best_surrogate_value"});
    if (!run.trace) return csv.str();
    const auto best = best_so_far(*run.trace);
    for (std::size_t k = 0; k < best.size(); ++k) csv.row({std::to_string(k), fmt17(best[k])});
    return csv.str();
}

inline std::string iterates_csv(const AlgorithmRun& run, const Problem& p) {
    std::vector<std::string> header{"iter"};
    for (Eigen::Index i = 0; i < p.u0.size(); ++i) header.push_back("u" + std::to_string(i));
    CsvWriter csv(header);
    if (!run.trace) return csv.str();
    for (const auto& row : run.trace->rows) {
        std::vector<std::string> cells{std::to_string(row.k)};
        for (Eigen::Index i = 0; i < row.command.size(); ++i) cells.push_back(fmt17(row.command.flat()(i)));
        csv.row(cells);
    }
    return csv.str();
}

inline nlohmann::json run_summary(const AlgorithmRun& run) {
    nlohmann::json j;
    j["name"] = run.name;
    j["seed"] = run.seed;
    j["gamma"] = run.gamma;
    if (run.burn_in) {
        nlohmann::json scores = nlohmann::json::array();
        for (double s : run.burn_in->scores) scores.push_back(json_number(s));
        j["burn_in"] = {{"grid", run.burn_in->grid}, {"scores", scores}, {"selected", run.burn_in->gamma}};
    }
    if (!run.trace) {
        j["termination"] = "not_started";
        j["message"] = run.error;
        return j;
    }
    const auto& t = *run.trace;
    j["termination"] = to_string(t.termination);
    j["message"] = t.message;
    j["failed_stage"] = t.failed_stage;
    j["iterations"] = static_cast<int>(t.rows.size()) - 1;
    j["initial_surrogate"] = json_number(t.rows.front().surrogate);
    j["final_surrogate"] = json_number(t.last().surrogate);
    j["best_surrogate"] = json_number(t.best().surrogate);
    j["best_iter"] = t.best().k;
    j["surrogate_increases"] = count_increases(t);
    int undefined = 0;
    for (const auto& r : t.rows) undefined += r.feasible ? 0 : 1;
    j["undefined_surrogate_iterates"] = undefined;
    return j;
}

inline nlohmann::json solve_summary(const ExperimentConfig& c, const Problem& p, const SolveResult& r) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = "solve";
    j["config"] = to_json(c);
    j["sigma0"] = p.sigma0;
    j["sigma"] = p.sigma;
    j["algorithms"] = nlohmann::json::array();
    nlohmann::json tuned, reference;
    for (const auto& run : r.runs) {
        j["algorithms"].push_back(run_summary(run));
        tuned[run.name] = run.trace ? nlohmann::json(run.gamma) : nlohmann::json(nullptr);
    }
    const auto& v = c.solver;
    reference["regileqg"] = v.reference_gamma_regularized ? json_number(*v.reference_gamma_regularized) : nlohmann::json(nullptr);
    reference["ileqg"] = v.reference_gamma_unregularized ? json_number(*v.reference_gamma_unregularized) : nlohmann::json(nullptr);
    j["comparison"] = {{"gamma_used", tuned}, {"reference_gamma", reference}};
    j["exit_code"] = r.exit_code;
    return j;
}

inline int cmd_solve(const ExperimentConfig& c, const std::filesystem::path& out) {
    const Problem p = build_problem(c);
    const SolveResult r = run_solve(c, p);
    for (const auto& run : r.runs) {
        write_file_atomic(out / (run.name + "_trace.csv"), trace_csv(c, p, run));
        write_file_atomic(out / (run.name + "_best.csv"), best_csv(run));
        write_file_atomic(out / (run.name + "_iterates.csv"), iterates_csv(run, p));
    }
    write_file_atomic(out / "summary.json", solve_summary(c, p, r).dump(2) + "\n");
    return r.exit_code;
}

// ---------------------------------------------------------------------------
// approx-compare
// ---------------------------------------------------------------------------

/// Reads the iterates written by solve (iter, u0, u1, ...).
inline std::vector<ControlSequence> load_iterates(const std::filesystem::path& path, const Problem& p) {
    std::ifstream in(path);
    if (!in) throw ConfigError("iterates: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("iterates: missing header in " + path.string());
    std::vector<ControlSequence> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> vals;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first) {
                first = false;
                continue;
            }
            try {
                vals.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ConfigError("iterates: bad number on line " + std::to_string(lineno));
            }
        }
        if (static_cast<Eigen::Index>(vals.size()) != p.u0.size())
            throw ConfigError("iterates: line " + std::to_string(lineno) + " has " + std::to_string(vals.size()) +
                              " values, expected " + std::to_string(p.u0.size()));
        out.emplace_back(to_vec(vals), p.u0.dim());
    }
    return out;
}

struct CompareRow {
    int iter = 0;
    double surrogate = std::numeric_limits<double>::quiet_NaN();
    double surrogate_grad_norm = std::numeric_limits<double>::quiet_NaN();
    double mc_mean = 0.0, mc_spread = 0.0, mc_stderr = 0.0;
    double mc_grad_mean = 0.0, mc_grad_spread = 0.0;
    int samples = 0, runs = 0;
};

inline std::vector<CompareRow> approx_compare(const ExperimentConfig& c, const Problem& p,
                                              const std::vector<ControlSequence>& iterates) {
    const int N = c.monte_carlo.samples, R = c.monte_carlo.runs;
    const double theta = c.risk.theta;
    const McOptions mc{c.threads};
    std::vector<CompareRow> rows;
    for (std::size_t k = 0; k < iterates.size(); ++k) {
        const ControlSequence& u = iterates[k];
        CompareRow row;
        row.iter = static_cast<int>(k);
        row.samples = N;
        row.runs = R;
        try {
            const SurrogateEval e = surrogate_value(p.sys, p.costs, u, theta, p.sigma, true);
            row.surrogate = e.value;
            row.surrogate_grad_norm = e.gradient->norm();
        } catch (const ConditionViolated&) {
        }
        const std::uint64_t base = derive_seed(c.seed, k, kCompareTag);
        std::vector<double> values, grads;
        for (int r = 0; r < R; ++r) {
            const std::uint64_t seed = derive_seed(base, static_cast<std::uint64_t>(r), kRunTag);
            try {
                values.push_back(mc_risk_value(p.sys, p.costs, u, theta, p.sigma, N, seed, mc).value);
                grads.push_back(mc_risk_gradient(p.sys, p.costs, u, theta, p.sigma, N, seed, mc).gradient.norm());
            } catch (const DivergedTrajectory&) {
            }
        }
        auto stats = [](const std::vector<double>& v, double& mean, double& spread) {
            mean = spread = std::numeric_limits<double>::quiet_NaN();
            if (v.empty()) return;
            mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            spread = 0.0;
            for (double x : v) spread += (x - mean) * (x - mean);
            spread = v.size() > 1 ? std::sqrt(spread / static_cast<double>(v.size() - 1)) : 0.0;
        };
        stats(values, row.mc_mean, row.mc_spread);
        stats(grads, row.mc_grad_mean, row.mc_grad_spread);
        row.runs = static_cast<int>(values.size());
        row.mc_stderr = row.runs > 0 ? row.mc_spread / std::sqrt(static_cast<double>(row.runs)) : row.mc_spread;
        rows.push_back(row);
    }
    return rows;
}

inline std::string compare_csv(const std::vector<CompareRow>& rows) {
    CsvWriter csv({"iter", "surrogate_value", "surrogate_grad_norm", "mc_value_mean", "mc_value_spread",
                   "mc_value_stderr", "mc_grad_norm_mean", "mc_grad_norm_spread", "samples", "runs"});
    for (const auto& r : rows)
        csv.row({std::to_string(r.iter), fmt17(r.surrogate), fmt17(r.surrogate_grad_norm), fmt17(r.mc_mean),
                 fmt17(r.mc_spread), fmt17(r.mc_stderr), fmt17(r.mc_grad_mean), fmt17(r.mc_grad_spread),
                 std::to_string(r.samples), std::to_string(r.runs)});
    return csv.str();
}

/// Compares along `iterates_file` when given, otherwise along a fresh run of
/// the first configured algorithm.
inline int cmd_approx_compare(const ExperimentConfig& c, const std::filesystem::path& out,
                              const std::optional<std::filesystem::path>& iterates_file = std::nullopt) {
    const Problem p = build_problem(c);
    std::vector<ControlSequence> iterates;
    int code = kExitOk;
    nlohmann::json summary;
    summary["schema_version"] = kSchemaVersion;
    summary["command"] = "approx-compare";
    summary["config"] = to_json(c);
    if (iterates_file) {
        iterates = load_iterates(*iterates_file, p);
        summary["iterates"] = iterates_file->string();
    } else {
        const AlgorithmRun run = run_algorithm(c, p, c.solver.algorithms.front(), c.risk.theta,
                                               derive_seed(c.seed, 0, kSolveTag));
        if (run.trace)
            for (const auto& r : run.trace->rows) iterates.push_back(r.command);
        if (run.early_stop()) code = kExitEarlyStop;
        summary["run"] = run_summary(run);
    }
    const auto rows = approx_compare(c, p, iterates);
    double worst = 0.0;
    for (const auto& r : rows)
        if (std::isfinite(r.surrogate) && std::isfinite(r.mc_mean))
            worst = std::max(worst, std::abs(r.surrogate - r.mc_mean));
    summary["rows"] = rows.size();
    summary["max_abs_difference"] = worst;
    summary["exit_code"] = code;
    write_file_atomic(out / "approx_compare.csv", compare_csv(rows));
    write_file_atomic(out / "approx_compare_summary.json", summary.dump(2) + "\n");
    return code;
}

// ---------------------------------------------------------------------------
// robustness
// ---------------------------------------------------------------------------

struct RobustnessEntry {
    double theta = 0.0;
    AlgorithmRun run;
    ControlSequence best;
    int best_iter = 0;
    double best_surrogate = std::numeric_limits<double>::quiet_NaN();
    std::vector<TestCostResult> tests;  ///< one per sigma_test
};

struct RobustnessResult {
    std::vector<RobustnessEntry> entries;
    int exit_code = kExitOk;
};

/// For each theta: tune, optimize with RegILEQG, keep the best iterate by the
/// surrogate, then sweep the kick amplitude. Every controller sees the same
/// test draws.
inline RobustnessResult run_robustness(const ExperimentConfig& c, const Problem& p) {
    if (c.risk.thetas.empty()) throw ConfigError("config: robustness needs risk.thetas");
    if (c.monte_carlo.sigma_test.empty()) throw ConfigError("config: robustness needs monte_carlo.sigma_test");
    RobustnessResult r;
    const std::uint64_t test_seed = derive_seed(c.seed, 0, kRobustTag);
    for (std::size_t i = 0; i < c.risk.thetas.size(); ++i) {
        RobustnessEntry e;
        e.theta = c.risk.thetas[i];
        e.run = run_algorithm(c, p, "regileqg", e.theta, derive_seed(c.seed, i, kSolveTag));
        if (!e.run.trace) {
            r.exit_code = kExitEarlyStop;
            r.entries.push_back(std::move(e));
            continue;
        }
        if (is_early_stop(e.run.trace->termination)) r.exit_code = kExitEarlyStop;
        const auto& best = e.run.trace->best();
        e.best = best.command;
        e.best_iter = best.k;
        e.best_surrogate = best.surrogate;
        for (double st : c.monte_carlo.sigma_test)
            e.tests.push_back(test_cost(p.sys, p.costs, e.best, st, c.monte_carlo.test_simulations, test_seed, p.test));
        r.entries.push_back(std::move(e));
    }
    return r;
}

inline std::string robustness_csv(const ExperimentConfig& c, const RobustnessResult& r) {
    CsvWriter csv({"theta", "sigma_test", "mean_test_cost", "std_error", "simulations", "diverged", "gamma",
                   "best_iter", "best_surrogate"});
    for (const auto& e : r.entries)
        for (std::size_t j = 0; j < e.tests.size(); ++j) {
            const auto& t = e.tests[j];
            csv.row({fmt17(e.theta), fmt17(c.monte_carlo.sigma_test[j]), fmt17(t.mean), fmt17(t.std_error),
                     std::to_string(t.simulations), std::to_string(t.diverged), fmt17(e.run.gamma),
                     std::to_string(e.best_iter), fmt17(e.best_surrogate)});
        }
    return csv.str();
}

/// Test-cost gap to the theta = 0 controller at the largest sigma_test.
struct RobustnessComparison {
    double theta = 0.0;
    double sigma_test = 0.0;
    double mean = 0.0, baseline_mean = 0.0;
    double pooled_se = 0.0;
    [[nodiscard]] bool better_by_one_se() const { return mean <= baseline_mean - pooled_se; }
};

inline std::vector<RobustnessComparison> compare_at_largest(const ExperimentConfig& c, const RobustnessResult& r) {
    std::vector<RobustnessComparison> out;
    const auto& st = c.monte_carlo.sigma_test;
    const auto j = static_cast<std::size_t>(std::max_element(st.begin(), st.end()) - st.begin());
    const RobustnessEntry* base = nullptr;
    for (const auto& e : r.entries)
        if (e.theta == 0.0 && !e.tests.empty()) base = &e;
    if (!base) return out;
    for (const auto& e : r.entries) {
        if (e.theta == 0.0 || e.tests.empty()) continue;
        RobustnessComparison cmp;
        cmp.theta = e.theta;
        cmp.sigma_test = st[j];
        cmp.mean = e.tests[j].mean;
        cmp.baseline_mean = base->tests[j].mean;
        cmp.pooled_se = std::hypot(e.tests[j].std_error, base->tests[j].std_error);
        out.push_back(cmp);
    }
    return out;
}

inline int cmd_robustness(const ExperimentConfig& c, const std::filesystem::path& out) {
    const Problem p = build_problem(c);
    const RobustnessResult r = run_robustness(c, p);
    nlohmann::json summary;
    summary["schema_version"] = kSchemaVersion;
    summary["command"] = "robustness";
    summary["config"] = to_json(c);
    summary["sigma0"] = p.sigma0;
    summary["controllers"] = nlohmann::json::array();
    for (const auto& e : r.entries) {
        nlohmann::json j = run_summary(e.run);
        j["theta"] = e.theta;
        j["best_iter"] = e.best_iter;
        j["best_surrogate"] = json_number(e.best_surrogate);
        summary["controllers"].push_back(j);
    }
    summary["largest_sigma_test"] = nlohmann::json::array();
    for (const auto& cmp : compare_at_largest(c, r))
        summary["largest_sigma_test"].push_back({{"theta", cmp.theta},
                                                 {"sigma_test", cmp.sigma_test},
                                                 {"mean", cmp.mean},
                                                 {"baseline_mean", cmp.baseline_mean},
                                                 {"pooled_se", cmp.pooled_se},
                                                 {"better_by_one_se", cmp.better_by_one_se()}});
    summary["exit_code"] = r.exit_code;
    write_file_atomic(out / "robustness.csv", robustness_csv(c, r));
    write_file_atomic(out / "robustness_summary.json", summary.dump(2) + "\n");
    return r.exit_code;
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct ValidateOptions {
    std::uint64_t seed = 2024;
    /// Test hook forwarded to the dynamic-programming recursion; 1 is correct.
    double recursion_scale = 1.0;
};

struct CheckResult {
    std::string name;
    double tolerance = 0.0;
    double observed = 0.0;  ///< worst case over the suite
    int cases = 0;
    [[nodiscard]] bool passed() const { return observed <= tolerance; }
};

struct ValidateReport {
    std::vector<CheckResult> checks;
    [[nodiscard]] bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); });
    }
};

namespace detail {

inline double rel(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(1.0, b.norm()); }
inline double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

/// 1 / lambda_max(X H X^T) for final-state or general costs.
inline double open_loop_limit(const LinearizedModel& m) {
    const Mat X = trajectory_jacobian(m, Input::Noise);
    const Mat S = X * stacked_state_cost(m).first * X.transpose();
    const double top = max_eigenvalue(0.5 * (S + S.transpose()));
    return top > 0.0 ? 1.0 / top : std::numeric_limits<double>::infinity();
}

inline reference::InstanceShape random_small_shape(CounterRng& rng, int max_tau, int max_dim, bool final_only) {
    reference::InstanceShape sh;
    sh.horizon = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_tau)));
    sh.state_dim = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_dim)));
    sh.control_dim = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_dim)));
    sh.noise_dim = sh.control_dim;
    sh.additive = true;
    sh.final_only = final_only;
    return sh;
}

}  // namespace detail

inline ValidateReport run_validate(const ValidateOptions& opt = {}) {
    ValidateReport rep;
    CounterRng rng(opt.seed);
    auto params = [&](double s, double prox) {
        LeqgParams p{s, 1.0, prox};
        p.debug_recursion_scale = opt.recursion_scale;
        return p;
    };

    CheckResult dense{"dp_vs_dense_step", 1e-8};
    CheckResult dual{"dp_vs_dual_cg_step", 1e-6};
    for (int trial = 0; trial < 50; ++trial) {
        const auto m = reference::random_lq_model(rng, detail::random_small_shape(rng, 8, 3, true));
        const double s = (0.1 + 0.8 * rng.uniform()) * detail::open_loop_limit(m);
        const double gamma = std::ldexp(1.0, static_cast<int>(rng.uniform_index(10)) - 3);
        const LeqgSolution dp = solve_leqg(m, params(s, 1.0 / gamma));
        const Vec closed = reg_step_closed_form(m, s, 1.0, gamma);
        const DualStepResult d = dual_solve_final_state(m, s, 1.0, gamma);
        const double inf = std::numeric_limits<double>::infinity();
        dense.observed = std::max(dense.observed, dp.feasible ? detail::rel(dp.v, closed) : inf);
        dual.observed = std::max(dual.observed, dp.feasible && d.ok() ? detail::rel(d.step, dp.v) : inf);
        ++dense.cases;
        ++dual.cases;
    }
    rep.checks.push_back(dense);
    rep.checks.push_back(dual);

    CheckResult lqr{"risk_neutral_vs_lqr", 1e-8};
    for (int trial = 0; trial < 50; ++trial) {
        reference::InstanceShape sh = detail::random_small_shape(rng, 10, 4, false);
        sh.additive = false;
        sh.noise_dim = 1 + static_cast<int>(rng.uniform_index(4));
        const auto m = reference::random_lq_model(rng, sh);
        const LeqgSolution dp = solve_leqg(m, params(0.0, 0.0));
        const auto ref = reference::lqr(m, 0.0);
        lqr.observed = std::max({lqr.observed, detail::rel(dp.v, ref.v), detail::rel(dp.value, ref.value)});
        ++lqr.cases;
    }
    rep.checks.push_back(lqr);

    CheckResult saddle{"dp_vs_dense_saddle_value", 1e-8};
    for (int trial = 0; trial < 50; ++trial) {
        reference::InstanceShape sh = detail::random_small_shape(rng, 5, 3, false);
        sh.additive = false;
        sh.noise_dim = 1 + static_cast<int>(rng.uniform_index(3));
        const auto m = reference::random_lq_model(rng, sh);
        const double s = 0.5 * detail::open_loop_limit(m);
        const LeqgSolution dp = solve_leqg(m, params(s, 0.0));
        const auto ref = reference::dense_saddle(m, s, 0.0);
        saddle.observed = std::max(saddle.observed, dp.feasible && ref.concave
                                                        ? detail::rel(dp.value, ref.value)
                                                        : std::numeric_limits<double>::infinity());
        ++saddle.cases;
    }
    rep.checks.push_back(saddle);

    CheckResult quad{"surrogate_vs_quadrature", 1e-8};
    for (int trial = 0; trial < 20; ++trial) {
        reference::InstanceShape sh;
        sh.horizon = 1;
        sh.state_dim = 1 + static_cast<int>(rng.uniform_index(2));
        sh.control_dim = sh.noise_dim = 1 + static_cast<int>(rng.uniform_index(2));
        sh.additive = true;
        const auto m = reference::random_lq_model(rng, sh);
        const double theta = (0.2 + 0.6 * rng.uniform()) * detail::open_loop_limit(m);
        quad.observed = std::max(quad.observed, detail::rel(surrogate_value(m, theta, 1.0).value,
                                                            reference::surrogate_by_quadrature(m, theta, 1.0)));
        ++quad.cases;
    }
    rep.checks.push_back(quad);

    // Observed is the worst |surrogate - MC| in units of the MC standard error;
    // 3.5 over five cases keeps the false-alarm rate near 0.25%.
    CheckResult mc{"surrogate_vs_monte_carlo_se", 3.5};
    for (int trial = 0; trial < 5; ++trial) {
        const int tau = 2 + static_cast<int>(rng.uniform_index(4));
        const Mat A = Mat::Identity(2, 2) + 0.2 * reference::random_matrix(rng, 2, 2);
        const Mat B = reference::random_matrix(rng, 2, 1);
        const DynamicalSystem sys = additive_noise_system(
            2, 1, tau, Vec::Zero(2), [A, B](const Vec& x, const Vec& u, int) { return Vec(A * x + B * u); },
            [A, B](const Vec&, const Vec&, int) { return std::pair<Mat, Mat>{A, B}; }, "linear");
        const StageCosts costs = StageCosts::final_state(
            tau, StageCost::weighted_target(Mat::Identity(2, 2), reference::random_vector(rng, 2)),
            StageCost::quadratic(Mat::Identity(1, 1) * 0.1, Vec::Zero(1)));
        const ControlSequence u(reference::random_vector(rng, tau, 0.5), 1);
        const double sigma = 0.3;
        // Well inside the limit, where the standard error is calibrated.
        const double theta = 0.05 * detail::open_loop_limit(linearize(sys, costs, u)) / (sigma * sigma);
        const double exact = surrogate_value(sys, costs, u, theta, sigma).value;
        const McEstimate est = mc_risk_value(sys, costs, u, theta, sigma, 100000, rng.next_u64());
        mc.observed = std::max(mc.observed, std::abs(est.value - exact) / std::max(est.std_error, 1e-300));
        ++mc.cases;
    }
    rep.checks.push_back(mc);
    return rep;
}

inline std::string format_report(const ValidateReport& rep) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s %6s %12s %12s  %s\n", "check", "cases", "tolerance", "observed", "result");
    os << buf;
    for (const auto& c : rep.checks) {
        std::snprintf(buf, sizeof buf, "%-28s %6d %12.3e %12.3e  %s\n", c.name.c_str(), c.cases, c.tolerance,
                      c.observed, c.passed() ? "PASS" : "FAIL");
        os << buf;
    }
    os << (rep.passed() ? "all checks passed\n" : "validation FAILED\n");
    return os.str();
}

}  // namespace riskctl
