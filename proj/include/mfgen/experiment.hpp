#pragma once

#include "mfgen/cnf.hpp"
#include "mfgen/dynamics.hpp"
#include "mfgen/error.hpp"
#include "mfgen/metrics.hpp"
#include "mfgen/mfg_verify.hpp"
#include "mfgen/targets.hpp"
#include "mfgen/trainer.hpp"
#include "mfgen/wgf.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mfgen {

#ifdef MFGEN_VERSION
inline constexpr const char* version_string = MFGEN_VERSION;
#else
inline constexpr const char* version_string = "0.1.0";
#endif

// ---------------------------------------------------------------------------------------------
// Configuration

/// Flat `key = value` configuration with a closed key set.
class ExperimentConfig {
public:
    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys{
            "target.kind", "sde.a", "sde.sigma", "sde.T", "train.batches", "train.batch_size", "train.lr",
            "train.seed", "train.eval_every", "loss.alpha0", "loss.alpha1", "loss.alpha2", "loss.p", "net.hidden",
            "net.width", "net.activation", "sim.dt", "sample.n", "sample.method", "sample.seed",
            "metrics.reference_n", "metrics.reference_seed", "sgm.objective", "cnf.objective", "cnf.lambda",
            "cnf.T", "cnf.dt", "cnf.transport_weight", "cnf.eval_n", "cnf.mass_half_width", "cnf.mass_cells",
            "wgf.particles", "wgf.dt", "wgf.steps", "wgf.stride", "wgf.seed", "wgf.init_scale", "wgf.smooth",
            "wgf.bandwidth", "verify.levels", "verify.lo", "verify.hi", "verify.nx", "verify.nt",
            "verify.init_mean", "verify.init_var", "verify.small_sigma", "verify.small_lo", "verify.small_hi",
            "verify.small_nx", "verify.eps", "verify.variational_points"};
        return keys;
    }
    static const std::set<std::string>& target_params() {
        static const std::set<std::string> p{"dim", "mean", "var", "weights", "means", "vars"};
        return p;
    }

    static ExperimentConfig parse(std::istream& is, const std::string& source = "<config>") {
        ExperimentConfig c;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
            if (c.values_.count(key)) throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            c.set(key, value);
        }
        return c;
    }

    static ExperimentConfig load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
        return parse(is, path.string());
    }

    void set(const std::string& key, const std::string& value) {
        check_key(key);
        if (value.empty()) throw ConfigError("empty value for key '" + key + "'");
        values_[key] = value;
    }
    void erase(const std::string& key) { values_.erase(key); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void require(std::initializer_list<const char*> keys, const std::string& context) const {
        for (const char* k : keys)
            if (!has(k)) throw ConfigError("missing required key '" + std::string(k) + "' for " + context);
    }

    std::string str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing required key '" + key + "'");
        return it->second;
    }
    std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }

    double num(const std::string& key) const { return parse_double(key, str(key)); }
    double num(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }

    long long integer(const std::string& key) const {
        const std::string v = str(key);
        long long out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) {
            // accept integral values written in floating notation, e.g. 5e4
            const double d = parse_double(key, v);
            if (d != std::floor(d) || std::abs(d) > 9e15) throw ConfigError("key '" + key + "' must be an integer, got '" + v + "'");
            return static_cast<long long>(d);
        }
        return out;
    }
    long long integer(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }

    long long nonneg(const std::string& key, long long fallback) const {
        const long long v = integer(key, fallback);
        if (v < 0) throw ConfigError("key '" + key + "' must be nonnegative");
        return v;
    }

    std::vector<double> list(const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
        return out;
    }

    /// Semicolon-separated vectors, e.g. "-1,0; 1,0".
    std::vector<std::vector<double>> list_of_lists(const std::string& key) const {
        std::vector<std::vector<double>> out;
        std::stringstream ss(str(key));
        std::string group;
        while (std::getline(ss, group, ';')) {
            std::vector<double> v;
            std::stringstream gs(group);
            std::string item;
            while (std::getline(gs, item, ',')) v.push_back(parse_double(key, trim(item)));
            out.push_back(std::move(v));
        }
        return out;
    }

    /// Sorted `key=value` lines; independent of comments, spacing and ordering in the file.
    std::string canonical() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
        return s;
    }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static void check_key(const std::string& key) {
        static const std::string prefix = "target.params.";
        if (key.rfind(prefix, 0) == 0) {
            if (!target_params().count(key.substr(prefix.size()))) throw ConfigError("unknown config key '" + key + "'");
            return;
        }
        if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    }

    static double parse_double(const std::string& key, const std::string& v) {
        double out = 0.0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
            throw ConfigError("key '" + key + "' must be a finite number, got '" + v + "'");
        return out;
    }
};

inline TargetDistribution target_from(const ExperimentConfig& c) {
    const std::string kind = c.str("target.kind");
    auto forbid = [&](std::initializer_list<const char*> keys) {
        for (const char* k : keys)
            if (c.has(std::string("target.params.") + k))
                throw ConfigError("target.params." + std::string(k) + " does not apply to target.kind = " + kind);
    };
    if (kind == "checkerboard") {
        forbid({"dim", "mean", "var", "weights", "means", "vars"});
        return TargetDistribution::checkerboard();
    }
    if (kind == "gaussian") {
        forbid({"weights", "means", "vars"});
        Vector mean;
        if (c.has("target.params.mean")) {
            const auto m = c.list("target.params.mean");
            mean = Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(m.size()));
            if (c.has("target.params.dim") && c.integer("target.params.dim") != mean.size())
                throw ConfigError("target.params.dim does not match target.params.mean");
        } else {
            const long long d = c.integer("target.params.dim", 2);
            if (d < 1) throw ConfigError("target.params.dim must be positive");
            mean = Vector::Zero(d);
        }
        const double var = c.num("target.params.var", 1.0);
        if (!(var > 0.0)) throw ConfigError("target.params.var must be positive");
        return TargetDistribution::gaussian(mean, var * Matrix::Identity(mean.size(), mean.size()));
    }
    if (kind == "gaussian_mixture") {
        forbid({"dim", "mean", "var"});
        c.require({"target.params.weights", "target.params.means", "target.params.vars"}, "target.kind = gaussian_mixture");
        const auto w = c.list("target.params.weights");
        const auto mu = c.list_of_lists("target.params.means");
        const auto v = c.list("target.params.vars");
        if (mu.size() != w.size() || v.size() != w.size())
            throw ConfigError("gaussian_mixture weights, means and vars must have equal counts");
        std::vector<Vector> means;
        std::vector<Matrix> covs;
        for (std::size_t k = 0; k < w.size(); ++k) {
            means.push_back(Eigen::Map<const Vector>(mu[k].data(), static_cast<Eigen::Index>(mu[k].size())));
            if (!(v[k] > 0.0)) throw ConfigError("gaussian_mixture vars must be positive");
            covs.push_back(v[k] * Matrix::Identity(means.back().size(), means.back().size()));
        }
        return TargetDistribution::gaussian_mixture(w, means, covs);
    }
    throw ConfigError("unknown target.kind '" + kind + "' (expected checkerboard, gaussian or gaussian_mixture)");
}

inline SDESpec sde_from(const ExperimentConfig& c, int d) {
    SDESpec s;
    s.a = c.num("sde.a", 0.5);
    s.sigma = c.num("sde.sigma", 1.0);
    s.T = c.num("sde.T", 3.0);
    s.d = d;
    s.validate();
    return s;
}

inline TrainConfig train_from(const ExperimentConfig& c) {
    TrainConfig t;
    t.batches = static_cast<std::uint64_t>(c.nonneg("train.batches", 1000));
    t.batch_size = static_cast<int>(c.integer("train.batch_size", 64));
    t.learning_rate = c.num("train.lr", 1e-3);
    t.seed = static_cast<std::uint64_t>(c.nonneg("train.seed", 0));
    t.eval_every = static_cast<std::uint64_t>(c.integer("train.eval_every", 100));
    if (c.integer("train.eval_every", 100) < 1) throw ConfigError("train.eval_every must be at least 1");
    t.validate();
    return t;
}

inline RegularizerConfig regularizer_from(const ExperimentConfig& c) {
    RegularizerConfig r;
    r.alpha0 = c.num("loss.alpha0", 1.0);
    r.alpha1 = c.num("loss.alpha1", 0.0);
    r.alpha2 = c.num("loss.alpha2", 0.0);
    r.p = static_cast<int>(c.integer("loss.p", 2));
    r.validate();
    return r;
}

inline NetSpec net_from(const ExperimentConfig& c) {
    NetSpec n;
    n.hidden = static_cast<int>(c.integer("net.hidden", 2));
    n.width = static_cast<int>(c.integer("net.width", 32));
    n.activation = parse_activation(c.str("net.activation", "gelu"));
    if (n.hidden < 1 || n.width < 1) throw ConfigError("net.hidden and net.width must be positive");
    return n;
}

// ---------------------------------------------------------------------------------------------
// Artifacts

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw ConfigError("cannot write '" + p.string() + "'");
    return os;
}

} // namespace detail

inline void write_ensemble_csv(const std::filesystem::path& p, const RowMatrix& x) {
    auto os = detail::open_out(p);
    for (Eigen::Index i = 0; i < x.cols(); ++i) os << (i ? "," : "") << 'x' << i;
    os << '\n';
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index i = 0; i < x.cols(); ++i) os << (i ? "," : "") << detail::fmt17(x(r, i));
        os << '\n';
    }
}

inline RowMatrix read_ensemble_csv(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot read samples '" + p.string() + "'");
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("'" + p.string() + "' is empty");
    const auto d = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
    for (Eigen::Index i = 0; i < d; ++i)
        if (line.find("x" + std::to_string(i)) == std::string::npos)
            throw ConfigError("'" + p.string() + "': header must be x0,x1,...");
    std::vector<double> vals;
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        if (line.empty() || line == "\r") continue;
        std::stringstream ss(line);
        std::string cell;
        Eigen::Index k = 0;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                throw ConfigError("'" + p.string() + "' row " + std::to_string(rows + 1) + ": bad number '" + cell + "'");
            }
            ++k;
        }
        if (k != d) throw ShapeError("'" + p.string() + "' row " + std::to_string(rows + 1) + " has " + std::to_string(k) + " columns");
        ++rows;
    }
    return Eigen::Map<RowMatrix>(vals.data(), static_cast<Eigen::Index>(rows), d);
}

inline void write_loss_trace_csv(const std::filesystem::path& p, const std::vector<TracePoint>& trace) {
    auto os = detail::open_out(p);
    os << "step,loss\n";
    for (const auto& t : trace) os << t.step << ',' << detail::fmt17(t.loss) << '\n';
}

inline void write_column_csv(const std::filesystem::path& p, const std::string& name, const std::vector<double>& v) {
    auto os = detail::open_out(p);
    os << name << '\n';
    for (double x : v) os << detail::fmt17(x) << '\n';
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
    auto os = detail::open_out(p);
    os << j.dump(2) << '\n';
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& subcommand, const ExperimentConfig& c,
                           std::uint64_t seed) {
    auto os = detail::open_out(dir / "manifest");
    os << "mfgen " << version_string << '\n';
    os << "subcommand " << subcommand << '\n';
    os << "config_hash fnv1a64:" << hex64(fnv1a64(c.canonical())) << '\n';
    os << "seed " << seed << '\n';
    os << "eigen " << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION << '\n';
    os << "json " << NLOHMANN_JSON_VERSION_MAJOR << '.' << NLOHMANN_JSON_VERSION_MINOR << '.' << NLOHMANN_JSON_VERSION_PATCH << '\n';
#if defined(__clang__)
    os << "compiler clang " << __clang_major__ << '.' << __clang_minor__ << '.' << __clang_patchlevel__ << '\n';
#elif defined(__GNUC__)
    os << "compiler gcc " << __GNUC__ << '.' << __GNUC_MINOR__ << '.' << __GNUC_PATCHLEVEL__ << '\n';
#endif
    os << "config\n" << c.canonical();
}

/// Scatter raster of the first two coordinates on [-3, 3]^2: white background, black 3x3 point splats.
inline void write_scatter_ppm(const std::filesystem::path& p, const RowMatrix& x, int size = 512) {
    if (x.cols() < 2) throw ShapeError("scatter figure needs at least 2 coordinates");
    std::vector<unsigned char> img(static_cast<std::size_t>(size) * size * 3, 255);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double u = (x(r, 0) + 3.0) / 6.0 * size, v = (3.0 - x(r, 1)) / 6.0 * size;
        if (!(u >= 0.0 && u < size && v >= 0.0 && v < size)) continue;
        const int cx = static_cast<int>(u), cy = static_cast<int>(v);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int px = cx + dx, py = cy + dy;
                if (px < 0 || py < 0 || px >= size || py >= size) continue;
                const std::size_t o = (static_cast<std::size_t>(py) * size + px) * 3;
                img[o] = img[o + 1] = img[o + 2] = 0;
            }
    }
    auto os = detail::open_out(p);
    os << "P6\n" << size << ' ' << size << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

/// Loads a network from a training-state checkpoint or a bare network file.
inline MLPParams load_network(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw ConfigError("cannot read checkpoint '" + p.string() + "'");
    std::string head;
    is >> head;
    is.seekg(0);
    if (head == "mfgen-train-state") return read_train_state(is).params;
    if (head == "mfgen-mlp") return read_mlp(is);
    throw ConfigError("'" + p.string() + "' is not an mfgen checkpoint");
}

// ---------------------------------------------------------------------------------------------
// Experiments

struct ExperimentResult {
    nlohmann::json metrics;
    RowMatrix samples;
    bool passed = true;
};

namespace detail {

inline RowMatrix reference_samples(const ExperimentConfig& c, const TargetDistribution& target) {
    const auto n = static_cast<Eigen::Index>(c.integer("metrics.reference_n", 10000));
    if (n < 2) throw ConfigError("metrics.reference_n must be at least 2");
    const auto seed = static_cast<std::uint64_t>(c.nonneg("metrics.reference_seed", 0x7265666572ULL));
    return target.sample(n, seed).states;
}

inline std::uint64_t sample_seed(const ExperimentConfig& c) {
    return rng::derive(static_cast<std::uint64_t>(c.nonneg("sample.seed", c.nonneg("train.seed", 0))), {0x73616d70ULL});
}

inline Eigen::Index sample_count(const ExperimentConfig& c) {
    const long long n = c.integer("sample.n", 10000);
    if (n < 2) throw ConfigError("sample.n must be at least 2");
    return static_cast<Eigen::Index>(n);
}

inline void write_common(const std::filesystem::path& out, const RowMatrix& samples, const nlohmann::json& metrics) {
    write_ensemble_csv(out / "samples.csv", samples);
    write_json(out / "metrics.json", metrics);
    if (samples.cols() >= 2) write_scatter_ppm(out / "figure.ppm", samples);
}

inline bool is_isotropic_gaussian(const TargetDistribution& t, double& var) {
    if (t.kind() != TargetKind::gaussian) return false;
    const Matrix& S = t.covariances().front();
    var = S(0, 0);
    return (S - var * Matrix::Identity(S.rows(), S.cols())).cwiseAbs().maxCoeff() == 0.0;
}

} // namespace detail

/// Draws samples from a trained score or potential network with the reverse SDE or the probability flow.
inline RowMatrix sgm_generate(const MLPParams& net, const SDESpec& spec, Eigen::Index n, double dt,
                              const std::string& method, std::uint64_t seed) {
    if (net.state_dim() != spec.d) throw ShapeError("network dimension does not match the SDE");
    const ScoreFn score = trained_score(net);
    if (method == "sde") return reverse_sde_simulate(spec, score, n, dt, seed).states;
    if (method == "ode") return probability_flow_simulate(spec, score, n, dt, seed, OdeIntegrator::rk4).states;
    throw ConfigError("sample.method must be sde or ode, got '" + method + "'");
}

/// train-sgm / train-pinn: train, checkpoint, sample, score against the target.
inline ExperimentResult run_train_sgm(const ExperimentConfig& c, const std::filesystem::path& out, bool pinn,
                                      const std::optional<std::filesystem::path>& resume = std::nullopt) {
    const std::string name = pinn ? "train-pinn" : "train-sgm";
    c.require({"target.kind", "train.batches"}, name);
    const auto target = target_from(c);
    const auto spec = sde_from(c, target.dim());
    const auto train = train_from(c);
    auto reg = regularizer_from(c);
    if (pinn) {
        if (c.has("loss.alpha0") && reg.alpha0 != 0.0) throw ConfigError("train-pinn fixes loss.alpha0 = 0");
        reg.alpha0 = 0.0;
        reg.validate();
    }
    const auto net = net_from(c);
    const auto obj = parse_sgm_objective(c.str("sgm.objective", "score"));
    auto state = resume ? load_train_state(*resume) : make_train_state(init_sgm_network(net, spec, obj, train.seed));
    if (state.params.state_dim() != spec.d) throw ShapeError("checkpoint dimension does not match the target");
    try {
        train_loop(state, train, sgm_batch_loss(target, spec, reg, obj, train.batch_size));
    } catch (const DivergedTrainingError& e) {
        auto os = detail::open_out(out / "checkpoint_diverged.txt");
        write_mlp(os, e.last_params());
        throw;
    }
    std::filesystem::create_directories(out);
    save_train_state((out / "checkpoint.txt").string(), state);
    write_loss_trace_csv(out / "loss_trace.csv", state.trace);

    ExperimentResult r;
    r.samples = sgm_generate(state.params, spec, detail::sample_count(c), c.num("sim.dt", 1e-3),
                             c.str("sample.method", "sde"), detail::sample_seed(c));
    const auto rep = metric_report(r.samples, detail::reference_samples(c, target), &target);
    r.metrics = rep.to_json();
    r.metrics["subcommand"] = name;
    r.metrics["batches"] = state.next_batch;
    if (!state.trace.empty()) r.metrics["final_loss"] = state.trace.back().loss;
    detail::write_common(out, r.samples, r.metrics);
    write_manifest(out, name, c, train.seed);
    return r;
}

/// sample: draws from a saved SGM checkpoint.
inline ExperimentResult run_sample(const ExperimentConfig& c, const std::filesystem::path& checkpoint,
                                   const std::filesystem::path& out) {
    const MLPParams net = load_network(checkpoint);
    const auto spec = sde_from(c, net.state_dim());
    ExperimentResult r;
    r.samples = sgm_generate(net, spec, detail::sample_count(c), c.num("sim.dt", 1e-3), c.str("sample.method", "sde"),
                             detail::sample_seed(c));
    r.metrics["subcommand"] = "sample";
    r.metrics["method"] = c.str("sample.method", "sde");
    r.metrics["n"] = r.samples.rows();
    if (c.has("target.kind")) {
        const auto target = target_from(c);
        r.metrics.update(metric_report(r.samples, detail::reference_samples(c, target), &target).to_json());
    }
    detail::write_common(out, r.samples, r.metrics);
    write_manifest(out, "sample", c, detail::sample_seed(c));
    return r;
}

inline CNFRun cnf_run_from(const ExperimentConfig& c, bool boltzmann) {
    CNFRun run;
    run.net = net_from(c);
    run.objective = parse_cnf_objective(c.str("cnf.objective", boltzmann ? "ot_bg" : "ot_flow"));
    if (!boltzmann && run.objective != CNFObjective::ot_flow) throw ConfigError("train-otflow needs cnf.objective = ot_flow");
    if (boltzmann && run.objective == CNFObjective::ot_flow)
        throw ConfigError("train-otbg needs cnf.objective = ot_bg or generalized_ot");
    run.lambda = c.num("cnf.lambda", 0.5);
    run.alpha1 = c.num("loss.alpha1", 0.0);
    run.T = c.num("cnf.T", 1.0);
    run.dt = c.num("cnf.dt", 0.25);
    run.transport_weight = c.num("cnf.transport_weight", 1.0);
    run.train = train_from(c);
    run.validate();
    return run;
}

/// train-otflow / train-otbg: potential flow training, generation with likelihoods and flow diagnostics.
inline ExperimentResult run_train_cnf(const ExperimentConfig& c, const std::filesystem::path& out, bool boltzmann) {
    const std::string name = boltzmann ? "train-otbg" : "train-otflow";
    c.require({"target.kind", "train.batches"}, name);
    const auto target = target_from(c);
    const auto run = cnf_run_from(c, boltzmann);
    auto state = make_train_state(init_cnf_network(run.net, target.dim(), run.train.seed));
    try {
        train_loop(state, run.train, cnf_batch_loss(run, target));
    } catch (const DivergedTrainingError& e) {
        auto os = detail::open_out(out / "checkpoint_diverged.txt");
        write_mlp(os, e.last_params());
        throw;
    }
    std::filesystem::create_directories(out);
    save_train_state((out / "checkpoint.txt").string(), state);
    write_loss_trace_csv(out / "loss_trace.csv", state.trace);

    const double dt = c.num("sim.dt", 0.05);
    const auto gen = generate_cnf(state.params, run.T, detail::sample_count(c), dt, detail::sample_seed(c));
    write_column_csv(out / "log_likelihood.csv", "log_likelihood", gen.log_likelihood);

    ExperimentResult r;
    r.samples = gen.samples.states;
    const RowMatrix ref = detail::reference_samples(c, target);
    r.metrics = metric_report(r.samples, ref, &target).to_json();
    r.metrics["subcommand"] = name;
    r.metrics["objective"] = to_string(run.objective);
    if (!state.trace.empty()) r.metrics["final_loss"] = state.trace.back().loss;

    // diagnostics on held-out target draws, independent of the training and reference streams
    const NetworkEvaluator U(state.params);
    const RowMatrix held = target.sample(ref.rows(), rng::derive(detail::sample_seed(c), {0x68656c64ULL})).states;
    const auto ll = cnf_log_likelihood(U, held, run.T, dt);
    double mean = 0.0, sq = 0.0;
    for (double v : ll) mean += v;
    mean /= static_cast<double>(ll.size());
    for (double v : ll) sq += (v - mean) * (v - mean);
    r.metrics["heldout_log_likelihood_mean"] = mean;
    r.metrics["heldout_log_likelihood_se"] = std::sqrt(sq / static_cast<double>(ll.size() - 1) / static_cast<double>(ll.size()));
    if (target.kind() == TargetKind::gaussian) {
        const Matrix& S = target.covariances().front();
        const double d = static_cast<double>(target.dim());
        r.metrics["target_negative_entropy"] =
            -0.5 * d * (1.0 + std::log(2.0 * std::numbers::pi)) - 0.5 * std::log(S.determinant());
    }
    const Eigen::Index m = std::min<Eigen::Index>(held.rows(), c.integer("cnf.eval_n", 1000));
    r.metrics["roundtrip_max_error"] = cnf_roundtrip_error(U, held.topRows(m), run.T, dt);
    r.metrics["path_curvature"] = cnf_path_curvature(U, held.topRows(m), run.T, dt);
    if (target.dim() == 2)
        r.metrics["density_mass"] = cnf_density_mass_2d(U, run.T, dt, c.num("cnf.mass_half_width", 3.0),
                                                         static_cast<int>(c.integer("cnf.mass_cells", 120)));
    detail::write_common(out, r.samples, r.metrics);
    write_manifest(out, name, c, run.train.seed);
    return r;
}

inline WGFRun wgf_run_from(const ExperimentConfig& c) {
    c.require({"target.kind"}, "run-wgf");
    WGFRun run;
    run.target = target_from(c);
    run.particles = static_cast<Eigen::Index>(c.integer("wgf.particles", 2000));
    run.dt = c.num("wgf.dt", 0.01);
    run.steps = static_cast<std::size_t>(c.nonneg("wgf.steps", 200));
    run.stride = static_cast<std::size_t>(c.integer("wgf.stride", 20));
    if (c.integer("wgf.stride", 20) < 1) throw ConfigError("wgf.stride must be at least 1");
    run.seed = static_cast<std::uint64_t>(c.nonneg("wgf.seed", 0));
    run.init_scale = c.num("wgf.init_scale", 1.0);
    run.validate();
    return run;
}

/// run-wgf: Langevin particle flow with snapshots, free-energy trace and variance-curve comparison.
inline ExperimentResult run_wgf(const ExperimentConfig& c, const std::filesystem::path& out) {
    const auto run = wgf_run_from(c);
    const auto snaps = langevin_flow(run);
    for (std::size_t k = 0; k < snaps.size(); ++k) {
        char name[40];
        std::snprintf(name, sizeof name, "step_%06zu.csv",
                      static_cast<std::size_t>(std::llround(snaps[k].time_label / run.dt)));
        write_ensemble_csv(out / "snapshots" / name, snaps[k].states);
    }
    const auto trace = free_energy_trace(snaps, run.target, c.num("wgf.bandwidth", 0.0), run.dt);
    {
        auto os = detail::open_out(out / "free_energy.csv");
        write_trace_csv(os, trace);
    }
    const auto window = static_cast<std::size_t>(c.integer("wgf.smooth", 3));
    if (window < 1) throw ConfigError("wgf.smooth must be at least 1");
    const auto smooth = moving_average(trace.kl, window);

    ExperimentResult r;
    r.samples = snaps.back().states;
    r.metrics["subcommand"] = "run-wgf";
    r.metrics["kde_bandwidth"] = trace.bandwidth;
    r.metrics["smoothing_window"] = window;
    r.metrics["kl_estimates"] = trace.kl;
    r.metrics["smoothed_decreasing_fraction"] = decreasing_fraction(smooth);
    double w = 0.0;
    if (detail::is_isotropic_gaussian(run.target, w)) {
        const double n = static_cast<double>(run.particles), d = static_cast<double>(run.target.dim());
        const double v0 = run.init_scale * run.init_scale;
        double worst = 0.0;
        for (const auto& s : snaps) {
            const RowMatrix cen = s.states.rowwise() - s.states.colwise().mean();
            const double v = (cen.array().square().colwise().sum() / (n - 1.0)).mean();
            const auto step = static_cast<std::size_t>(std::llround(s.time_label / run.dt));
            const double disc = langevin_discrete_variance(v0, run.dt, step, w);
            const double exact = langevin_variance(v0, s.time_label, w);
            const double se = disc * std::sqrt(2.0 / (n - 1.0) / d);
            // discretization gap between the scheme and the continuous curve
            const double gap = std::abs(disc - exact);
            const double z = (std::abs(v - exact) - gap) / se;
            worst = std::max(worst, z);
            r.metrics["variance_curve"].push_back({{"step", step}, {"time", s.time_label}, {"variance", v},
                                                   {"analytic", exact}, {"scheme", disc}, {"se", se}, {"excess_se", z}});
        }
        r.metrics["variance_worst_excess_se"] = worst;
    }
    r.metrics.update(metric_report(r.samples, detail::reference_samples(c, run.target), &run.target).to_json());
    detail::write_common(out, r.samples, r.metrics);
    write_manifest(out, "run-wgf", c, run.seed);
    return r;
}

inline VerifyConfig verify_from(const ExperimentConfig& c) {
    VerifyConfig v;
    v.spec = sde_from(c, 1);
    v.levels = static_cast<int>(c.integer("verify.levels", v.levels));
    v.grid = Grid1D{c.num("verify.lo", -8.0), c.num("verify.hi", 8.0), v.spec.T, c.integer("verify.nx", 801),
                    c.integer("verify.nt", 3001)};
    v.init_mean = c.num("verify.init_mean", v.init_mean);
    v.init_var = c.num("verify.init_var", v.init_var);
    v.small_sigma = c.num("verify.small_sigma", v.small_sigma);
    v.small_sigma_grid = Grid1D{c.num("verify.small_lo", -3.0), c.num("verify.small_hi", 3.0), v.spec.T,
                                c.integer("verify.small_nx", 2401), c.integer("verify.nt", 3001)};
    v.eps = c.num("verify.eps", v.eps);
    v.variational_points = c.integer("verify.variational_points", v.variational_points);
    v.validate();
    return v;
}

/// verify: the 1-D optimality-condition suite; passed is false if any check fails.
inline ExperimentResult run_verify(const ExperimentConfig& c, const std::filesystem::path& out) {
    const auto rep = verify_suite(verify_from(c));
    ExperimentResult r;
    r.metrics = rep.to_json();
    r.passed = rep.all_passed();
    write_json(out / "report.json", r.metrics);
    write_manifest(out, "verify", c, 0);
    return r;
}

/// metrics: two-sample report of generated against reference samples.
inline ExperimentResult run_metrics(const std::filesystem::path& generated, const std::filesystem::path& reference,
                                    const std::optional<ExperimentConfig>& c, std::optional<double> bandwidth,
                                    const std::filesystem::path& out) {
    ExperimentResult r;
    r.samples = read_ensemble_csv(generated);
    const RowMatrix ref = read_ensemble_csv(reference);
    std::optional<TargetDistribution> target;
    if (c && c->has("target.kind")) target = target_from(*c);
    r.metrics = metric_report(r.samples, ref, target ? &*target : nullptr, bandwidth).to_json();
    write_json(out / "metrics.json", r.metrics);
    return r;
}

} // namespace mfgen
