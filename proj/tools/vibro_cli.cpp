// vibro-cli: configuration-driven front end for the coupled cavity/membrane solvers.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>
#include <boost/version.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vibro/acoustics.hpp"
#include "vibro/coupling.hpp"
#include "vibro/magnus.hpp"
#include "vibro/membrane.hpp"
#include "vibro/oracle.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vibro;

namespace {

constexpr const char* kToolVersion = "1.0.0";
constexpr int kSchemaVersion = 1;

enum Exit { ok = 0, config_error = 2, numeric_failure = 3 };

struct ConfigError {
    int line;
    std::string message;
};

// ---------------------------------------------------------------------------
// Config source with key -> line lookup
// ---------------------------------------------------------------------------

class Source {
public:
    Source(std::string path, std::string text) : path_(std::move(path)), text_(std::move(text)) {}

    const std::string& path() const { return path_; }
    const std::string& text() const { return text_; }

    int line_of_offset(std::size_t off) const {
        off = std::min(off, text_.size());
        return 1 + static_cast<int>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(off), '\n'));
    }

    // Line of the last key of a dotted path, found by scanning for each key in turn.
    int line_of(const std::vector<std::string>& keys) const {
        std::size_t pos = 0, hit = 0;
        for (const auto& k : keys) {
            const std::string tok = "\"" + k + "\"";
            std::size_t p = pos;
            for (;;) {
                p = text_.find(tok, p);
                if (p == std::string::npos) return hit ? line_of_offset(hit) : 1;
                std::size_t q = p + tok.size();
                while (q < text_.size() && std::isspace(static_cast<unsigned char>(text_[q]))) ++q;
                if (q < text_.size() && text_[q] == ':') break;
                p += tok.size();
            }
            hit = p;
            pos = p + tok.size();
        }
        return line_of_offset(hit);
    }

private:
    std::string path_, text_;
};

// Typed, strict access to one JSON object; every failure is anchored to a line.
class Block {
public:
    Block(const Source& src, const json& j, std::vector<std::string> path, std::set<std::string> allowed)
        : src_(src), j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw err("must be an object");
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!allowed.count(it.key())) throw ConfigError{line(it.key()), "unknown key " + dotted(it.key())};
    }

    bool has(const std::string& k) const { return j_.contains(k) && !j_.at(k).is_null(); }
    const json& raw(const std::string& k) const { return j_.at(k); }

    double number(const std::string& k, std::optional<double> def = std::nullopt) const {
        if (!has(k)) {
            if (def) return *def;
            throw ConfigError{line(), "missing key " + dotted(k)};
        }
        if (!j_.at(k).is_number()) throw at(k, "must be a number");
        return j_.at(k).get<double>();
    }
    double positive(const std::string& k, std::optional<double> def = std::nullopt) const {
        const double v = number(k, def);
        if (!(v > 0.0) || !std::isfinite(v)) throw at(k, "must be positive");
        return v;
    }
    int integer(const std::string& k, std::optional<int> def = std::nullopt, int min = 0) const {
        if (!has(k)) {
            if (def) return *def;
            throw ConfigError{line(), "missing key " + dotted(k)};
        }
        if (!j_.at(k).is_number_integer()) throw at(k, "must be an integer");
        const auto v = j_.at(k).get<long long>();
        if (v < min || v > 1000000) throw at(k, "must be an integer >= " + std::to_string(min));
        return static_cast<int>(v);
    }
    std::string string(const std::string& k, const std::string& def, const std::set<std::string>& choices = {}) const {
        if (!has(k)) return def;
        if (!j_.at(k).is_string()) throw at(k, "must be a string");
        std::string v = j_.at(k).get<std::string>();
        if (!choices.empty() && !choices.count(v)) {
            std::string c;
            for (const auto& s : choices) c += (c.empty() ? "" : ", ") + s;
            throw at(k, "must be one of: " + c);
        }
        return v;
    }
    std::vector<double> numbers(const std::string& k) const {
        if (!has(k) || !j_.at(k).is_array()) throw at(k, "must be an array of numbers");
        std::vector<double> v;
        for (const auto& e : j_.at(k)) {
            if (!e.is_number()) throw at(k, "must be an array of numbers");
            v.push_back(e.get<double>());
        }
        return v;
    }
    cplx complex(const std::string& k, cplx def) const {
        if (!has(k)) return def;
        const json& e = j_.at(k);
        if (e.is_number()) return e.get<double>();
        if (e.is_array() && e.size() == 2 && e[0].is_number() && e[1].is_number())
            return {e[0].get<double>(), e[1].get<double>()};
        throw at(k, "must be a number or a [re, im] pair");
    }
    Block child(const std::string& k, const std::set<std::string>& allowed) const {
        auto p = path_;
        p.push_back(k);
        return Block(src_, j_.at(k), p, allowed);
    }
    Block element(const std::string& k, std::size_t i, const std::set<std::string>& allowed) const {
        auto p = path_;
        p.push_back(k);
        return Block(src_, j_.at(k).at(i), p, allowed, i);
    }

    int line(const std::string& k = {}) const {
        auto p = path_;
        if (!k.empty()) p.push_back(k);
        return p.empty() ? 1 : src_.line_of(p);
    }
    ConfigError at(const std::string& k, const std::string& msg) const { return {line(k), dotted(k) + " " + msg}; }
    ConfigError err(const std::string& msg) const { return {line(), dotted({}) + " " + msg}; }

private:
    Block(const Source& src, const json& j, std::vector<std::string> path, std::set<std::string> allowed, std::size_t idx)
        : Block(src, j, std::move(path), std::move(allowed)) {
        index_ = idx;
    }

    std::string dotted(const std::string& k) const {
        std::string s;
        for (const auto& p : path_) s += (s.empty() ? "" : ".") + p;
        if (index_) s += "[" + std::to_string(*index_) + "]";
        if (!k.empty()) s += (s.empty() ? "" : ".") + k;
        return s.empty() ? "config" : s;
    }

    const Source& src_;
    const json& j_;
    std::vector<std::string> path_;
    std::optional<std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

struct Tolerances {
    double oracle_rel = 1e-3;
    double contraction = 0.1;
    double c_max = 10.0;
    double magnus = 1e-4;
    double perturbative = 0.1;
};

struct Scenario {
    json canonical;
    CoupledProblem pb;
    int cavity_modes = 8, patch_modes = 1, k_max = 3;
    std::vector<std::vector<double>> probes;
    Tolerances tol;
    int oracle_cells = 400;
    double oracle_cfl = 0.5;
    // prescribed harmonic vibration (eigs, piston); empty means use the coupled solve
    std::optional<std::pair<double, std::vector<Eigen::VectorXcd>>> vibration;
    double diag_time = 0.0, fd_step = 1e-4;
    MetricModel metric = MetricModel::quadratic;
    // magnus-check generator A(t) = A0 + t A1 + t^2 A2
    std::vector<Eigen::MatrixXd> magnus_coeffs;
    double magnus_tau = 0.0, magnus_t = 1.0;
    int magnus_order = 3;
    std::string out_dir = "out";
};

Eigen::MatrixXd matrix(const Block& b, const std::string& k, Eigen::Index n = -1) {
    const json& m = b.raw(k);
    if (!m.is_array() || m.empty()) throw b.at(k, "must be a square matrix (array of rows)");
    const auto rows = static_cast<Eigen::Index>(m.size());
    if (n >= 0 && rows != n) throw b.at(k, "must be " + std::to_string(n) + " x " + std::to_string(n));
    Eigen::MatrixXd A(rows, rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const json& r = m[static_cast<std::size_t>(i)];
        if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != rows) throw b.at(k, "must be a square matrix");
        for (Eigen::Index j = 0; j < rows; ++j) {
            if (!r[static_cast<std::size_t>(j)].is_number()) throw b.at(k, "entries must be numbers");
            A(i, j) = r[static_cast<std::size_t>(j)].get<double>();
        }
    }
    return A;
}

// Runs a library validate() and anchors any rejection to a config line.
template <class F>
void checked(int line, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        throw ConfigError{line, e.what()};
    }
}

Scenario load(const Source& src, std::optional<int> modes_override, std::optional<std::string> out_override) {
    json root;
    try {
        root = json::parse(src.text());
    } catch (const json::parse_error& e) {
        throw ConfigError{src.line_of_offset(e.byte > 0 ? e.byte - 1 : 0), std::string("malformed JSON: ") + e.what()};
    }
    const Block top(src, root, {},
                    {"schema_version", "geometry", "medium", "membrane", "damping", "source", "numerics", "tolerances",
                     "vibration", "diagnostics", "magnus", "output"});
    if (top.integer("schema_version") != kSchemaVersion)
        throw top.at("schema_version", "must be " + std::to_string(kSchemaVersion));

    Scenario s;
    s.canonical = root;

    // geometry
    CavityGeometry geom;
    {
        const Block g = top.child("geometry", {"edges", "patches"});
        geom.edges = g.numbers("edges");
        if (!g.has("patches") || !g.raw("patches").is_array() || g.raw("patches").empty())
            throw g.at("patches", "must be a non-empty array");
        for (std::size_t i = 0; i < g.raw("patches").size(); ++i) {
            const Block p = g.element("patches", i, {"axis", "side", "lo", "hi", "lumped_eigenvalue"});
            const int axis = p.integer("axis");
            const int side = p.integer("side");
            if (axis >= static_cast<int>(geom.edges.size())) throw p.at("axis", "exceeds the cavity dimension");
            PatchGeometry pg = full_face_patch(geom, axis, side, p.number("lumped_eigenvalue", 0.0));
            if (p.has("lo")) pg.lo = p.numbers("lo");
            if (p.has("hi")) pg.hi = p.numbers("hi");
            geom.patches.push_back(pg);
        }
        checked(g.line(), [&] { geom.validate(); });
    }

    // medium and membrane
    const Block med = top.child("medium", {"c", "rho0"});
    s.pb.medium = {med.positive("c"), med.positive("rho0")};
    const Block mem = top.child("membrane", {"rho_m", "thickness", "cm2", "cH2"});
    s.pb.cfg.rho0 = s.pb.medium.rho0;
    s.pb.cfg.rho_m = mem.positive("rho_m");
    s.pb.cfg.d = mem.positive("thickness");
    s.pb.op = {mem.number("cm2"), mem.number("cH2"), s.pb.cfg.d};
    if (s.pb.op.cm2 < 0.0) throw mem.at("cm2", "must be non-negative");
    if (s.pb.op.cH2 < 0.0) throw mem.at("cH2", "must be non-negative");

    // damping
    if (top.has("damping")) {
        const Block d = top.child("damping", {"family", "rate"});
        const std::string fam = d.string("family", "none", {"none", "exponential", "rational"});
        if (fam == "exponential") s.pb.lapse = TimeLapse(DampingFunction::exponential(d.positive("rate")));
        if (fam == "rational") s.pb.lapse = TimeLapse(DampingFunction::rational(d.positive("rate")));
    }

    // source
    {
        const Block so = top.child("source", {"p0", "omega", "drive", "ramp", "t_off"});
        s.pb.src.p0 = so.complex("p0", 1.0);
        s.pb.src.omega = so.positive("omega");
        s.pb.src.ramp = so.number("ramp", 0.0);
        s.pb.src.t_off = so.number("t_off", std::numeric_limits<double>::infinity());
        if (so.has("drive")) {
            const json& m = so.raw("drive");
            if (!m.is_array()) throw so.at("drive", "must be an array of booleans");
            for (const auto& e : m) {
                if (!e.is_boolean()) throw so.at("drive", "must be an array of booleans");
                s.pb.src.mask.push_back(e.get<bool>());
            }
        }
        checked(so.line(), [&] { s.pb.src.validate(geom.patches.size()); });
    }

    // numerics
    double t_end = 1.0;
    int steps = 0;
    {
        const Block n = top.child("numerics", {"cavity_modes", "patch_modes", "t_end", "steps", "picard_iterations",
                                                "eps", "probes", "oracle_cells", "oracle_cfl"});
        s.cavity_modes = n.integer("cavity_modes", 8, 1);
        if (modes_override) s.cavity_modes = *modes_override;
        s.patch_modes = n.integer("patch_modes", 1, 1);
        t_end = n.positive("t_end");
        steps = n.integer("steps", 0, 0);
        s.k_max = n.integer("picard_iterations", 3, 1);
        s.pb.cfg.eps = n.positive("eps", s.pb.cfg.g() * s.pb.cfg.g());
        s.oracle_cells = n.integer("oracle_cells", 400, 4);
        s.oracle_cfl = n.positive("oracle_cfl", 0.5);
        if (n.has("probes")) {
            const json& pr = n.raw("probes");
            if (!pr.is_array()) throw n.at("probes", "must be an array of points");
            for (const auto& pt : pr) {
                if (!pt.is_array() || pt.size() != geom.edges.size())
                    throw n.at("probes", "each point needs " + std::to_string(geom.edges.size()) + " coordinates");
                std::vector<double> x;
                for (std::size_t j = 0; j < pt.size(); ++j) {
                    if (!pt[j].is_number()) throw n.at("probes", "coordinates must be numbers");
                    x.push_back(pt[j].get<double>());
                    if (x.back() < 0.0 || x.back() > geom.edges[j]) throw n.at("probes", "point outside the cavity");
                }
                s.probes.push_back(x);
            }
        }
    }

    if (top.has("tolerances")) {
        const Block t = top.child("tolerances", {"oracle_rel", "contraction", "c_max", "magnus", "perturbative"});
        s.tol.oracle_rel = t.positive("oracle_rel", s.tol.oracle_rel);
        s.tol.contraction = t.positive("contraction", 10.0 * s.pb.cfg.g());
        s.tol.c_max = t.positive("c_max", s.tol.c_max);
        s.tol.magnus = t.positive("magnus", s.tol.magnus);
        s.tol.perturbative = t.positive("perturbative", s.tol.perturbative);
    } else {
        s.tol.contraction = 10.0 * s.pb.cfg.g();
    }

    checked(mem.line(), [&] { s.pb.cfg.validate(); });
    s.pb.model = ModalModel::build(geom, s.cavity_modes, s.patch_modes);
    checked(mem.line(), [&] {
        for (const auto& b : s.pb.model.patches) s.pb.op.validate(*b);
    });

    if (top.has("vibration")) {
        const Block v = top.child("vibration", {"omega", "amplitudes"});
        const double w = v.positive("omega");
        const json& a = v.raw("amplitudes");
        if (!a.is_array() || a.size() != geom.patches.size())
            throw v.at("amplitudes", "needs one list of modal amplitudes per patch");
        std::vector<Eigen::VectorXcd> amps;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto n = static_cast<Eigen::Index>(s.pb.model.patches[i]->size());
            if (!a[i].is_array() || static_cast<Eigen::Index>(a[i].size()) > n)
                throw v.at("amplitudes", "patch " + std::to_string(i) + " has at most " + std::to_string(n) + " modes");
            Eigen::VectorXcd c = Eigen::VectorXcd::Zero(n);
            for (std::size_t k = 0; k < a[i].size(); ++k) {
                const json& e = a[i][k];
                if (e.is_number()) c[static_cast<Eigen::Index>(k)] = e.get<double>();
                else if (e.is_array() && e.size() == 2 && e[0].is_number() && e[1].is_number())
                    c[static_cast<Eigen::Index>(k)] = cplx(e[0].get<double>(), e[1].get<double>());
                else throw v.at("amplitudes", "entries must be numbers or [re, im] pairs");
            }
            amps.push_back(c);
        }
        s.vibration = std::make_pair(w, amps);
    }

    if (top.has("diagnostics")) {
        const Block d = top.child("diagnostics", {"time", "fd_step", "metric"});
        s.diag_time = d.number("time", 0.0);
        s.fd_step = d.positive("fd_step", 1e-4);
        s.metric = d.string("metric", "quadratic", {"quadratic", "full_pullback"}) == "quadratic"
                       ? MetricModel::quadratic
                       : MetricModel::full_pullback;
        if (s.diag_time < 0.0 || s.diag_time > t_end) throw d.at("time", "must lie in [0, numerics.t_end]");
    }

    if (top.has("magnus")) {
        const Block m = top.child("magnus", {"a0", "a1", "a2", "tau", "t", "order"});
        s.magnus_coeffs.push_back(matrix(m, "a0"));
        const Eigen::Index n = s.magnus_coeffs[0].rows();
        for (const char* k : {"a1", "a2"})
            if (m.has(k)) s.magnus_coeffs.push_back(matrix(m, k, n));
        s.magnus_tau = m.number("tau", 0.0);
        s.magnus_t = m.number("t", 1.0);
        if (s.magnus_t <= s.magnus_tau) throw m.at("t", "must exceed magnus.tau");
        s.magnus_order = m.integer("order", 3, 1);
        if (s.magnus_order > 3) throw m.at("order", "must be 1, 2 or 3");
    }

    if (top.has("output")) s.out_dir = top.child("output", {"dir"}).string("dir", s.out_dir);
    if (out_override) s.out_dir = *out_override;

    double fmax = std::sqrt(s.pb.medium.c * s.pb.medium.c * s.pb.model.cavity->eigenvalues().maxCoeff());
    for (const auto& b : s.pb.model.patches)
        for (std::size_t k = 0; k < b->size(); ++k) fmax = std::max(fmax, std::sqrt(s.pb.op.p(b->eigenvalue(k))));
    fmax = std::max(fmax, s.pb.src.omega);
    s.pb.grid = steps > 0 ? TimeGrid(t_end, steps) : TimeGrid::for_frequency(t_end, fmax);
    checked(1, [&] { s.pb.validate(); });
    return s;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// RFC 4180 field.
std::string field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

class Outputs {
public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    void write(const std::string& name, const std::string& content) {
        std::ofstream f(dir_ / name, std::ios::binary);
        f << content;
        if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
        files_[name] = fnv1a(content);
    }
    void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

    const std::map<std::string, std::uint64_t>& files() const { return files_; }
    const fs::path& dir() const { return dir_; }

    static std::uint64_t fnv1a(const std::string& s) {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

private:
    fs::path dir_;
    std::map<std::string, std::uint64_t> files_;
};

std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string csv_series(const TimeGrid& grid, const std::vector<std::string>& names,
                       const std::vector<const Eigen::MatrixXcd*>& blocks) {
    std::ostringstream o;
    o << "t";
    for (const auto& n : names) o << ',' << field(n + ".re") << ',' << field(n + ".im");
    o << '\n';
    for (int r = 0; r < grid.size(); ++r) {
        o << num(grid.t(r));
        for (const auto* b : blocks)
            for (Eigen::Index c = 0; c < b->cols(); ++c) o << ',' << num((*b)(r, c).real()) << ',' << num((*b)(r, c).imag());
        o << '\n';
    }
    return o.str();
}

std::string mode_name(const std::string& prefix, const Mode& m) {
    if (m.index.empty()) return prefix + "_piston";
    std::string s = prefix;
    for (int i : m.index) s += "_" + std::to_string(i);
    return s;
}

json manifest(const Scenario& s, const std::string& command, const Outputs& out) {
    json m;
    m["tool"] = "vibro-cli";
    m["tool_version"] = kToolVersion;
    m["schema_version"] = kSchemaVersion;
    m["command"] = command;
    m["config_hash"] = "fnv1a64:" + hex(Outputs::fnv1a(s.canonical.dump()));
    m["versions"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"boost", BOOST_LIB_VERSION},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"compiler", __VERSION__}};
    m["tolerances"] = {{"oracle_rel", s.tol.oracle_rel}, {"contraction", s.tol.contraction}, {"c_max", s.tol.c_max},
                       {"magnus", s.tol.magnus},         {"perturbative", s.tol.perturbative}};
    m["resolved"] = {{"cavity_modes", s.pb.model.cavity->size()},
                     {"steps", s.pb.grid.steps},
                     {"dt", s.pb.grid.dt},
                     {"coupling_strength", s.pb.cfg.g()},
                     {"eps", s.pb.cfg.eps}};
    json files = json::object();
    for (const auto& [name, h] : out.files()) files[name] = "fnv1a64:" + hex(h);
    m["outputs"] = files;
    return m;
}

json vec(const std::vector<double>& v) { return json(v); }

Eigen::MatrixXcd probe_values(const SpectralBasis& cav, const ModalHistory& p, const std::vector<std::vector<double>>& pts) {
    Eigen::MatrixXcd v(p.value.rows(), static_cast<Eigen::Index>(pts.size()));
    for (std::size_t j = 0; j < pts.size(); ++j) {
        Eigen::VectorXd phi(static_cast<Eigen::Index>(cav.size()));
        for (std::size_t n = 0; n < cav.size(); ++n) phi[static_cast<Eigen::Index>(n)] = cav.value(n, pts[j]);
        v.col(static_cast<Eigen::Index>(j)) = p.value * phi.cast<cplx>();
    }
    return v;
}

PicardOptions picard_options(const Scenario& s) {
    PicardOptions o;
    o.k_max = s.k_max;
    return o;
}

json ledger_json(const IterateLedger& L, double tol) {
    double worst = 0.0;
    for (double r : L.u_ratios) worst = std::max(worst, r);
    for (double r : L.p_ratios) worst = std::max(worst, r);
    return {{"k_max", L.k_max()},   {"du", vec(L.du)},         {"dp", vec(L.dp)},
            {"u_ratios", vec(L.u_ratios)}, {"p_ratios", vec(L.p_ratios)}, {"max_ratio", worst},
            {"contracting", L.contracting}, {"pass", worst <= tol}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

using Log = std::function<void(const std::string&)>;

json cmd_simulate(const Scenario& s, Outputs& out, const Log& log) {
    log("picard: " + std::to_string(s.k_max) + " iterations, " + std::to_string(s.pb.grid.steps) + " steps");
    const IterateLedger L = picard_iterate(s.pb, picard_options(s));
    const IterateRecord& last = L.last();
    const SpectralBasis& cav = *s.pb.model.cavity;

    std::vector<std::string> names;
    for (std::size_t n = 0; n < cav.size(); ++n) names.push_back(mode_name("p", cav.mode(n)));
    out.write("pressure_modes.csv", csv_series(s.pb.grid, names, {&last.p.value}));

    names.clear();
    std::vector<const Eigen::MatrixXcd*> blocks;
    for (std::size_t i = 0; i < last.u.size(); ++i) {
        const SpectralBasis& b = *s.pb.model.patches[i];
        for (std::size_t k = 0; k < b.size(); ++k) names.push_back(mode_name("u" + std::to_string(i), b.mode(k)));
        blocks.push_back(&last.u[i].value);
    }
    out.write("membrane_modes.csv", csv_series(s.pb.grid, names, blocks));

    if (!s.probes.empty()) {
        const Eigen::MatrixXcd pv = probe_values(cav, last.p, s.probes);
        names.clear();
        for (std::size_t j = 0; j < s.probes.size(); ++j) names.push_back("probe" + std::to_string(j));
        out.write("probes.csv", csv_series(s.pb.grid, names, {&pv}));
    }

    std::ostringstream led;
    led << "k,du,dp\n";
    for (std::size_t k = 0; k < L.du.size(); ++k) led << k << ',' << num(L.du[k]) << ',' << num(L.dp[k]) << '\n';
    out.write("ledger.csv", led.str());

    json r = {{"command", "simulate"}, {"ledger", ledger_json(L, s.tol.contraction)}};
    if (auto w = s.pb.cfg.scaling_warning()) r["warnings"] = {*w};
    return r;
}

BoundaryVibration boundary(const Scenario& s, std::optional<IterateLedger>& L, const Log& log) {
    BoundaryVibration bv;
    if (s.vibration) {
        for (const auto& a : s.vibration->second) bv.u.push_back(std::make_shared<HarmonicSignal>(a, s.vibration->first));
        return bv;
    }
    log("picard: boundary motion from the coupled solve");
    L = picard_iterate(s.pb, picard_options(s));
    for (const auto& u : L->last().u) bv.u.push_back(u.series());
    return bv;
}

json cmd_eigs(const Scenario& s, const Log& log) {
    std::optional<IterateLedger> L;
    const BoundaryVibration bv = boundary(s, L, log);
    const BoundarySnapshot snap = snapshot(bv, s.diag_time, s.fd_step);
    OperatorOptions oo;
    oo.c = s.pb.medium.c;
    const PerturbationOperators P = assemble_operators(s.pb.model, snap, s.metric, oo);
    const SpectralBasis& cav = *s.pb.model.cavity;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(P.lambda.asDiagonal()) - P.V);
    json modes = json::array();
    for (Eigen::Index n = 0; n < P.lambda.size(); ++n) {
        json m = {{"index", cav.mode(static_cast<std::size_t>(n)).index}, {"lambda", P.lambda[n]}};
        try {
            m["shift1"] = eigenvalue_shift(n, P.V, P.lambda, 1);
            m["shift2"] = eigenvalue_shift(n, P.V, P.lambda, 2);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::degenerate_eigenvalue) throw;
            m["shift1"] = nullptr;
            m["shift2"] = nullptr;
            m["degenerate"] = true;
        }
        modes.push_back(m);
    }
    std::vector<double> dense(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
    const double rv = P.relative_norm_V(), rt = P.relative_norm_T(s.pb.src.omega);
    return {{"command", "eigs"},
            {"time", s.diag_time},
            {"metric", s.metric == MetricModel::quadratic ? "quadratic" : "full_pullback"},
            {"relative_norm_V", rv},
            {"relative_norm_T", rt},
            {"modes", modes},
            {"dense_eigenvalues", dense},
            {"perturbative", rv <= s.tol.perturbative && rt <= s.tol.perturbative},
            {"pass", rv <= s.tol.perturbative && rt <= s.tol.perturbative}};
}

json cmd_magnus(const Scenario& s) {
    if (s.magnus_coeffs.empty()) throw ConfigError{1, "magnus-check needs a magnus block"};
    const auto coeffs = s.magnus_coeffs;
    const TimeDependentGenerator gen{[coeffs](double t) {
                                         Eigen::MatrixXd A = coeffs[0];
                                         double tk = 1.0;
                                         for (std::size_t k = 1; k < coeffs.size(); ++k) A += (tk *= t) * coeffs[k];
                                         return A;
                                     },
                                     static_cast<int>(coeffs[0].rows())};
    const auto cert = convergence_certificate(gen, s.magnus_tau, s.magnus_t);
    const MagnusGenerator G = magnus_terms(gen, s.magnus_tau, s.magnus_t, s.magnus_order);
    const Eigen::MatrixXd Y = oracle::ode_propagator(gen, s.magnus_tau, s.magnus_t);
    std::vector<double> err;
    for (int k = 1; k <= s.magnus_order; ++k) err.push_back((matrix_exponential(G.sum(k)) - Y).norm() / Y.norm());
    bool mono = true;
    for (std::size_t k = 1; k < err.size(); ++k) mono = mono && err[k] < err[k - 1];
    return {{"command", "magnus-check"},
            {"certificate", cert.value},
            {"certificate_ok", cert.ok},
            {"relative_error_by_order", err},
            {"monotone", mono},
            {"pass", cert.ok && err.back() <= s.tol.magnus}};
}

json piston_json(const PistonReport& r, double c_max) {
    return {{"ratio", r.ratio},
            {"bound", r.bound},
            {"ratio_per_patch", r.ratio_per_patch},
            {"bound_per_patch", r.bound_per_patch},
            {"c_piston", r.c_piston},
            {"c_max", c_max},
            {"leading_order", r.leading_order},
            {"deviation", r.deviation},
            {"within_bound", r.within_bound},
            {"consistent", r.leading_order == (r.c_piston < c_max)}};
}

json cmd_piston(const Scenario& s, const Log& log) {
    PistonReport r;
    if (s.vibration) {
        std::optional<IterateLedger> none;
        r = piston_pipeline(s.pb.model, boundary(s, none, log), s.pb.medium, s.pb.grid, s.pb.cfg.eps, s.tol.c_max);
    } else {
        log("picard: boundary motion from the coupled solve");
        r = piston_pipeline(s.pb, picard_iterate(s.pb, picard_options(s)), s.tol.c_max);
    }
    json j = piston_json(r, s.tol.c_max);
    j["command"] = "piston";
    j["pass"] = r.within_bound && j["consistent"].get<bool>();
    return j;
}

json cmd_validate(const Scenario& s, Outputs& out, const Log& log) {
    if (s.pb.model.geom.dim() != 1) throw ConfigError{1, "validate needs a one-dimensional geometry (geometry.edges)"};
    log("picard: " + std::to_string(s.k_max) + " iterations");
    const IterateLedger L = picard_iterate(s.pb, picard_options(s));
    log("oracle: " + std::to_string(s.oracle_cells) + " cells");
    oracle::OracleConfig oc;
    oc.cells = s.oracle_cells;
    oc.cfl = s.oracle_cfl;
    const auto F = oracle::fdtd_coupled_oracle(s.pb.cfg, s.pb.src, s.pb.model.geom, s.pb.op, s.pb.lapse, s.pb.medium.c,
                                               s.pb.grid, oc);
    std::vector<std::vector<double>> nodes;
    for (double x : F.x) nodes.push_back({x});
    const Eigen::MatrixXcd p = probe_values(*s.pb.model.cavity, L.last().p, nodes);
    Eigen::MatrixXcd u(s.pb.grid.size(), static_cast<Eigen::Index>(L.last().u.size()));
    for (std::size_t i = 0; i < L.last().u.size(); ++i) {
        // mean displacement of each patch
        const Eigen::VectorXd m = detail::patch_mode_integrals(*s.pb.model.patches[i]) /
                                  s.pb.model.patches[i]->measure();
        u.col(static_cast<Eigen::Index>(i)) = L.last().u[i].value * m.cast<cplx>();
    }
    const double ep = (p - F.p).norm() / F.p.norm();
    const double eu = (u - F.u).norm() / F.u.norm();

    std::vector<std::string> names;
    for (std::size_t j = 0; j < F.x.size(); j += std::max<std::size_t>(1, F.x.size() / 16))
        names.push_back("x_" + num(F.x[j]));
    Eigen::MatrixXcd sub(F.p.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t j = 0, c = 0; c < names.size(); j += std::max<std::size_t>(1, F.x.size() / 16), ++c)
        sub.col(static_cast<Eigen::Index>(c)) = F.p.col(static_cast<Eigen::Index>(j));
    out.write("oracle_pressure.csv", csv_series(F.grid, names, {&sub}));

    return {{"command", "validate"},
            {"pressure_rel_error", ep},
            {"displacement_rel_error", eu},
            {"oracle_cells", s.oracle_cells},
            {"oracle_dt", F.dt},
            {"tolerance", s.tol.oracle_rel},
            {"ledger", ledger_json(L, s.tol.contraction)},
            {"pass", ep <= s.tol.oracle_rel && eu <= s.tol.oracle_rel}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral cavity/membrane vibro-acoustics"};
    app.require_subcommand(1);
    std::string config;
    std::optional<std::string> out_dir;
    std::optional<int> modes;
    bool quiet = false;

    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"simulate", "run the Picard-coupled solve and write time series"},
        {"eigs", "perturbation operators and eigenvalue shifts"},
        {"magnus-check", "Magnus expansion against an ODE propagator"},
        {"piston", "piston approximation and Poincare bound"},
        {"validate", "coupled solve against the finite-difference oracle (1D)"},
    };
    for (const auto& [name, desc] : cmds) {
        CLI::App* c = app.add_subcommand(name, desc);
        c->add_option("--config", config, "JSON scenario file")->required();
        c->add_option("--out", out_dir, "output directory (overrides output.dir)");
        c->add_option("--modes", modes, "cavity modes per axis (overrides numerics.cavity_modes)")
            ->check(CLI::Range(1, 10000));
        c->add_flag("--quiet", quiet, "no progress output");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : Exit::config_error;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    const Log log = [&](const std::string& m) {
        if (!quiet) std::cerr << command << ": " << m << '\n';
    };

    std::ifstream f(config, std::ios::binary);
    if (!f) {
        std::cerr << config << ":1: cannot read config file\n";
        return Exit::config_error;
    }
    std::stringstream ss;
    ss << f.rdbuf();
    const Source src(config, ss.str());

    try {
        const Scenario s = load(src, modes, out_dir);
        if (auto w = s.pb.cfg.scaling_warning(); w && !quiet) std::cerr << command << ": warning: " << *w << '\n';
        Outputs out(s.out_dir);
        json report;
        if (command == "simulate") report = cmd_simulate(s, out, log);
        else if (command == "eigs") report = cmd_eigs(s, log);
        else if (command == "magnus-check") report = cmd_magnus(s);
        else if (command == "piston") report = cmd_piston(s, log);
        else report = cmd_validate(s, out, log);
        const std::string report_name = command == "simulate" ? "report.json" : command + ".json";
        out.write_json(report_name, report);
        out.write_json("manifest.json", manifest(s, command, out));
        if (!quiet) {
            std::cout << command << ": wrote " << out.dir().string() << '\n';
            if (report.contains("pass")) std::cout << command << ": " << (report["pass"].get<bool>() ? "pass" : "fail") << '\n';
        }
        return Exit::ok;
    } catch (const ConfigError& e) {
        std::cerr << src.path() << ':' << e.line << ": " << e.message << '\n';
        return Exit::config_error;
    } catch (const Error& e) {
        std::cerr << command << ": numeric failure: " << e.what() << '\n';
        return Exit::numeric_failure;
    } catch (const std::exception& e) {
        std::cerr << command << ": numeric failure: " << e.what() << '\n';
        return Exit::numeric_failure;
    }
}
