#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ghostlab/dose.hpp"
#include "ghostlab/errors.hpp"
#include "ghostlab/ghostcore.hpp"
#include "ghostlab/inverse.hpp"
#include "ghostlab/io.hpp"
#include "ghostlab/orthonorm.hpp"
#include "ghostlab/parallel.hpp"
#include "ghostlab/randbasis.hpp"
#include "ghostlab/xpci.hpp"

namespace fs = std::filesystem;
using ghostlab::json;
using namespace ghostlab;

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kSchema = 2, kQuality = 3, kIo = 4 };

/// A config value that does not match the command's schema.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Unparseable config text; reported as a schema failure with its offset.
class ConfigSyntaxError : public FormatError {
public:
    using FormatError::FormatError;
};

// ---------------------------------------------------------------------------
// Defaults double as the schema: a config may only contain keys present here,
// with values of a compatible JSON type.
// ---------------------------------------------------------------------------

json grid_block(std::size_t rows, std::size_t cols, double pitch = 1.0)
{
    return {{"rows", rows}, {"cols", cols}, {"pitch", pitch}};
}

json distribution_block()
{
    return {{"kind", "uniform"}, {"lo", -0.5}, {"hi", 0.5},       {"mean", 0.0},
            {"sd", 1.0},         {"rate", 1.0}, {"value", 0.0},   {"zero_centered", false}};
}

json target_block(const std::string& kind)
{
    return {{"kind", kind}, {"path", ""}, {"low", 0.0}, {"high", 1.0}, {"period", 4u}};
}

json material_block(const std::string& name)
{
    return {{"name", name}, {"table", ""}, {"energy_kev", kFormFactorEnergyKeV}};
}

json phantom_block(const std::string& layout)
{
    return {{"layout", layout}, {"ellipsoids", json::array()}};
}

json rocking_block()
{
    return {{"R0", 1.0}, {"M", 2.3737}, {"a", 0.7146}, {"relative_reflectivity", 0.5}, {"side", "positive"}};
}

json inversion_block()
{
    const FilterSpec d;
    return {{"enabled", true},
            {"symbol", "discrete"},
            {"pad", 0u},
            {"floor_fraction", d.floor_fraction},
            {"max_clamped_fraction", d.max_clamped_fraction}};
}

json common_block(json body)
{
    body["seed"] = 1u;
    body["out"] = "ghostlab_out";
    body["format"] = "f64";
    body["threads"] = 0u;
    return body;
}

const std::map<std::string, std::string>& command_help()
{
    static const std::map<std::string, std::string> h{
        {"basis-gen", "Generate a random-matrix basis (optionally orthonormalized) as grid files"},
        {"basis-stats", "Orthogonality, completeness and ergodicity statistics of a random basis"},
        {"synth", "Synthesize a target from random-basis weights"},
        {"ghost-sim", "Classical ghost imaging of a target with random or orthonormal masks"},
        {"dose-compare", "Dose inequality between ghost and direct imaging"},
        {"phantom-gen", "Projected thickness of ellipsoid phantoms"},
        {"material-delta", "Refractive-index decrement and attenuation of a material"},
        {"xpci-forward", "Analyzer-based phase-contrast forward model of a phantom"},
        {"xpci-sim", "Phase-contrast ghost imaging simulation with speckle masks"},
        {"xpci-invert", "Recover projected thickness from a phase-contrast ghost image"},
    };
    return h;
}

json command_defaults(const std::string& cmd)
{
    if (cmd == "basis-gen")
        return common_block({{"grid", grid_block(8, 8)},
                             {"distribution", distribution_block()},
                             {"basis", {{"count", 16u}, {"orthonormalize", false}, {"augment", true}}}});
    if (cmd == "basis-stats")
        return common_block({{"grid", grid_block(16, 16)},
                             {"distribution", distribution_block()},
                             {"basis", {{"count", 256u}}},
                             {"pixel", {{"row", 0u}, {"col", 0u}}}});
    if (cmd == "synth")
        return common_block({{"grid", grid_block(32, 32)},
                             {"distribution", distribution_block()},
                             {"target", target_block("textured")},
                             {"basis", {{"count", 1024u}, {"mode", "random"}, {"augment", true}}}});
    if (cmd == "ghost-sim") {
        json d = distribution_block();
        d["lo"] = 0.0;
        d["hi"] = 1.0;
        return common_block({{"grid", grid_block(16, 16)},
                             {"distribution", d},
                             {"target", target_block("textured")},
                             {"basis", {{"count", 4096u}, {"mode", "standard"}}},
                             {"noise", {{"lambda_tilde", 0.0}}}});
    }
    if (cmd == "dose-compare")
        return common_block({{"grid", grid_block(8, 8)},
                             {"distribution", distribution_block()},
                             {"target", target_block("textured")},
                             {"noise", {{"lambda_tilde", 1000.0}}},
                             {"monte_carlo", {{"trials", 0u}}}});
    if (cmd == "phantom-gen")
        return common_block({{"grid", grid_block(64, 64)}, {"phantom", phantom_block("single")}});
    if (cmd == "material-delta") return common_block({{"material", material_block("carbon")}});
    if (cmd == "xpci-forward")
        return common_block({{"grid", grid_block(64, 64)},
                             {"phantom", phantom_block("single")},
                             {"material", material_block("carbon")},
                             {"rocking", rocking_block()},
                             {"source", {{"I0", 1.0}}},
                             {"derivative", "central"}});
    if (cmd == "xpci-sim")
        return common_block(
            {{"grid", grid_block(64, 64)},
             {"phantom", phantom_block("single")},
             {"material", material_block("carbon")},
             {"rocking", rocking_block()},
             {"source", {{"I0", 1.0}}},
             {"derivative", "central"},
             {"mask",
              {{"kind", "smoothed"},
               {"material", "copper"},
               {"peak_thickness_mm", 0.25},
               {"sigma_px", 2.0 / 3.0},
               {"pad", 0u},
               {"open_beam", false}}},
             {"buckets", {{"per_pixel", 16.0}}},
             {"noise", {{"lambda_tilde", 0.0}}},
             {"reconstruction", {{"mode", "standard"}, {"normalization", "psf_gain"}, {"gram_schmidt_per_pixel", 0.0}}},
             {"inversion", inversion_block()},
             {"absorption_ghost", true},
             {"histogram_bins", 41u}});
    if (cmd == "xpci-invert")
        return common_block({{"input", {{"path", ""}, {"I0", 1.0}}},
                             {"material", material_block("carbon")},
                             {"rocking", rocking_block()},
                             {"inversion", inversion_block()}});
    throw SchemaError("unknown command '" + cmd + "'");
}

struct Preset {
    std::string command;
    std::string description;
    json patch;
};

const std::map<std::string, Preset>& presets()
{
    static const std::map<std::string, Preset> p{
        {"single-ellipsoid",
         {"xpci-sim",
          "Idealized single carbon ellipsoid, 64x64 mm, i.i.d. speckle, N = 16 nm, Gram-Schmidt at N = 0.5 nm",
          {{"grid", grid_block(64, 64)},
           {"phantom", {{"layout", "single"}}},
           {"mask", {{"kind", "iid"}}},
           {"buckets", {{"per_pixel", 16.0}}},
           {"noise", {{"lambda_tilde", 0.0}}},
           {"reconstruction", {{"mode", "standard"}, {"gram_schmidt_per_pixel", 0.5}}},
           {"inversion", {{"enabled", false}}},
           {"absorption_ghost", false}}}},
        {"ten-ellipsoids",
         {"xpci-sim",
          "Ten carbon ellipsoids scaled to 32x32 at 2 mm pitch, smoothed speckle, N = 16 nm, lambda = 1e8",
          {{"grid", grid_block(32, 32, 2.0)},
           {"phantom", {{"layout", "ten"}}},
           {"mask", {{"kind", "smoothed"}}},
           {"buckets", {{"per_pixel", 16.0}}},
           {"noise", {{"lambda_tilde", 1e8}}}}}},
        {"ten-ellipsoids-full",
         {"xpci-sim",
          "Ten carbon ellipsoids, 64x64 mm, smoothed speckle, N = 64 nm, lambda = 1e8 (long running)",
          {{"grid", grid_block(64, 64)},
           {"phantom", {{"layout", "ten"}}},
           {"mask", {{"kind", "smoothed"}}},
           {"buckets", {{"per_pixel", 64.0}}},
           {"noise", {{"lambda_tilde", 1e8}}}}}},
    };
    return p;
}

bool type_compatible(const json& schema, const json& value)
{
    if (schema.is_number_unsigned()) return value.is_number_unsigned();
    if (schema.is_number()) return value.is_number();
    if (schema.is_boolean()) return value.is_boolean();
    if (schema.is_string()) return value.is_string();
    if (schema.is_array()) return value.is_array();
    if (schema.is_object()) return value.is_object();
    return false;
}

std::string json_type_name(const json& v)
{
    if (v.is_number_unsigned()) return "non-negative integer";
    if (v.is_number()) return "number";
    return v.type_name();
}

void check_schema(const json& schema, const json& value, const std::string& where)
{
    if (!type_compatible(schema, value))
        throw SchemaError("'" + where + "' must be a " + json_type_name(schema) + ", got " + value.dump());
    if (!schema.is_object()) return;
    for (const auto& [key, v] : value.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!schema.contains(key)) throw SchemaError("unknown key '" + path + "'");
        check_schema(schema.at(key), v, path);
    }
}

json parse_json_text(const std::string& text, const std::string& origin)
{
    try {
        return json::parse(text);
    }
    catch (const json::parse_error& e) {
        throw ConfigSyntaxError(e.byte, origin + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Typed accessors over a validated config
// ---------------------------------------------------------------------------

template <class T>
T get(const json& cfg, const std::string& block, const std::string& key)
{
    return cfg.at(block).at(key).get<T>();
}

std::size_t positive(std::size_t v, const std::string& what)
{
    if (v < 1) throw SchemaError(what + " must be >= 1");
    return v;
}

struct Grid {
    std::size_t rows, cols;
    double pitch;
    [[nodiscard]] std::size_t pixels() const { return rows * cols; }
};

Grid grid_of(const json& cfg)
{
    Grid g{positive(get<std::size_t>(cfg, "grid", "rows"), "grid.rows"),
           positive(get<std::size_t>(cfg, "grid", "cols"), "grid.cols"), get<double>(cfg, "grid", "pitch")};
    if (!(g.pitch > 0) || !std::isfinite(g.pitch)) throw SchemaError("grid.pitch must be > 0");
    return g;
}

DistributionSpec distribution_of(const json& cfg)
{
    const json& d = cfg.at("distribution");
    const auto kind = d.at("kind").get<std::string>();
    const bool zc = d.at("zero_centered").get<bool>();
    DistributionSpec spec;
    if (kind == "uniform")
        spec = DistributionSpec::uniform(d.at("lo").get<double>(), d.at("hi").get<double>(), zc);
    else if (kind == "gaussian")
        spec = DistributionSpec::gaussian(d.at("mean").get<double>(), d.at("sd").get<double>(), zc);
    else if (kind == "poisson")
        spec = DistributionSpec::poisson(d.at("rate").get<double>());
    else if (kind == "point_mass")
        spec = DistributionSpec::point_mass(d.at("value").get<double>());
    else
        throw SchemaError("distribution.kind must be uniform, gaussian, poisson or point_mass");
    spec.validate();
    return spec;
}

ImageGrid textured(const Grid& g)
{
    ImageGrid f(g.rows, g.cols, g.pitch);
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) {
            const double x = static_cast<double>(j) / static_cast<double>(g.cols);
            const double y = static_cast<double>(i) / static_cast<double>(g.rows);
            double v = 0.5 + 0.25 * std::sin(6.0 * x + 1.0) * std::cos(4.0 * y);
            if (i > g.rows / 4 && i < g.rows / 2 && j > g.cols / 3 && j < 2 * g.cols / 3) v += 0.15;
            f(i, j) = std::clamp(v, 0.1, 0.9);
        }
    return f;
}

struct Inputs {
    std::vector<fs::path> files;
};

ImageGrid target_of(const json& cfg, const Grid& g, Inputs& inputs)
{
    const json& t = cfg.at("target");
    const auto kind = t.at("kind").get<std::string>();
    const double lo = t.at("low").get<double>(), hi = t.at("high").get<double>();
    if (kind == "textured") return textured(g);
    if (kind == "checkerboard") {
        const std::size_t period = positive(t.at("period").get<std::size_t>(), "target.period");
        ImageGrid f(g.rows, g.cols, g.pitch);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) f(i, j) = ((i / period + j / period) % 2) ? hi : lo;
        return f;
    }
    if (kind == "ellipsoid") {
        const double r = 0.4 * static_cast<double>(std::min(g.rows, g.cols)) * g.pitch;
        ImageGrid f = phantom_ellipsoids(g.rows, g.cols, g.pitch, {{0.0, 0.0, 1.0, r}}).thickness;
        const double peak = f.max();
        for (double& v : f.values()) v = lo + (hi - lo) * v / peak;
        return f;
    }
    if (kind == "file") {
        const fs::path path = t.at("path").get<std::string>();
        if (path.empty()) throw SchemaError("target.path is required when target.kind is file");
        ImageGrid f = load_grid(path);
        inputs.files.push_back(path);
        if (fs::exists(sidecar_path(path))) inputs.files.push_back(sidecar_path(path));
        if (f.rows() != g.rows || f.cols() != g.cols)
            throw SchemaError("target file is " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                              " but grid is " + std::to_string(g.rows) + "x" + std::to_string(g.cols));
        return f;
    }
    throw SchemaError("target.kind must be textured, checkerboard, ellipsoid or file");
}

std::vector<Material> material_table(const json& cfg, Inputs& inputs)
{
    const auto table = cfg.at("material").at("table").get<std::string>();
    if (table.empty()) return builtin_materials();
    inputs.files.emplace_back(table);
    return load_material_table(table);
}

MaterialOptics sample_optics(const json& cfg, const std::vector<Material>& table)
{
    const double e = get<double>(cfg, "material", "energy_kev");
    return optics(find_material(table, get<std::string>(cfg, "material", "name")), e);
}

RockingCurve rocking_of(const json& cfg)
{
    const json& r = cfg.at("rocking");
    const auto side = r.at("side").get<std::string>();
    if (side != "positive" && side != "negative") throw SchemaError("rocking.side must be positive or negative");
    return linearize_rocking(r.at("R0").get<double>(), r.at("M").get<double>(), r.at("a").get<double>(),
                             r.at("relative_reflectivity").get<double>(),
                             side == "positive" ? WorkingSide::positive : WorkingSide::negative);
}

std::vector<EllipsoidSpec> layout_of(const json& cfg)
{
    const json& p = cfg.at("phantom");
    const auto layout = p.at("layout").get<std::string>();
    if (layout == "single") return single_ellipsoid_layout();
    if (layout == "ten") return ten_ellipsoid_layout();
    if (layout != "custom") throw SchemaError("phantom.layout must be single, ten or custom");
    std::vector<EllipsoidSpec> out;
    const EllipsoidSpec d;
    const json schema = {{"cx", d.cx}, {"cy", d.cy}, {"aleph", d.aleph}, {"radius", d.radius}};
    std::size_t k = 0;
    for (const auto& e : p.at("ellipsoids")) {
        const std::string where = "phantom.ellipsoids[" + std::to_string(k++) + "]";
        check_schema(schema, e, where);
        json full = schema;
        full.merge_patch(e);
        out.push_back({full["cx"].get<double>(), full["cy"].get<double>(), full["aleph"].get<double>(),
                       full["radius"].get<double>()});
    }
    if (out.empty()) throw SchemaError("phantom.ellipsoids must list at least one ellipsoid for a custom layout");
    return out;
}

DerivativeScheme derivative_of(const json& cfg)
{
    const auto s = cfg.at("derivative").get<std::string>();
    if (s == "central") return DerivativeScheme::central;
    if (s == "spectral") return DerivativeScheme::spectral;
    throw SchemaError("derivative must be central or spectral");
}

FilterSpec filter_of(const json& cfg, const PCCGIConstants& k, double mu)
{
    const json& b = cfg.at("inversion");
    FilterSpec f;
    f.C = k.C;
    f.G = k.G;
    f.mu = mu;
    const auto symbol = b.at("symbol").get<std::string>();
    if (symbol == "discrete")
        f.symbol = FilterSymbol::discrete;
    else if (symbol == "continuous")
        f.symbol = FilterSymbol::continuous;
    else
        throw SchemaError("inversion.symbol must be discrete or continuous");
    f.pad = b.at("pad").get<std::size_t>();
    f.floor_fraction = b.at("floor_fraction").get<double>();
    f.max_clamped_fraction = b.at("max_clamped_fraction").get<double>();
    f.validate();
    return f;
}

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

json image_summary(const ImageGrid& g)
{
    return {{"min", g.min()}, {"max", g.max()}, {"mean", g.mean()}, {"rms", rms(g)}};
}

// ---------------------------------------------------------------------------
// Run context: output directory, grid writer and manifest
// ---------------------------------------------------------------------------

class Run {
public:
    Run(std::string command, json config)
        : command_(std::move(command)),
          config_(std::move(config)),
          out_(config_.at("out").get<std::string>()),
          format_(parse_grid_format(config_.at("format").get<std::string>())),
          manifest_(command_, config_)
    {
        std::error_code ec;
        fs::create_directories(out_, ec);
        if (ec || !fs::is_directory(out_))
            throw IoError("cannot create output directory '" + out_.string() + "': " + ec.message());
    }

    [[nodiscard]] const json& config() const { return config_; }
    [[nodiscard]] std::uint64_t seed() const { return config_.at("seed").get<std::uint64_t>(); }
    [[nodiscard]] const fs::path& out() const { return out_; }

    void grid(const std::string& stem, const ImageGrid& g, const std::string& units)
    {
        const fs::path path = grid_path(out_, stem, format_);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        save_grid(g, path, units);
        const std::string key = path.lexically_relative(out_).generic_string();
        manifest_.add_grid_output(path, key);
        names_.push_back(key);
    }

    void text(const std::string& name, const std::string& body)
    {
        const fs::path path = out_ / name;
        write_file(path, body);
        manifest_.add_output(path);
    }

    void input(const fs::path& path) { manifest_.add_input(path); }

    void finish(json report)
    {
        report["command"] = command_;
        report["grids"] = names_;
        const std::string body = report.dump(2) + "\n";
        text("report.json", body);
        manifest_.write(out_);
        std::cout << report.dump() << "\n";
    }

private:
    std::string command_;
    json config_;
    fs::path out_;
    GridFormat format_;
    Manifest manifest_;
    std::vector<std::string> names_;
};

std::string member_stem(const std::string& dir, std::size_t k)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s/%05zu", dir.c_str(), k);
    return buf;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

json cmd_basis_gen(Run& run, Inputs&)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto count = positive(get<std::size_t>(cfg, "basis", "count"), "basis.count");
    if (count > 4096) throw SchemaError("basis-gen writes one file per member; basis.count must be <= 4096");
    const auto basis = gen_random_basis(g.rows, g.cols, count, distribution_of(cfg), run.seed());
    for (std::size_t k = 0; k < count; ++k) {
        ImageGrid m = basis[k];
        m = ImageGrid(g.rows, g.cols, g.pitch, std::move(m).values());
        run.grid(member_stem("members", k), m, "");
    }
    json report{{"members", count}, {"mean", basis.dist().mean()}, {"variance", basis.dist().variance()}};
    if (get<bool>(cfg, "basis", "orthonormalize")) {
        const auto onb = orthonormalize(basis, get<bool>(cfg, "basis", "augment"));
        for (std::size_t k = 0; k < onb.size(); ++k)
            run.grid(member_stem("orthonormal", k), ImageGrid(g.rows, g.cols, g.pitch, onb[k].vector()), "");
        report["orthonormal_members"] = onb.size();
        report["gram_residual"] = onb.gram_residual();
    }
    return report;
}

json cmd_basis_stats(Run& run, Inputs&)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto count = positive(get<std::size_t>(cfg, "basis", "count"), "basis.count");
    const auto basis = gen_random_basis(g.rows, g.cols, count, distribution_of(cfg), run.seed());
    const auto i = get<std::size_t>(cfg, "pixel", "row"), j = get<std::size_t>(cfg, "pixel", "col");
    if (i >= g.rows || j >= g.cols) throw SchemaError("pixel lies outside the grid");
    const auto s = orthogonality_stats(basis);
    const auto e = ergodicity_check(basis);
    ImageGrid map = completeness_map(basis, i, j);
    run.grid("completeness", ImageGrid(g.rows, g.cols, g.pitch, std::move(map).values()), "");
    return {{"orthogonality",
             {{"offdiag_mean", s.offdiag_mean},
              {"offdiag_var", s.offdiag_var},
              {"diag_mean", s.diag_mean},
              {"diag_var", s.diag_var},
              {"predicted_offdiag_mean", s.predicted_offdiag_mean},
              {"predicted_offdiag_var", s.predicted_offdiag_var},
              {"predicted_diag_mean", s.predicted_diag_mean},
              {"predicted_diag_var", s.predicted_diag_var},
              {"offdiag_pairs", s.offdiag_pairs}}},
            {"ergodicity",
             {{"max_spatial_mean_dev", e.max_spatial_mean_dev},
              {"max_spatial_var_dev", e.max_spatial_var_dev},
              {"max_ensemble_mean_dev", e.max_ensemble_mean_dev},
              {"max_ensemble_var_dev", e.max_ensemble_var_dev},
              {"max_standard_error", e.max_se()},
              {"rms_spatial_mean_dev", e.rms_spatial_mean_dev}}}};
}

json cmd_synth(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto count = positive(get<std::size_t>(cfg, "basis", "count"), "basis.count");
    const auto mode = get<std::string>(cfg, "basis", "mode");
    const auto dist = distribution_of(cfg);
    const ImageGrid f = target_of(cfg, g, inputs);
    run.grid("target", f, "");
    json report{{"members", count}, {"mode", mode}};
    ImageGrid image;
    if (mode == "random") {
        image = synthesize(f, LazyBasis(RandomBasisSpec{g.rows, g.cols, count, dist, run.seed()})).image;
        const auto snr = predict_snr(f, count);
        report["predicted_variance"] = synthesis_variance_approx(f, count);
        report["predicted_snr_global"] = snr.snr_global;
    }
    else if (mode == "gram_schmidt") {
        const bool augment = get<bool>(cfg, "basis", "augment");
        const std::size_t random_members = augment ? count - 1 : count;
        if (random_members < 1) throw SchemaError("basis.count must leave at least one random member");
        const auto onb = orthonormalize(gen_random_basis(g.rows, g.cols, random_members, dist, run.seed()), augment);
        image = reconstruct_gs(f, onb, onb.size());
        if (augment) report["predicted_variance"] = predict_variance_gs(f, onb.size()).variance;
    }
    else {
        throw SchemaError("basis.mode must be random or gram_schmidt");
    }
    image = ImageGrid(g.rows, g.cols, g.pitch, std::move(image).values());
    run.grid("synthesized", image, "");
    const double err = rms_difference(image, f);
    report["rms_error"] = err;
    report["empirical_variance"] = err * err;
    report["empirical_snr_global"] = err > 0 ? rms(f) / err : std::numeric_limits<double>::infinity();
    return report;
}

json cmd_ghost_sim(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto count = positive(get<std::size_t>(cfg, "basis", "count"), "basis.count");
    const auto mode = get<std::string>(cfg, "basis", "mode");
    const double lambda = get<double>(cfg, "noise", "lambda_tilde");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw SchemaError("noise.lambda_tilde must be >= 0 (0 = noise free)");
    const auto dist = distribution_of(cfg);
    const ImageGrid f = target_of(cfg, g, inputs);
    run.grid("target", f, "");
    json report{{"members", count}, {"mode", mode}, {"lambda_tilde", lambda}};
    ImageGrid image;
    if (mode == "standard") {
        if (!(dist.variance() > 0)) throw SchemaError("standard ghost imaging needs a distribution with Var[R] > 0");
        const LazyBasis masks(RandomBasisSpec{g.rows, g.cols, count, dist, run.seed()});
        const auto buckets =
            lambda > 0 ? acquire_pccgi_buckets(f, masks, 1.0, ShotNoise{lambda, splitmix64(run.seed()), 0})
                       : acquire_buckets(f, masks);
        image = gi_standard(buckets, masks, dist.variance(), g.rows, g.cols, g.pitch);
    }
    else if (mode == "orthonormal") {
        if (count > g.pixels()) throw SchemaError("orthonormal mode needs basis.count <= rows * cols");
        if (count < 2) throw SchemaError("orthonormal mode needs basis.count >= 2");
        const auto onb = orthonormalize(gen_random_basis(g.rows, g.cols, count - 1, dist, run.seed()), true);
        const auto masks = to_masks(onb);
        image = lambda > 0 ? ghost_image_noisy(f, masks, onb, lambda, splitmix64(run.seed()))
                           : gi_orthonormal(basis_readings(f, masks), onb, *masks.eta);
        if (lambda > 0 && count == g.pixels()) {
            const auto v = ghost_variance(f, masks, onb, lambda);
            report["predicted_total_variance"] = v.full;
            report["direct_total_variance"] = direct_variance(f, lambda);
        }
    }
    else {
        throw SchemaError("basis.mode must be standard or orthonormal");
    }
    image = ImageGrid(g.rows, g.cols, g.pitch, std::move(image).values());
    run.grid("ghost", image, "");
    report["rms_error"] = rms_difference(image, f);
    report["image"] = image_summary(image);
    return report;
}

json cmd_dose_compare(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    if (g.pixels() < 2) throw SchemaError("dose-compare needs at least two pixels");
    const double lambda = get<double>(cfg, "noise", "lambda_tilde");
    const auto trials = get<std::size_t>(cfg, "monte_carlo", "trials");
    const ImageGrid f = target_of(cfg, g, inputs);
    run.grid("target", f, "");
    const auto onb = orthonormalize(gen_random_basis(g.rows, g.cols, g.pixels() - 1, distribution_of(cfg), run.seed()), true);
    const auto masks = to_masks(onb);
    const auto r = dose_inequality(f, masks, onb, lambda);
    json report{{"lambda_tilde", lambda},
                {"var_direct", r.var_direct},
                {"var_ghost_full", r.var_ghost_full},
                {"var_ghost_simplified", r.var_ghost_simplified},
                {"lhs", r.lhs},
                {"rhs", r.rhs},
                {"omega", r.omega},
                {"eta", *masks.eta},
                {"xi", masks.xi},
                {"ghost_favorable", r.ghost_favorable}};
    if (trials >= 2) {
        auto total_variance = [&](auto&& draw) {
            std::vector<double> s(f.size(), 0.0), s2(f.size(), 0.0);
            for (std::size_t t = 0; t < trials; ++t) {
                const ImageGrid img = draw(t);
                for (std::size_t p = 0; p < f.size(); ++p) {
                    s[p] += img[p];
                    s2[p] += img[p] * img[p];
                }
            }
            CompensatedSum v;
            const double n = static_cast<double>(trials);
            for (std::size_t p = 0; p < f.size(); ++p) v.add((s2[p] - s[p] * s[p] / n) / (n - 1.0));
            return v.value();
        };
        const std::uint64_t base = splitmix64(run.seed());
        const double mc_direct =
            total_variance([&](std::size_t t) { return direct_image_noisy(f, lambda, splitmix64(base + 2 * t)); });
        const double mc_ghost = total_variance(
            [&](std::size_t t) { return ghost_image_noisy(f, masks, onb, lambda, splitmix64(base + 2 * t + 1)); });
        report["monte_carlo"] = {{"trials", trials},
                                 {"var_direct", mc_direct},
                                 {"var_ghost", mc_ghost},
                                 {"ghost_favorable", mc_ghost < mc_direct},
                                 {"agrees_with_analytic", (mc_ghost < mc_direct) == r.ghost_favorable}};
    }
    return report;
}

json cmd_phantom_gen(Run& run, Inputs&)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto ph = phantom_ellipsoids(g.rows, g.cols, g.pitch, layout_of(cfg));
    run.grid("thickness", ph.thickness, "mm");
    std::size_t support = 0;
    for (double v : ph.thickness.values()) support += v > 0;
    json e = json::array();
    for (const auto& s : ph.ellipsoids) e.push_back({{"cx", s.cx}, {"cy", s.cy}, {"aleph", s.aleph}, {"radius", s.radius}});
    return {{"ellipsoids", e}, {"support_pixels", support}, {"thickness", image_summary(ph.thickness)}};
}

json cmd_material_delta(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const auto table = material_table(cfg, inputs);
    const Material& m = find_material(table, get<std::string>(cfg, "material", "name"));
    const double e = get<double>(cfg, "material", "energy_kev");
    json report = to_json(m);
    report["energy_kev"] = e;
    report["delta"] = material_delta(m, e);
    return report;
}

/// Records an inversion that clamped too many pixels; the run still writes its
/// artefacts and manifest before exiting with the quality code.
void quality_failure(json& report, const InversionResult& inv, const FilterSpec& spec)
{
    try {
        require_quality(inv, spec);
    }
    catch (const QualityError& e) {
        report["quality_error"] = e.what();
    }
}

json rocking_summary(const RockingCurve& rc, const PCCGIConstants& k)
{
    return {{"theta0_urad", rc.theta0}, {"alpha", rc.alpha}, {"beta_per_rad", rc.beta}, {"C", k.C}, {"G_mm", k.G}};
}

json cmd_xpci_forward(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto table = material_table(cfg, inputs);
    const auto sample = sample_optics(cfg, table);
    const auto rc = rocking_of(cfg);
    const auto scheme = derivative_of(cfg);
    const double I0 = get<double>(cfg, "source", "I0");
    const auto ph = phantom_ellipsoids(g.rows, g.cols, g.pitch, layout_of(cfg));
    const auto fwd = forward_intensity(ph.thickness, sample, rc, I0, scheme);
    const auto refl = reflectivity_factor(ph.thickness, sample, rc, scheme);
    const auto k = pccgi_constants(rc, sample);
    ImageGrid expected = expected_pccgi(ph.thickness, k, sample.mu, scheme);
    expected *= I0;
    run.grid("thickness", ph.thickness, "mm");
    run.grid("intensity", fwd.intensity, "");
    run.grid("reflectivity", refl, "");
    run.grid("expected_pccgi", expected, "");
    run.grid("absorption", absorption_intensity(ph.thickness, sample, I0), "");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t p = 0; p < refl.size(); ++p)
        if (ph.thickness[p] > 0) {
            lo = std::min(lo, refl[p]);
            hi = std::max(hi, refl[p]);
        }
    return {{"mu_per_mm", sample.mu},
            {"delta", sample.delta},
            {"rocking", rocking_summary(rc, k)},
            {"clamped", fwd.clamped},
            {"reflectivity_band_in_support", {lo, hi}}};
}

std::vector<std::vector<double>> error_histogram(const ImageGrid& err, double sigma, std::size_t bins)
{
    std::vector<std::vector<double>> rows;
    if (!(sigma > 0) || bins < 1) return rows;
    const double lo = -4.0 * sigma, width = 8.0 * sigma / static_cast<double>(bins);
    std::vector<double> counts(bins, 0.0);
    for (double v : err.values()) {
        const double b = std::floor((v - lo) / width);
        if (b >= 0 && b < static_cast<double>(bins)) counts[static_cast<std::size_t>(b)] += 1;
    }
    const double n = static_cast<double>(err.size());
    for (std::size_t b = 0; b < bins; ++b) {
        const double a = lo + width * static_cast<double>(b);
        const double mass = 0.5 * (std::erf((a + width) / (sigma * std::sqrt(2.0))) - std::erf(a / (sigma * std::sqrt(2.0))));
        rows.push_back({a + 0.5 * width, counts[b], n * mass});
    }
    return rows;
}

std::string histogram_csv(const std::vector<std::vector<double>>& rows)
{
    std::string out = "bin_center,count,predicted_count\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r[0], r[1], r[2]);
        out += buf;
    }
    return out;
}

json cmd_xpci_sim(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const Grid g = grid_of(cfg);
    const auto table = material_table(cfg, inputs);
    const auto sample = sample_optics(cfg, table);
    const auto rc = rocking_of(cfg);
    const auto scheme = derivative_of(cfg);
    const double I0 = get<double>(cfg, "source", "I0");
    const auto k = pccgi_constants(rc, sample);
    const auto ph = phantom_ellipsoids(g.rows, g.cols, g.pitch, layout_of(cfg));
    const ImageGrid& T = ph.thickness;

    const json& mb = cfg.at("mask");
    const auto kind = mb.at("kind").get<std::string>();
    if (kind != "smoothed" && kind != "iid") throw SchemaError("mask.kind must be smoothed or iid");
    const double per_pixel = get<double>(cfg, "buckets", "per_pixel");
    const double n_real = std::round(per_pixel * static_cast<double>(g.pixels()));
    if (!(n_real >= 2) || !std::isfinite(n_real)) throw SchemaError("buckets.per_pixel must give at least two buckets");
    const auto N = static_cast<std::size_t>(n_real);

    SpeckleParams sp;
    sp.rows = g.rows;
    sp.cols = g.cols;
    sp.count = N;
    sp.peak_thickness_mm = mb.at("peak_thickness_mm").get<double>();
    sp.sigma_px = mb.at("sigma_px").get<double>();
    sp.pad = mb.at("pad").get<std::size_t>();
    sp.mu0 = find_material(table, mb.at("material").get<std::string>()).mu();
    sp.I0 = I0;
    sp.seed = run.seed();
    sp.open_beam = mb.at("open_beam").get<bool>();

    const double lambda = get<double>(cfg, "noise", "lambda_tilde");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw SchemaError("noise.lambda_tilde must be >= 0 (0 = noise free)");
    const std::uint64_t noise_seed = splitmix64(run.seed());
    auto noise = [&](std::uint32_t channel) -> std::optional<ShotNoise> {
        if (lambda > 0) return ShotNoise{lambda, noise_seed, channel};
        return std::nullopt;
    };

    const auto mode_name = get<std::string>(cfg, "reconstruction", "mode");
    ReconstructionMode mode;
    if (mode_name == "standard")
        mode = ReconstructionMode::standard;
    else if (mode_name == "gram_schmidt")
        mode = ReconstructionMode::gram_schmidt;
    else
        throw SchemaError("reconstruction.mode must be standard or gram_schmidt");
    const auto normalization = get<std::string>(cfg, "reconstruction", "normalization");
    if (normalization != "psf_gain" && normalization != "variance")
        throw SchemaError("reconstruction.normalization must be psf_gain or variance");
    const double gs_per_pixel = get<double>(cfg, "reconstruction", "gram_schmidt_per_pixel");
    if (!(gs_per_pixel >= 0) || gs_per_pixel > 1) throw SchemaError("reconstruction.gram_schmidt_per_pixel must lie in [0, 1]");

    const ImageGrid arriving = forward_intensity(T, sample, rc, I0, scheme).intensity;
    ImageGrid expected = expected_pccgi(T, k, sample.mu, scheme);
    const ImageGrid absorption = absorption_intensity(T, sample, 1.0);
    const ImageGrid absorption_I0 = absorption_intensity(T, sample, I0);

    std::optional<FilterSpec> filter;
    if (cfg.at("inversion").at("enabled").get<bool>()) filter = filter_of(cfg, k, sample.mu);
    const bool absorption_ghost = cfg.at("absorption_ghost").get<bool>();

    json report{{"buckets", N},
                {"lambda_tilde", lambda},
                {"mask_kind", kind},
                {"mask_mu_per_mm", sp.mu0},
                {"sample", {{"mu_per_mm", sample.mu}, {"delta", sample.delta}}},
                {"rocking", rocking_summary(rc, k)},
                {"reconstruction_mode", mode_name}};

    auto simulate = [&](const auto& source) {
        ImageGrid speckle = source.intensity(sp.open_beam && source.size() > 1 ? 1 : 0);
        run.grid("a_speckle", ImageGrid(g.rows, g.cols, g.pitch, std::move(speckle).values()), "");
        run.grid("b_expected_phase_contrast", expected, "");
        run.grid("c_expected_absorption", absorption, "");

        const double gain =
            mode == ReconstructionMode::standard && normalization == "psf_gain" && kind == "smoothed"
                ? speckle_psf_gain(sp)
                : 1.0;
        report["psf_gain"] = gain;
        ImageGrid pc = pccgi_reconstruct(acquire_pccgi_buckets(arriving, source, I0, noise(0)), source, mode, g.pitch);
        pc *= 1.0 / (I0 * gain);
        run.grid("d_phase_contrast_ghost", pc, "");
        ImageGrid err = pc;
        for (std::size_t p = 0; p < err.size(); ++p) err[p] -= expected[p];
        const double predicted_var = (arriving.sum_squares() / (I0 * I0)) / static_cast<double>(N);
        report["phase_contrast"] = {{"rms_error_vs_expected", rms(err)},
                                    {"error_variance", err.sum_squares() / static_cast<double>(err.size())},
                                    {"predicted_error_variance", predicted_var},
                                    {"error_mean", err.mean()}};
        if (kind == "smoothed" && mode == ReconstructionMode::standard && !sp.open_beam) {
            ImageGrid model = arriving;
            model *= 1.0 / I0;
            model = expected_speckle_reconstruction(model, sp);
            model *= 1.0 / gain;
            run.grid("d_expected_speckle_reconstruction", model, "");
            report["phase_contrast"]["rms_error_vs_speckle_expectation"] = rms_difference(pc, model);
        }
        if (mode == ReconstructionMode::standard)
            run.text("d_error_histogram.csv",
                     histogram_csv(error_histogram(err, std::sqrt(predicted_var), cfg.at("histogram_bins").get<std::size_t>())));

        if (filter) {
            const auto inv = invert_pccgi(pc, *filter);
            run.grid("e_absorption_from_phase_contrast", inv.filtered, "");
            run.grid("e_thickness", inv.thickness, "mm");
            report["inversion"] = {{"rms_error_vs_expected_absorption", rms_difference(inv.filtered, absorption)},
                                   {"thickness_rms_error", rms_difference(inv.thickness, T)},
                                   {"clamped", inv.clamped},
                                   {"clamped_fraction", inv.clamped_fraction},
                                   {"max_imag_residue", inv.max_imag_residue},
                                   {"quality_ok", inv.quality_ok}};
            if (!inv.quality_ok) quality_failure(report, inv, *filter);
        }
        if (absorption_ghost) {
            ImageGrid ab =
                pccgi_reconstruct(acquire_pccgi_buckets(absorption_I0, source, I0, noise(1)), source, mode, g.pitch);
            ab *= 1.0 / (I0 * gain);
            run.grid("f_absorption_ghost", ab, "");
            report["absorption_ghost"] = {{"rms_error_vs_expected_absorption", rms_difference(ab, absorption)}};
        }
        if (gs_per_pixel > 0) {
            const auto n_gs = static_cast<std::size_t>(std::round(gs_per_pixel * static_cast<double>(g.pixels())));
            if (n_gs < 1) throw SchemaError("reconstruction.gram_schmidt_per_pixel gives no buckets");
            SpeckleParams gp = sp;
            gp.count = n_gs;
            using Source = std::decay_t<decltype(source)>;
            const Source gs_source(gp);
            ImageGrid gs = pccgi_reconstruct(acquire_pccgi_buckets(arriving, gs_source, I0, noise(2)), gs_source,
                                             ReconstructionMode::gram_schmidt, g.pitch);
            gs *= 1.0 / I0;
            run.grid("g_phase_contrast_gram_schmidt", gs, "");
            report["gram_schmidt"] = {{"buckets", n_gs}, {"rms_error_vs_expected", rms_difference(gs, expected)}};
        }
    };
    if (kind == "smoothed") {
        const SmoothedSpeckleSource source(sp);
        report["speckle_pad"] = source.params().pad;
        simulate(source);
    }
    else {
        simulate(IidSpeckleSource(sp));
    }
    return report;
}

json cmd_xpci_invert(Run& run, Inputs& inputs)
{
    const auto& cfg = run.config();
    const fs::path path = get<std::string>(cfg, "input", "path");
    if (path.empty()) throw SchemaError("input.path is required (or pass --input)");
    const double I0 = get<double>(cfg, "input", "I0");
    if (!(I0 > 0)) throw SchemaError("input.I0 must be > 0");
    ImageGrid image = load_grid(path);
    inputs.files.push_back(path);
    if (fs::exists(sidecar_path(path))) inputs.files.push_back(sidecar_path(path));
    image *= 1.0 / I0;
    const auto table = material_table(cfg, inputs);
    const auto sample = sample_optics(cfg, table);
    const auto rc = rocking_of(cfg);
    const auto k = pccgi_constants(rc, sample);
    const auto filter = filter_of(cfg, k, sample.mu);
    const auto inv = invert_pccgi(image, filter);
    run.grid("thickness", inv.thickness, "mm");
    run.grid("absorption", inv.filtered, "");
    json report{{"rocking", rocking_summary(rc, k)},
                {"mu_per_mm", sample.mu},
                {"clamped", inv.clamped},
                {"clamped_fraction", inv.clamped_fraction},
                {"floor", inv.floor},
                {"max_imag_residue", inv.max_imag_residue},
                {"quality_ok", inv.quality_ok},
                {"thickness", image_summary(inv.thickness)}};
    if (!inv.quality_ok) quality_failure(report, inv, filter);
    return report;
}

using Command = json (*)(Run&, Inputs&);

Command command_fn(const std::string& name)
{
    static const std::map<std::string, Command> table{
        {"basis-gen", cmd_basis_gen},       {"basis-stats", cmd_basis_stats},   {"synth", cmd_synth},
        {"ghost-sim", cmd_ghost_sim},       {"dose-compare", cmd_dose_compare}, {"phantom-gen", cmd_phantom_gen},
        {"material-delta", cmd_material_delta}, {"xpci-forward", cmd_xpci_forward}, {"xpci-sim", cmd_xpci_sim},
        {"xpci-invert", cmd_xpci_invert},
    };
    return table.at(name);
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

struct Options {
    std::string config;
    std::string preset;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t threads = 0;
    std::string format;
    std::string material;
    std::string input;
    bool print_config = false;
};

struct Failure {
    int code;
    std::string kind;
    std::string type;
    std::string message;
    std::optional<std::size_t> offset;
};

Failure classify(const std::exception& e)
{
    auto make = [&](int code, const char* kind, const char* type) { return Failure{code, kind, type, e.what(), {}}; };
    if (const auto* f = dynamic_cast<const ConfigSyntaxError*>(&e)) {
        Failure out = make(kSchema, "schema", "ConfigSyntaxError");
        out.offset = f->offset();
        return out;
    }
    if (const auto* f = dynamic_cast<const FormatError*>(&e)) {
        Failure out = make(kIo, "io", "FormatError");
        out.offset = f->offset();
        return out;
    }
    if (dynamic_cast<const SchemaError*>(&e)) return make(kSchema, "schema", "SchemaError");
    if (dynamic_cast<const ParameterError*>(&e)) return make(kSchema, "schema", "ParameterError");
    if (dynamic_cast<const ShapeError*>(&e)) return make(kSchema, "schema", "ShapeError");
    if (dynamic_cast<const IndexError*>(&e)) return make(kSchema, "schema", "IndexError");
    if (dynamic_cast<const QualityError*>(&e)) return make(kQuality, "quality", "QualityError");
    if (dynamic_cast<const DegenerateError*>(&e)) return make(kQuality, "quality", "DegenerateError");
    if (dynamic_cast<const DependenceError*>(&e)) return make(kQuality, "quality", "DependenceError");
    if (dynamic_cast<const IoError*>(&e)) return make(kIo, "io", "IoError");
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return make(kIo, "io", "filesystem_error");
    if (dynamic_cast<const json::exception*>(&e)) return make(kSchema, "schema", "json_error");
    return make(kInternal, "internal", "exception");
}

int report_failure(const Failure& f, const std::string& command, const std::optional<fs::path>& out)
{
    json err{{"code", f.code}, {"kind", f.kind}, {"type", f.type}, {"message", f.message}};
    if (f.offset) err["offset"] = *f.offset;
    if (!command.empty()) err["command"] = command;
    const json doc{{"error", err}};
    std::cerr << doc.dump() << "\n";
    if (out && fs::is_directory(*out)) std::ofstream(*out / "error.json") << doc.dump(2) << "\n";
    return f.code;
}

json resolve_config(const std::string& command, const Options& opt, CLI::App& sub, Inputs& inputs)
{
    json cfg = command_defaults(command);
    const json schema = cfg;
    if (!opt.preset.empty()) {
        const auto it = presets().find(opt.preset);
        if (it == presets().end()) throw SchemaError("unknown preset '" + opt.preset + "'");
        if (it->second.command != command)
            throw SchemaError("preset '" + opt.preset + "' belongs to command " + it->second.command);
        cfg.merge_patch(it->second.patch);
    }
    if (!opt.config.empty()) {
        json file = parse_json_text(read_file(opt.config), "config '" + opt.config + "'");
        inputs.files.emplace_back(opt.config);
        if (file.is_object() && file.contains("command") && file.contains("config")) {
            if (file["command"] != command)
                throw SchemaError("manifest '" + opt.config + "' records command " + file["command"].dump());
            file = file["config"];
        }
        check_schema(schema, file, "");
        cfg.merge_patch(file);
    }
    auto given = [&](const char* flag) {
        const CLI::Option* o = sub.get_option_no_throw(flag);
        return o != nullptr && o->count() > 0;
    };
    if (given("--seed")) cfg["seed"] = opt.seed;
    if (given("--out")) cfg["out"] = opt.out;
    if (given("--format")) cfg["format"] = opt.format;
    if (given("--threads")) cfg["threads"] = opt.threads;
    if (given("--material")) cfg["material"]["name"] = opt.material;
    if (given("--input")) cfg["input"]["path"] = opt.input;
    check_schema(schema, cfg, "");
    parse_grid_format(cfg["format"].get<std::string>());
    return cfg;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Ghost imaging and x-ray phase-contrast ghost imaging simulator"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand help for every subcommand");
    Options opt;
    for (const auto& [name, help] : command_help()) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config, "JSON config or a previous run's manifest.json");
        sub->add_option("--seed", opt.seed, "Master seed (u64)");
        sub->add_option("--out", opt.out, "Output directory");
        sub->add_option("--threads", opt.threads, "Worker thread cap (default: GHOSTLAB_THREADS, else all cores)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--format", opt.format, "Grid file format")->check(CLI::IsMember({"pgm", "csv", "f64"}));
        sub->add_flag("--print-config", opt.print_config, "Print the resolved config and exit");
        std::string presets_for;
        for (const auto& [pname, p] : presets())
            if (p.command == name) presets_for += (presets_for.empty() ? "" : ", ") + pname;
        if (!presets_for.empty()) sub->add_option("--preset", opt.preset, "Named preset: " + presets_for);
        if (name == "material-delta") sub->add_option("--material", opt.material, "Material name or symbol");
        if (name == "xpci-invert") sub->add_option("--input", opt.input, "Phase-contrast ghost image to invert");
    }

    try {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return report_failure({kSchema, "schema", "usage", e.what(), {}}, "", std::nullopt);
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    std::optional<fs::path> out;
    try {
        Inputs inputs;
        const json cfg = resolve_config(command, opt, *sub, inputs);
        if (opt.print_config) {
            std::cout << cfg.dump(2) << "\n";
            return kOk;
        }
        if (const auto t = cfg["threads"].get<std::size_t>(); t > 0) set_thread_limit(t);
        Run run(command, cfg);
        out = run.out();
        json report = command_fn(command)(run, inputs);
        for (const auto& path : inputs.files) run.input(path);
        const std::string quality = report.value("quality_error", "");
        run.finish(std::move(report));
        if (!quality.empty()) throw QualityError(quality);
        return kOk;
    }
    catch (const std::exception& e) {
        return report_failure(classify(e), command, out);
    }
}
