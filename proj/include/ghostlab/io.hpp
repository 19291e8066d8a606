#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "ghostlab/errors.hpp"
#include "ghostlab/grid.hpp"
#include "ghostlab/xpci.hpp"

namespace ghostlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Raw file helpers
// ---------------------------------------------------------------------------

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
    return data;
}

inline void write_file(const fs::path& path, std::string_view data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError("write failed on '" + path.string() + "'");
}

inline std::string sha256_hex(std::string_view data)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------
// Grid files
// ---------------------------------------------------------------------------

enum class GridFormat { pgm, csv, f64 };

inline std::string to_string(GridFormat f)
{
    switch (f) {
    case GridFormat::pgm: return "pgm";
    case GridFormat::csv: return "csv";
    case GridFormat::f64: return "f64";
    }
    return "unknown";
}

inline GridFormat parse_grid_format(const std::string& name)
{
    if (name == "pgm") return GridFormat::pgm;
    if (name == "csv") return GridFormat::csv;
    if (name == "f64") return GridFormat::f64;
    throw ParameterError("unknown grid format '" + name + "' (expected pgm, csv or f64)");
}

inline GridFormat grid_format_from_path(const fs::path& path)
{
    const std::string ext = path.extension().string();
    if (ext == ".pgm") return GridFormat::pgm;
    if (ext == ".csv") return GridFormat::csv;
    if (ext == ".f64") return GridFormat::f64;
    throw ParameterError("unrecognized grid extension '" + ext + "' (expected .pgm, .csv or .f64)");
}

/// JSON sidecar written next to every grid file as <file>.json.
inline fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

struct GridSidecar {
    std::size_t rows = 0;
    std::size_t cols = 0;
    double pitch = 1.0;
    std::string units;
    double min = 0;
    double max = 0;
    std::string format;
};

inline json to_json(const GridSidecar& s)
{
    return json{{"rows", s.rows}, {"cols", s.cols}, {"pitch", s.pitch}, {"units", s.units},
                {"min", s.min},   {"max", s.max},   {"format", s.format}};
}

inline GridSidecar read_sidecar(const fs::path& path)
{
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    }
    catch (const json::parse_error& e) {
        throw FormatError(e.byte, "sidecar '" + path.string() + "': " + e.what());
    }
    GridSidecar s;
    try {
        s.rows = j.at("rows").get<std::size_t>();
        s.cols = j.at("cols").get<std::size_t>();
        s.pitch = j.value("pitch", 1.0);
        s.units = j.value("units", std::string{});
        s.min = j.value("min", 0.0);
        s.max = j.value("max", 0.0);
        s.format = j.value("format", std::string{});
    }
    catch (const json::exception& e) {
        throw FormatError(0, "sidecar '" + path.string() + "': " + e.what());
    }
    return s;
}

namespace detail {

inline std::string encode_pgm(const ImageGrid& g, double lo, double hi)
{
    std::string out = "P5\n" + std::to_string(g.cols()) + " " + std::to_string(g.rows()) + "\n65535\n";
    const std::size_t header = out.size();
    out.resize(header + 2 * g.size());
    const double span = hi - lo;
    for (std::size_t p = 0; p < g.size(); ++p) {
        const double t = span > 0 ? (g[p] - lo) / span : 0.0;
        const auto q = static_cast<std::uint16_t>(std::clamp(std::lround(t * 65535.0), 0L, 65535L));
        out[header + 2 * p] = static_cast<char>(q >> 8);
        out[header + 2 * p + 1] = static_cast<char>(q & 0xFF);
    }
    return out;
}

/// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::size_t pgm_token(const std::string& data, std::size_t& pos)
{
    for (;;) {
        while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
        if (pos < data.size() && data[pos] == '#') {
            while (pos < data.size() && data[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    const std::size_t start = pos;
    if (pos >= data.size()) throw FormatError(pos, "pgm: truncated header");
    std::size_t value = 0;
    while (pos < data.size() && std::isdigit(static_cast<unsigned char>(data[pos]))) {
        value = value * 10 + static_cast<std::size_t>(data[pos] - '0');
        if (value > (1u << 30)) throw FormatError(start, "pgm: header value too large");
        ++pos;
    }
    if (pos == start) throw FormatError(start, "pgm: expected an unsigned integer in header");
    return value;
}

inline ImageGrid decode_pgm(const std::string& data, const GridSidecar* sidecar)
{
    if (data.size() < 2 || data[0] != 'P' || data[1] != '5') throw FormatError(0, "pgm: missing P5 magic");
    std::size_t pos = 2;
    const std::size_t cols = pgm_token(data, pos);
    const std::size_t rows = pgm_token(data, pos);
    const std::size_t maxval_at = pos;
    const std::size_t maxval = pgm_token(data, pos);
    if (cols < 1 || rows < 1) throw FormatError(2, "pgm: dimensions must be >= 1");
    if (maxval < 1 || maxval > 65535) throw FormatError(maxval_at, "pgm: maxval must lie in [1, 65535]");
    if (pos >= data.size() || !std::isspace(static_cast<unsigned char>(data[pos])))
        throw FormatError(pos, "pgm: expected whitespace after maxval");
    ++pos;
    const std::size_t width = maxval > 255 ? 2 : 1;
    const std::size_t need = rows * cols * width;
    if (data.size() - pos < need)
        throw FormatError(data.size(), "pgm: truncated raster (need " + std::to_string(need) + " bytes after offset " +
                                           std::to_string(pos) + ")");
    if (data.size() - pos > need) throw FormatError(pos + need, "pgm: trailing bytes after raster");
    double lo = 0, hi = static_cast<double>(maxval), pitch = 1.0;
    if (sidecar) {
        if (sidecar->rows != rows || sidecar->cols != cols)
            throw FormatError(2, "pgm: dimensions disagree with sidecar");
        lo = sidecar->min;
        hi = sidecar->max;
        pitch = sidecar->pitch;
    }
    std::vector<double> v(rows * cols);
    for (std::size_t p = 0; p < v.size(); ++p) {
        std::size_t q;
        if (width == 2)
            q = (static_cast<unsigned char>(data[pos + 2 * p]) << 8) | static_cast<unsigned char>(data[pos + 2 * p + 1]);
        else
            q = static_cast<unsigned char>(data[pos + p]);
        if (q > maxval) throw FormatError(pos + width * p, "pgm: sample exceeds maxval");
        v[p] = lo + static_cast<double>(q) * (hi - lo) / static_cast<double>(maxval);
    }
    return ImageGrid(rows, cols, pitch, std::move(v));
}

inline std::string encode_csv(const ImageGrid& g)
{
    std::string out;
    out.reserve(g.size() * 24);
    char buf[32];
    for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) {
            const int n = std::snprintf(buf, sizeof buf, "%.17g", g(i, j));
            if (j) out.push_back(',');
            out.append(buf, static_cast<std::size_t>(n));
        }
        out.push_back('\n');
    }
    return out;
}

inline double parse_double_field(const std::string& data, std::size_t begin, std::size_t end, std::size_t row)
{
    while (begin < end && (data[begin] == ' ' || data[begin] == '\t')) ++begin;
    while (end > begin && (data[end - 1] == ' ' || data[end - 1] == '\t' || data[end - 1] == '\r')) --end;
    const std::string field = data.substr(begin, end - begin);
    if (field.empty()) throw FormatError(begin, "csv row " + std::to_string(row) + ": empty field");
    char* stop = nullptr;
    errno = 0;
    const double v = std::strtod(field.c_str(), &stop);
    if (stop != field.c_str() + field.size() || (errno == ERANGE && std::isinf(v)))
        throw FormatError(begin, "csv row " + std::to_string(row) + ": '" + field + "' is not a number");
    return v;
}

inline ImageGrid decode_csv(const std::string& data, double pitch)
{
    std::vector<double> values;
    std::size_t cols = 0, rows = 0, pos = 0;
    while (pos < data.size()) {
        std::size_t eol = data.find('\n', pos);
        if (eol == std::string::npos) eol = data.size();
        const std::size_t line_start = pos;
        std::size_t line_end = eol;
        if (line_end > line_start && data[line_end - 1] == '\r') --line_end;
        if (line_end == line_start) {
            pos = eol + 1;
            continue;
        }
        ++rows;
        std::size_t count = 0, field = line_start;
        for (;;) {
            std::size_t comma = data.find(',', field);
            if (comma == std::string::npos || comma > line_end) comma = line_end;
            values.push_back(parse_double_field(data, field, comma, rows));
            ++count;
            if (comma == line_end) break;
            field = comma + 1;
        }
        if (rows == 1)
            cols = count;
        else if (count != cols)
            throw FormatError(line_start, "csv row " + std::to_string(rows) + ": expected " + std::to_string(cols) +
                                              " values, found " + std::to_string(count));
        pos = eol + 1;
    }
    if (rows == 0) throw FormatError(0, "csv: no data rows");
    return ImageGrid(rows, cols, pitch, std::move(values));
}

inline std::string encode_f64(const ImageGrid& g)
{
    std::string out(8 * g.size(), '\0');
    for (std::size_t p = 0; p < g.size(); ++p) {
        auto bits = std::bit_cast<std::uint64_t>(g[p]);
        for (int b = 0; b < 8; ++b) out[8 * p + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    return out;
}

inline ImageGrid decode_f64(const std::string& data, const GridSidecar& s)
{
    const std::size_t need = 8 * s.rows * s.cols;
    if (data.size() % 8 != 0) throw FormatError(data.size() - data.size() % 8, "f64: length is not a multiple of 8");
    if (data.size() != need)
        throw FormatError(std::min(data.size(), need), "f64: expected " + std::to_string(need) + " bytes for " +
                                                           std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                                                           ", found " + std::to_string(data.size()));
    std::vector<double> v(s.rows * s.cols);
    for (std::size_t p = 0; p < v.size(); ++p) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[8 * p + static_cast<std::size_t>(b)]))
                    << (8 * b);
        v[p] = std::bit_cast<double>(bits);
        if (!std::isfinite(v[p])) throw FormatError(8 * p, "f64: non-finite value");
    }
    return ImageGrid(s.rows, s.cols, s.pitch, std::move(v));
}

}  // namespace detail

/// Writes a grid in the format implied by the extension, plus its sidecar.
inline void save_grid(const ImageGrid& g, const fs::path& path, const std::string& units = "")
{
    const GridFormat fmt = grid_format_from_path(path);
    GridSidecar s{g.rows(), g.cols(), g.pitch(), units, g.min(), g.max(), to_string(fmt)};
    switch (fmt) {
    case GridFormat::pgm: write_file(path, detail::encode_pgm(g, s.min, s.max)); break;
    case GridFormat::csv: write_file(path, detail::encode_csv(g)); break;
    case GridFormat::f64: write_file(path, detail::encode_f64(g)); break;
    }
    write_file(sidecar_path(path), to_json(s).dump(2) + "\n");
}

/// Path with the extension for `fmt` appended to `stem`.
inline fs::path grid_path(const fs::path& dir, const std::string& stem, GridFormat fmt)
{
    return dir / (stem + "." + to_string(fmt));
}

/// Reads a grid by extension. The sidecar is required for .f64 and supplies
/// the value range for .pgm and the pitch for every format when present.
inline ImageGrid load_grid(const fs::path& path)
{
    const GridFormat fmt = grid_format_from_path(path);
    const std::string data = read_file(path);
    const fs::path side = sidecar_path(path);
    std::optional<GridSidecar> s;
    if (fs::exists(side)) s = read_sidecar(side);
    switch (fmt) {
    case GridFormat::pgm: return detail::decode_pgm(data, s ? &*s : nullptr);
    case GridFormat::csv: return detail::decode_csv(data, s ? s->pitch : 1.0);
    case GridFormat::f64:
        if (!s) throw IoError("f64 grid '" + path.string() + "' has no sidecar '" + side.string() + "'");
        return detail::decode_f64(data, *s);
    }
    throw ParameterError("load_grid: unreachable format");
}

// ---------------------------------------------------------------------------
// Material table
// ---------------------------------------------------------------------------

/// Parses a material CSV with header name,Z,M_A,mu_over_rho,rho,f1 (any column
/// order).
inline std::vector<Material> parse_material_csv(const std::string& data)
{
    static const std::array<std::string, 6> kColumns{"name", "Z", "M_A", "mu_over_rho", "rho", "f1"};
    std::vector<std::pair<std::size_t, std::vector<std::string>>> lines;
    std::size_t pos = 0;
    while (pos < data.size()) {
        std::size_t eol = data.find('\n', pos);
        if (eol == std::string::npos) eol = data.size();
        std::string line = data.substr(pos, eol - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) {
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) {
                const auto b = cell.find_first_not_of(" \t");
                const auto e = cell.find_last_not_of(" \t");
                cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
            }
            if (line.back() == ',') cells.emplace_back();
            lines.emplace_back(pos, std::move(cells));
        }
        pos = eol + 1;
    }
    if (lines.empty()) throw FormatError(0, "material csv: empty file");
    const auto& header = lines.front().second;
    std::array<std::size_t, 6> index{};
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
        const auto it = std::find(header.begin(), header.end(), kColumns[c]);
        if (it == header.end()) throw FormatError(0, "material csv: missing column '" + kColumns[c] + "'");
        index[c] = static_cast<std::size_t>(it - header.begin());
    }
    std::vector<Material> out;
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto& [offset, cells] = lines[r];
        if (cells.size() != header.size())
            throw FormatError(offset, "material csv row " + std::to_string(r + 1) + ": expected " +
                                          std::to_string(header.size()) + " fields, found " +
                                          std::to_string(cells.size()));
        auto num = [&, offset = offset, &cells = cells](std::size_t c) {
            const std::string& text = cells[index[c]];
            char* stop = nullptr;
            const double v = std::strtod(text.c_str(), &stop);
            if (text.empty() || stop != text.c_str() + text.size())
                throw FormatError(offset, "material csv row " + std::to_string(r + 1) + ": column '" + kColumns[c] +
                                              "' is not a number");
            return v;
        };
        Material m;
        m.name = cells[index[0]];
        m.Z = static_cast<int>(num(1));
        m.molar_mass = num(2);
        m.mu_over_rho = num(3);
        m.density = num(4);
        m.f1 = num(5);
        try {
            m.validate();
        }
        catch (const ParameterError& e) {
            throw FormatError(offset, "material csv row " + std::to_string(r + 1) + ": " + e.what());
        }
        out.push_back(std::move(m));
    }
    return out;
}

/// Built-in table with rows from `overrides` replacing same-named entries and
/// new names appended.
inline std::vector<Material> merge_materials(std::vector<Material> base, const std::vector<Material>& overrides)
{
    for (const auto& m : overrides) {
        const std::string key = detail::canonical_material_name(m.name);
        auto it = std::find_if(base.begin(), base.end(),
                               [&](const Material& b) { return detail::canonical_material_name(b.name) == key; });
        if (it != base.end())
            *it = m;
        else
            base.push_back(m);
    }
    return base;
}

inline std::vector<Material> load_material_table(const fs::path& csv)
{
    return merge_materials(builtin_materials(), parse_material_csv(read_file(csv)));
}

inline json to_json(const Material& m)
{
    return json{{"name", m.name}, {"Z", m.Z},         {"M_A", m.molar_mass},
                {"mu_over_rho", m.mu_over_rho},       {"rho", m.density},
                {"f1", m.f1},     {"mu_per_mm", m.mu()}};
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Records what a run consumed and produced so it can be replayed.
class Manifest {
public:
    Manifest(std::string command, json resolved_config)
        : command_(std::move(command)), config_(std::move(resolved_config))
    {
    }

    void add_input(const fs::path& path) { inputs_[path.string()] = sha256_file(path); }
    /// Outputs are keyed by `key`, or by the file name when it is empty.
    void add_output(const fs::path& path, const std::string& key = "")
    {
        outputs_[key.empty() ? path.filename().string() : key] = sha256_file(path);
    }

    void add_grid_output(const fs::path& path, const std::string& key = "")
    {
        add_output(path, key);
        add_output(sidecar_path(path), key.empty() ? "" : key + ".json");
    }

    [[nodiscard]] json to_json() const
    {
        return json{{"command", command_}, {"config", config_}, {"inputs", inputs_}, {"outputs", outputs_}};
    }

    void write(const fs::path& dir) const { write_file(dir / "manifest.json", to_json().dump(2) + "\n"); }

private:
    std::string command_;
    json config_;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
};

}  // namespace ghostlab
