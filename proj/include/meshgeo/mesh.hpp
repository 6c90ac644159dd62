#pragma once

#include "meshgeo/common.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace meshgeo {

using Face = std::array<int, 3>;

/// Fixed-topology triangle mesh. Vertex order is significant: datasets are
/// vertex-aligned with a template, so row i always denotes the same surface point.
struct Mesh {
    MatrixXd positions;       ///< N x 3
    std::vector<Face> faces;  ///< T triangles, 0-based

    Index num_vertices() const noexcept { return positions.rows(); }
    Index num_faces() const noexcept { return static_cast<Index>(faces.size()); }
};

/// Graph structure over mesh vertices, stored in CSR form.
/// neighbors(i) is sorted ascending and always contains i itself.
class Adjacency {
public:
    Adjacency() = default;
    Adjacency(std::vector<int> offsets, std::vector<int> indices, std::vector<std::array<int, 2>> edges)
        : offsets_(std::move(offsets)), indices_(std::move(indices)), edges_(std::move(edges)) {}

    Index size() const noexcept { return offsets_.empty() ? 0 : static_cast<Index>(offsets_.size()) - 1; }

    std::span<const int> neighbors(Index i) const {
        return {indices_.data() + offsets_[i], static_cast<std::size_t>(offsets_[i + 1] - offsets_[i])};
    }

    int degree(Index i) const { return offsets_[i + 1] - offsets_[i]; }

    const std::vector<int>& offsets() const noexcept { return offsets_; }
    const std::vector<int>& indices() const noexcept { return indices_; }
    /// Undirected edges (i < j), sorted lexicographically.
    const std::vector<std::array<int, 2>>& edges() const noexcept { return edges_; }

    friend bool operator==(const Adjacency&, const Adjacency&) = default;

private:
    std::vector<int> offsets_;
    std::vector<int> indices_;
    std::vector<std::array<int, 2>> edges_;
};

enum class MeshFormat { OBJ, PLY };

inline std::optional<MeshFormat> format_from_path(std::string_view path) {
    auto dot = path.rfind('.');
    if (dot == std::string_view::npos) return std::nullopt;
    std::string ext(path.substr(dot + 1));
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == "obj") return MeshFormat::OBJ;
    if (ext == "ply") return MeshFormat::PLY;
    return std::nullopt;
}

struct ValidationReport {
    std::vector<Index> out_of_range_faces;
    std::vector<Index> degenerate_faces;
    std::vector<Index> isolated_vertices;
    std::vector<Index> zero_area_faces;
    std::vector<std::array<int, 2>> non_manifold_edges;

    /// Only the first three categories make a mesh invalid.
    bool ok() const noexcept {
        return out_of_range_faces.empty() && degenerate_faces.empty() && isolated_vertices.empty();
    }
    bool clean() const noexcept { return ok() && zero_area_faces.empty() && non_manifold_edges.empty(); }

    std::string summary() const {
        std::ostringstream os;
        os << "out_of_range_faces=" << out_of_range_faces.size() << " degenerate_faces=" << degenerate_faces.size()
           << " isolated_vertices=" << isolated_vertices.size() << " zero_area_faces=" << zero_area_faces.size()
           << " non_manifold_edges=" << non_manifold_edges.size();
        return os.str();
    }
};

inline double face_area(const MatrixXd& p, const Face& f) {
    const Eigen::Vector3d a = p.row(f[0]), b = p.row(f[1]), c = p.row(f[2]);
    return 0.5 * (b - a).cross(c - a).norm();
}

inline ValidationReport validate_mesh(const Mesh& mesh) {
    ValidationReport r;
    const Index n = mesh.num_vertices();
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    std::map<std::array<int, 2>, int> edge_faces;
    std::vector<Index> measurable;

    for (Index fi = 0; fi < mesh.num_faces(); ++fi) {
        const Face& f = mesh.faces[fi];
        if (std::any_of(f.begin(), f.end(), [n](int v) { return v < 0 || v >= n; })) {
            r.out_of_range_faces.push_back(fi);
            continue;
        }
        for (int v : f) used[v] = 1;
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) {
            r.degenerate_faces.push_back(fi);
            continue;
        }
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            ++edge_faces[{std::min(a, b), std::max(a, b)}];
        }
        measurable.push_back(fi);
    }
    for (Index v = 0; v < n; ++v)
        if (!used[v]) r.isolated_vertices.push_back(v);

    if (!measurable.empty()) {
        std::vector<double> areas;
        areas.reserve(measurable.size());
        double mean = 0.0;
        for (Index fi : measurable) {
            areas.push_back(face_area(mesh.positions, mesh.faces[fi]));
            mean += areas.back();
        }
        mean /= static_cast<double>(areas.size());
        for (std::size_t k = 0; k < areas.size(); ++k)
            if (areas[k] < 1e-12 * mean || (mean == 0.0)) r.zero_area_faces.push_back(measurable[k]);
    }
    for (const auto& [e, count] : edge_faces)
        if (count > 2) r.non_manifold_edges.push_back(e);
    return r;
}

inline Adjacency build_adjacency(const Mesh& mesh) {
    const Index n = mesh.num_vertices();
    std::vector<std::array<int, 2>> edges;
    edges.reserve(mesh.faces.size() * 3);
    for (const Face& f : mesh.faces)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a != b) edges.push_back({std::min(a, b), std::max(a, b)});
        }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    std::vector<int> count(static_cast<std::size_t>(n), 1);
    for (const auto& e : edges) {
        ++count[e[0]];
        ++count[e[1]];
    }
    std::vector<int> offsets(static_cast<std::size_t>(n) + 1, 0);
    for (Index i = 0; i < n; ++i) offsets[i + 1] = offsets[i] + count[i];
    std::vector<int> indices(static_cast<std::size_t>(offsets[n]));
    std::vector<int> fill(offsets.begin(), offsets.end() - 1);
    for (Index i = 0; i < n; ++i) indices[fill[i]++] = static_cast<int>(i);
    for (const auto& e : edges) {
        indices[fill[e[0]]++] = e[1];
        indices[fill[e[1]]++] = e[0];
    }
    for (Index i = 0; i < n; ++i) std::sort(indices.begin() + offsets[i], indices.begin() + offsets[i + 1]);
    return Adjacency(std::move(offsets), std::move(indices), std::move(edges));
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline double parse_double(std::string_view tok, std::size_t line) {
    double v = 0.0;
    if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
        throw ParseError("malformed number '" + std::string(tok) + "'", line);
    return v;
}

inline long long parse_int(std::string_view tok, std::size_t line) {
    long long v = 0;
    if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
        throw ParseError("malformed integer '" + std::string(tok) + "'", line);
    return v;
}

/// Splits a polygon into a triangle fan anchored at its first corner.
inline void fan_triangulate(const std::vector<int>& poly, std::vector<Face>& out, std::size_t line) {
    if (poly.size() < 3)
        throw ParseError("polygon with " + std::to_string(poly.size()) + " corners cannot be triangulated", line);
    for (std::size_t k = 1; k + 1 < poly.size(); ++k) out.push_back({poly[0], poly[k], poly[k + 1]});
}

class LineReader {
public:
    explicit LineReader(std::string_view text) : text_(text) {}

    bool next(std::string_view& line) {
        if (pos_ >= text_.size()) return false;
        std::size_t end = text_.find('\n', pos_);
        if (end == std::string_view::npos) end = text_.size();
        line = text_.substr(pos_, end - pos_);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos_ = end + 1;
        ++number_;
        return true;
    }
    std::size_t number() const noexcept { return number_; }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t number_ = 0;
};

inline Mesh parse_obj(std::string_view text) {
    std::vector<double> coords;
    std::vector<Face> faces;
    LineReader reader(text);
    std::string_view line;
    std::vector<int> poly;
    while (reader.next(line)) {
        const std::size_t ln = reader.number();
        auto tok = split_ws(line);
        if (tok.empty() || tok[0].front() == '#') continue;
        if (tok[0] == "v") {
            if (tok.size() < 4) throw ParseError("vertex needs 3 coordinates", ln);
            for (int k = 1; k <= 3; ++k) coords.push_back(parse_double(tok[k], ln));
        } else if (tok[0] == "f") {
            poly.clear();
            const auto nv = static_cast<long long>(coords.size() / 3);
            for (std::size_t k = 1; k < tok.size(); ++k) {
                auto ref = tok[k].substr(0, tok[k].find('/'));
                long long idx = parse_int(ref, ln);
                if (idx < 0) idx = nv + idx + 1;  // relative reference
                if (idx < 1 || idx > nv)
                    throw ParseError("face index " + std::string(ref) + " outside [1, " + std::to_string(nv) + "]", ln);
                poly.push_back(static_cast<int>(idx - 1));
            }
            fan_triangulate(poly, faces, ln);
        }
    }
    Mesh m;
    m.positions = Eigen::Map<const MatrixXd>(coords.data(), static_cast<Index>(coords.size() / 3), 3);
    m.faces = std::move(faces);
    return m;
}

inline Mesh parse_ply(std::string_view text) {
    LineReader reader(text);
    std::string_view line;
    if (!reader.next(line) || trim(line) != "ply") throw ParseError("missing 'ply' magic", 1);

    struct Element {
        std::string name;
        long long count = 0;
        std::vector<std::string> props;  // property names; list properties prefixed with '*'
    };
    std::vector<Element> elements;
    bool ascii = false;
    bool header_done = false;
    while (reader.next(line)) {
        const std::size_t ln = reader.number();
        auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "comment" || tok[0] == "obj_info") continue;
        if (tok[0] == "format") {
            if (tok.size() < 2) throw ParseError("malformed format line", ln);
            if (tok[1] != "ascii") throw ParseError("only ascii PLY is supported, got " + std::string(tok[1]), ln);
            ascii = true;
        } else if (tok[0] == "element") {
            if (tok.size() != 3) throw ParseError("malformed element line", ln);
            long long c = parse_int(tok[2], ln);
            if (c < 0) throw ParseError("negative element count", ln);
            elements.push_back({std::string(tok[1]), c, {}});
        } else if (tok[0] == "property") {
            if (elements.empty()) throw ParseError("property before any element", ln);
            if (tok.size() >= 5 && tok[1] == "list")
                elements.back().props.push_back("*" + std::string(tok[4]));
            else if (tok.size() == 3)
                elements.back().props.emplace_back(tok[2]);
            else
                throw ParseError("malformed property line", ln);
        } else if (tok[0] == "end_header") {
            header_done = true;
            break;
        } else {
            throw ParseError("unknown header keyword '" + std::string(tok[0]) + "'", ln);
        }
    }
    if (!header_done) throw ParseError("missing end_header", reader.number());
    if (!ascii) throw ParseError("missing format line", reader.number());

    std::vector<double> coords;
    std::vector<Face> faces;
    long long num_vertices = -1;
    std::vector<int> poly;
    for (const Element& el : elements) {
        int ix = -1, iy = -1, iz = -1, ilist = -1;
        for (std::size_t p = 0; p < el.props.size(); ++p) {
            const auto& name = el.props[p];
            if (name == "x") ix = static_cast<int>(p);
            if (name == "y") iy = static_cast<int>(p);
            if (name == "z") iz = static_cast<int>(p);
            if (name == "*vertex_indices" || name == "*vertex_index") ilist = static_cast<int>(p);
        }
        const bool is_vertex = el.name == "vertex";
        const bool is_face = el.name == "face";
        if (is_vertex && (ix < 0 || iy < 0 || iz < 0)) throw ParseError("vertex element lacks x/y/z", 0);
        if (is_face && ilist < 0) throw ParseError("face element lacks vertex_indices", 0);
        if (is_vertex) num_vertices = el.count;

        for (long long r = 0; r < el.count; ++r) {
            if (!reader.next(line))
                throw ParseError("unexpected end of file: element '" + el.name + "' declares " +
                                     std::to_string(el.count) + " rows, found " + std::to_string(r),
                                 reader.number() + 1);
            const std::size_t ln = reader.number();
            auto tok = split_ws(line);
            std::size_t cursor = 0;
            double xyz[3] = {0, 0, 0};
            for (std::size_t p = 0; p < el.props.size(); ++p) {
                if (el.props[p].front() == '*') {
                    if (cursor >= tok.size()) throw ParseError("missing list length", ln);
                    long long len = parse_int(tok[cursor++], ln);
                    if (len < 0 || cursor + static_cast<std::size_t>(len) > tok.size())
                        throw ParseError("list length exceeds row", ln);
                    if (is_face && static_cast<int>(p) == ilist) {
                        poly.clear();
                        for (long long k = 0; k < len; ++k) {
                            long long idx = parse_int(tok[cursor + static_cast<std::size_t>(k)], ln);
                            if (idx < 0 || (num_vertices >= 0 && idx >= num_vertices))
                                throw ParseError("face index " + std::to_string(idx) + " out of range", ln);
                            poly.push_back(static_cast<int>(idx));
                        }
                        fan_triangulate(poly, faces, ln);
                    }
                    cursor += static_cast<std::size_t>(len);
                } else {
                    if (cursor >= tok.size()) throw ParseError("row has too few values", ln);
                    if (is_vertex) {
                        const int pi = static_cast<int>(p);
                        if (pi == ix || pi == iy || pi == iz) xyz[pi == ix ? 0 : (pi == iy ? 1 : 2)] = parse_double(tok[cursor], ln);
                    }
                    ++cursor;
                }
            }
            if (cursor != tok.size()) throw ParseError("row has extra values", ln);
            if (is_vertex) coords.insert(coords.end(), xyz, xyz + 3);
        }
    }
    while (reader.next(line))
        if (!trim(line).empty()) throw ParseError("trailing data after last element", reader.number());

    Mesh m;
    m.positions = Eigen::Map<const MatrixXd>(coords.data(), static_cast<Index>(coords.size() / 3), 3);
    m.faces = std::move(faces);
    return m;
}

inline void append_number(std::string& out, double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, p);
}

}  // namespace detail

/// Parses a mesh. Quads and larger polygons are fan-triangulated. The result
/// is validated; a mesh with out-of-range, degenerate or unused entries is rejected.
inline Mesh load_mesh(std::string_view bytes, MeshFormat format) {
    Mesh m = format == MeshFormat::OBJ ? detail::parse_obj(bytes) : detail::parse_ply(bytes);
    auto report = validate_mesh(m);
    if (!report.ok()) throw ParseError("invalid mesh: " + report.summary(), 0);
    return m;
}

/// Serializes positions with shortest round-trip formatting, so a reload is bit-exact.
/// `quality`, when given, is written as a per-vertex PLY property (ignored for OBJ).
inline std::string save_mesh(const Mesh& mesh, MeshFormat format, std::span<const double> quality = {}) {
    std::string out;
    out.reserve(static_cast<std::size_t>(mesh.num_vertices()) * 64 + mesh.faces.size() * 24);
    const bool with_quality = format == MeshFormat::PLY && !quality.empty();
    if (with_quality && static_cast<Index>(quality.size()) != mesh.num_vertices())
        throw ShapeError("quality field has " + std::to_string(quality.size()) + " values for " +
                         std::to_string(mesh.num_vertices()) + " vertices");
    if (format == MeshFormat::PLY) {
        out += "ply\nformat ascii 1.0\nelement vertex " + std::to_string(mesh.num_vertices()) +
               "\nproperty double x\nproperty double y\nproperty double z\n";
        if (with_quality) out += "property double quality\n";
        out += "element face " + std::to_string(mesh.faces.size()) +
               "\nproperty list uchar int vertex_indices\nend_header\n";
    }
    for (Index i = 0; i < mesh.num_vertices(); ++i) {
        if (format == MeshFormat::OBJ) out += "v";
        for (int k = 0; k < 3; ++k) {
            if (format == MeshFormat::OBJ || k > 0) out += ' ';
            detail::append_number(out, mesh.positions(i, k));
        }
        if (with_quality) {
            out += ' ';
            detail::append_number(out, quality[static_cast<std::size_t>(i)]);
        }
        out += '\n';
    }
    const int base = format == MeshFormat::OBJ ? 1 : 0;
    for (const Face& f : mesh.faces) {
        out += format == MeshFormat::OBJ ? "f" : "3";
        for (int v : f) out += ' ' + std::to_string(v + base);
        out += '\n';
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline Mesh load_mesh_file(const std::string& path) {
    auto fmt = format_from_path(path);
    if (!fmt) throw std::invalid_argument("unknown mesh extension: " + path);
    try {
        return load_mesh(read_file(path), *fmt);
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.message(), e.line());
    }
}

inline void save_mesh_file(const std::string& path, const Mesh& mesh, std::span<const double> quality = {}) {
    auto fmt = format_from_path(path);
    if (!fmt) throw std::invalid_argument("unknown mesh extension: " + path);
    write_file(path, save_mesh(mesh, *fmt, quality));
}

}  // namespace meshgeo
