#pragma once

#include "meshgeo/mesh.hpp"
#include "meshgeo/sparse.hpp"

#include <iostream>
#include <limits>
#include <queue>
#include <tuple>
#include <unordered_set>

namespace meshgeo {

struct DecimationResult {
    Mesh coarse;
    std::vector<int> kept;     ///< surviving vertex indices in the input mesh, ascending; row r of coarse is kept[r]
    bool reached_target = true;
};

namespace detail {

using Quadric = Eigen::Matrix4d;

inline Quadric plane_quadric(const Eigen::Vector3d& unit_normal, const Eigen::Vector3d& point, double weight) {
    Eigen::Vector4d p;
    p << unit_normal, -unit_normal.dot(point);
    return weight * p * p.transpose();
}

inline double quadric_error(const Quadric& q, const Eigen::Vector3d& x) {
    Eigen::Vector4d h;
    h << x, 1.0;
    return h.dot(q * h);
}

/// Greedy half-edge collapse driven by Garland-Heckbert quadrics. Vertices never
/// move; a collapse folds one endpoint into the other.
class HalfEdgeCollapser {
public:
    explicit HalfEdgeCollapser(const Mesh& mesh) : x_(mesh.positions), faces_(mesh.faces) {
        const Index n = mesh.num_vertices();
        quadric_.assign(static_cast<std::size_t>(n), Quadric::Zero());
        vertex_faces_.resize(static_cast<std::size_t>(n));
        alive_vertex_.assign(static_cast<std::size_t>(n), 1);
        stamp_.assign(static_cast<std::size_t>(n), 0);
        alive_face_.assign(faces_.size(), 1);
        for (std::size_t f = 0; f < faces_.size(); ++f)
            for (int v : faces_[f]) vertex_faces_[v].push_back(static_cast<int>(f));

        std::map<std::array<int, 2>, std::vector<int>> edge_faces;
        for (std::size_t f = 0; f < faces_.size(); ++f) {
            const Face& t = faces_[f];
            const Eigen::Vector3d a = x_.row(t[0]), b = x_.row(t[1]), c = x_.row(t[2]);
            Eigen::Vector3d nrm = (b - a).cross(c - a);
            const double twice_area = nrm.norm();
            if (twice_area > 0.0) {
                nrm /= twice_area;
                const Quadric q = plane_quadric(nrm, a, 0.5 * twice_area);
                for (int v : t) quadric_[v] += q;
            }
            for (int k = 0; k < 3; ++k) {
                int u = t[k], w = t[(k + 1) % 3];
                edge_faces[{std::min(u, w), std::max(u, w)}].push_back(static_cast<int>(f));
            }
        }
        boundary_vertex_.assign(static_cast<std::size_t>(n), 0);
        for (const auto& [e, fs] : edge_faces) {
            if (fs.size() != 1) continue;
            boundary_vertex_[e[0]] = boundary_vertex_[e[1]] = 1;
            const Face& t = faces_[fs[0]];
            const Eigen::Vector3d a = x_.row(t[0]), b = x_.row(t[1]), c = x_.row(t[2]);
            const Eigen::Vector3d fn = (b - a).cross(c - a);
            const Eigen::Vector3d p0 = x_.row(e[0]), p1 = x_.row(e[1]);
            const Eigen::Vector3d edge = p1 - p0;
            Eigen::Vector3d side = edge.cross(fn);
            if (side.norm() == 0.0) continue;
            side.normalize();
            const Quadric q = plane_quadric(side, p0, 1e3 * edge.squaredNorm());
            quadric_[e[0]] += q;
            quadric_[e[1]] += q;
        }
        alive_count_ = n;
    }

    Index alive_count() const noexcept { return alive_count_; }

    /// Collapses until `target` vertices remain or no legal collapse is left.
    bool run(Index target) {
        for (int phase = 0; phase < 2 && alive_count_ > target; ++phase) {
            allow_flips_ = phase == 1;
            queue_ = {};
            for (Index v = 0; v < static_cast<Index>(alive_vertex_.size()); ++v)
                if (alive_vertex_[v]) push_edges_of(static_cast<int>(v));
            while (alive_count_ > target && !queue_.empty()) {
                const Entry e = queue_.top();
                queue_.pop();
                const int a = std::get<1>(e), b = std::get<2>(e);
                if (!alive_vertex_[a] || !alive_vertex_[b]) continue;
                if (std::get<4>(e) != stamp_[a] || std::get<5>(e) != stamp_[b]) continue;
                const int from = std::get<3>(e) == a ? b : a;
                const int to = std::get<3>(e);
                if (!collapsible(from, to)) continue;
                collapse(from, to);
            }
        }
        return alive_count_ <= target;
    }

    DecimationResult result() const {
        DecimationResult r;
        std::vector<int> remap(alive_vertex_.size(), -1);
        for (std::size_t v = 0; v < alive_vertex_.size(); ++v)
            if (alive_vertex_[v]) {
                remap[v] = static_cast<int>(r.kept.size());
                r.kept.push_back(static_cast<int>(v));
            }
        r.coarse.positions.resize(static_cast<Index>(r.kept.size()), 3);
        for (std::size_t k = 0; k < r.kept.size(); ++k) r.coarse.positions.row(static_cast<Index>(k)) = x_.row(r.kept[k]);
        for (std::size_t f = 0; f < faces_.size(); ++f)
            if (alive_face_[f]) r.coarse.faces.push_back({remap[faces_[f][0]], remap[faces_[f][1]], remap[faces_[f][2]]});
        return r;
    }

private:
    // (cost, min endpoint, max endpoint, surviving endpoint, stamp min, stamp max)
    using Entry = std::tuple<double, int, int, int, std::uint64_t, std::uint64_t>;
    struct Later {
        bool operator()(const Entry& l, const Entry& r) const {
            return std::tie(std::get<0>(l), std::get<1>(l), std::get<2>(l)) >
                   std::tie(std::get<0>(r), std::get<1>(r), std::get<2>(r));
        }
    };

    std::vector<int> neighbors_of(int v) const {
        std::vector<int> out;
        for (int f : vertex_faces_[v])
            for (int w : faces_[f])
                if (w != v) out.push_back(w);
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    void push_edge(int a, int b) {
        const int lo = std::min(a, b), hi = std::max(a, b);
        const Quadric q = quadric_[lo] + quadric_[hi];
        const double keep_lo = quadric_error(q, x_.row(lo).transpose());
        const double keep_hi = quadric_error(q, x_.row(hi).transpose());
        const int to = keep_hi < keep_lo ? hi : lo;
        queue_.emplace(std::min(keep_lo, keep_hi), lo, hi, to, stamp_[lo], stamp_[hi]);
    }

    void push_edges_of(int v) {
        for (int w : neighbors_of(v)) push_edge(v, w);
    }

    bool collapsible(int from, int to) const {
        std::vector<int> third;
        for (int f : vertex_faces_[from]) {
            const Face& t = faces_[f];
            if (std::find(t.begin(), t.end(), to) == t.end()) continue;
            for (int w : t)
                if (w != from && w != to) third.push_back(w);
        }
        if (third.empty()) return false;
        std::sort(third.begin(), third.end());
        third.erase(std::unique(third.begin(), third.end()), third.end());

        const auto nf = neighbors_of(from), nt = neighbors_of(to);
        std::vector<int> common;
        std::set_intersection(nf.begin(), nf.end(), nt.begin(), nt.end(), std::back_inserter(common));
        if (common != third) return false;  // link condition

        // an interior edge joining two boundary vertices would pinch the surface
        if (boundary_vertex_[from] && boundary_vertex_[to] && third.size() > 1) return false;

        if (allow_flips_) return true;
        for (int f : vertex_faces_[from]) {
            Face t = faces_[f];
            if (std::find(t.begin(), t.end(), to) != t.end()) continue;
            const Eigen::Vector3d a0 = x_.row(t[0]), b0 = x_.row(t[1]), c0 = x_.row(t[2]);
            const Eigen::Vector3d before = (b0 - a0).cross(c0 - a0);
            for (int& w : t)
                if (w == from) w = to;
            const Eigen::Vector3d a1 = x_.row(t[0]), b1 = x_.row(t[1]), c1 = x_.row(t[2]);
            const Eigen::Vector3d after = (b1 - a1).cross(c1 - a1);
            if (!(after.dot(before) > 0.0)) return false;
        }
        return true;
    }

    void collapse(int from, int to) {
        const std::vector<int> incident = vertex_faces_[from];
        for (int f : incident) {
            Face& t = faces_[f];
            if (std::find(t.begin(), t.end(), to) != t.end()) {
                kill_face(f);
                continue;
            }
            for (int& w : t)
                if (w == from) w = to;
            vertex_faces_[to].push_back(f);
        }
        vertex_faces_[from].clear();
        alive_vertex_[from] = 0;
        --alive_count_;
        quadric_[to] += quadric_[from];
        boundary_vertex_[to] = boundary_vertex_[to] || boundary_vertex_[from];
        remove_duplicate_faces(to);

        auto ring = neighbors_of(to);
        ++stamp_[to];
        for (int w : ring) ++stamp_[w];
        push_edges_of(to);
        for (int w : ring) push_edges_of(w);
    }

    void kill_face(int f) {
        if (!alive_face_[f]) return;
        alive_face_[f] = 0;
        for (int v : faces_[f]) {
            auto& list = vertex_faces_[v];
            list.erase(std::remove(list.begin(), list.end(), f), list.end());
        }
    }

    void remove_duplicate_faces(int v) {
        std::vector<int> fs = vertex_faces_[v];
        std::sort(fs.begin(), fs.end());
        std::map<Face, int> seen;
        for (int f : fs) {
            Face key = faces_[f];
            std::sort(key.begin(), key.end());
            if (!seen.emplace(key, f).second) kill_face(f);
        }
    }

    MatrixXd x_;
    std::vector<Face> faces_;
    std::vector<Quadric> quadric_;
    std::vector<std::vector<int>> vertex_faces_;
    std::vector<char> alive_vertex_;
    std::vector<char> alive_face_;
    std::vector<char> boundary_vertex_;
    std::vector<std::uint64_t> stamp_;
    std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
    Index alive_count_ = 0;
    bool allow_flips_ = false;
};

/// Closest point on triangle (a, b, c) to p, returned as barycentric weights (Ericson, RTCD 5.1.5).
inline Eigen::Vector3d closest_barycentric(const Eigen::Vector3d& p, const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                                           const Eigen::Vector3d& c) {
    const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return {1, 0, 0};
    const Eigen::Vector3d bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return {0, 1, 0};
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        const double v = d1 / (d1 - d3);
        return {1 - v, v, 0};
    }
    const Eigen::Vector3d cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return {0, 0, 1};
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        const double w = d2 / (d2 - d6);
        return {1 - w, 0, w};
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return {0, 1 - w, w};
    }
    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return {1 - v - w, v, w};
}

}  // namespace detail

/// Greedy quadric-error edge collapse down to `target_count` vertices.
/// Ties in error go to the lexicographically smallest (min, max) endpoint pair.
inline DecimationResult decimate_qem(const Mesh& mesh, Index target_count) {
    if (target_count <= 0 || target_count >= mesh.num_vertices())
        throw std::invalid_argument("decimation target " + std::to_string(target_count) + " not in (0, " +
                                    std::to_string(mesh.num_vertices()) + ")");
    detail::HalfEdgeCollapser collapser(mesh);
    const bool reached = collapser.run(target_count);
    auto r = collapser.result();
    r.reached_target = reached;
    if (!reached)
        std::cerr << "warning: decimation stopped at " << r.kept.size() << " vertices (target " << target_count
                  << "): no legal collapse left\n";
    return r;
}

/// Row r selects input row kept[r].
inline SparseMatrix build_down_matrix(std::span<const int> kept, Index n_in) {
    std::vector<SparseMatrix::Triplet> t;
    std::vector<char> seen(static_cast<std::size_t>(n_in), 0);
    for (std::size_t r = 0; r < kept.size(); ++r) {
        const int k = kept[r];
        if (k < 0 || k >= n_in) throw std::invalid_argument("kept index " + std::to_string(k) + " out of range");
        if (seen[k]) throw std::invalid_argument("duplicate kept index " + std::to_string(k));
        seen[k] = 1;
        t.emplace_back(static_cast<int>(r), k, 1.0);
    }
    return SparseMatrix::from_triplets(static_cast<Index>(kept.size()), n_in, t);
}

/// Kept vertices map one-hot to their coarse index; every other fine vertex is
/// expressed in barycentric coordinates of its projection onto the nearest
/// coarse triangle (brute force over all triangles, lowest index wins ties).
inline SparseMatrix build_up_matrix(const Mesh& fine, const Mesh& coarse, std::span<const int> kept) {
    if (coarse.num_vertices() == 0 || coarse.faces.empty())
        throw std::invalid_argument("up-sampling needs a non-empty coarse mesh");
    const Index n_fine = fine.num_vertices();
    std::vector<int> coarse_of(static_cast<std::size_t>(n_fine), -1);
    for (std::size_t r = 0; r < kept.size(); ++r) coarse_of[kept[r]] = static_cast<int>(r);

    std::vector<SparseMatrix::Triplet> t;
    for (Index v = 0; v < n_fine; ++v) {
        if (coarse_of[v] >= 0) {
            t.emplace_back(static_cast<int>(v), coarse_of[v], 1.0);
            continue;
        }
        const Eigen::Vector3d p = fine.positions.row(v);
        double best = std::numeric_limits<double>::infinity();
        Eigen::Vector3d best_w;
        Face best_face{};
        for (const Face& f : coarse.faces) {
            const Eigen::Vector3d a = coarse.positions.row(f[0]), b = coarse.positions.row(f[1]),
                                  c = coarse.positions.row(f[2]);
            Eigen::Vector3d w = detail::closest_barycentric(p, a, b, c);
            const double d = (w(0) * a + w(1) * b + w(2) * c - p).squaredNorm();
            if (d < best) {
                best = d;
                best_w = w;
                best_face = f;
            }
        }
        best_w = best_w.cwiseMax(0.0);
        best_w /= best_w.sum();
        for (int k = 0; k < 3; ++k)
            if (best_w(k) > 0.0) t.emplace_back(static_cast<int>(v), best_face[k], best_w(k));
    }
    return SparseMatrix::from_triplets(n_fine, coarse.num_vertices(), t);
}

/// One level of the factor-2 hierarchy.
struct SamplingLevel {
    SparseMatrix down;          ///< n_out x n_in
    SparseMatrix up;            ///< n_in x n_out
    Mesh coarse_mesh;
    Adjacency coarse_adjacency;
    std::vector<int> kept;

    Index n_in() const noexcept { return down.cols(); }
    Index n_out() const noexcept { return down.rows(); }
};

struct Hierarchy {
    Mesh template_mesh;
    std::vector<SamplingLevel> levels;  ///< finest to coarsest

    Index vertex_count(std::size_t level) const {
        return level == 0 ? template_mesh.num_vertices() : levels[level - 1].n_out();
    }
};

inline SamplingLevel make_sampling_level(const Mesh& fine, Index target) {
    auto dec = decimate_qem(fine, target);
    if (!dec.reached_target)
        throw std::runtime_error("cannot halve a " + std::to_string(fine.num_vertices()) + "-vertex mesh: stopped at " +
                                 std::to_string(dec.kept.size()));
    SamplingLevel lvl;
    lvl.down = build_down_matrix(dec.kept, fine.num_vertices());
    lvl.up = build_up_matrix(fine, dec.coarse, dec.kept);
    lvl.coarse_adjacency = build_adjacency(dec.coarse);
    lvl.coarse_mesh = std::move(dec.coarse);
    lvl.kept = std::move(dec.kept);
    return lvl;
}

/// Builds `levels` successive halvings of the template.
inline Hierarchy build_hierarchy(const Mesh& template_mesh, int levels) {
    if (levels < 0) throw std::invalid_argument("negative level count");
    if (!validate_mesh(template_mesh).ok()) throw std::invalid_argument("hierarchy template fails validation");
    if ((template_mesh.num_vertices() >> levels) < 4)
        throw std::invalid_argument("template with " + std::to_string(template_mesh.num_vertices()) +
                                    " vertices cannot be halved " + std::to_string(levels) + " times");
    Hierarchy h;
    h.template_mesh = template_mesh;
    h.levels.reserve(static_cast<std::size_t>(levels));
    const Mesh* fine = &h.template_mesh;
    for (int l = 0; l < levels; ++l) {
        h.levels.push_back(make_sampling_level(*fine, fine->num_vertices() / 2));
        fine = &h.levels.back().coarse_mesh;
    }
    return h;
}

}  // namespace meshgeo
