#pragma once

#include "meshgeo/mesh.hpp"

#include <cmath>
#include <iostream>
#include <span>

namespace meshgeo {

struct CurvatureResult {
    Eigen::VectorXd values;          ///< signed mean curvature, 1/length
    std::vector<char> boundary;      ///< 1 where the vertex lies on a boundary edge (value forced to 0)
    std::vector<Index> degenerate;   ///< vertices whose mixed area vanished (value forced to 0)
};

/// Discrete mean curvature from the cotangent Laplace-Beltrami operator with
/// mixed Voronoi areas (Meyer et al.). The magnitude is half the norm of the
/// mean-curvature normal; the sign is positive when that normal agrees with
/// the area-weighted vertex normal, so convex closed outward-oriented
/// surfaces have H > 0.
inline CurvatureResult mean_curvature(const Mesh& mesh) {
    const Index n = mesh.num_vertices();
    const MatrixXd& x = mesh.positions;
    MatrixXd laplace = MatrixXd::Zero(n, 3);
    MatrixXd normal = MatrixXd::Zero(n, 3);
    Eigen::VectorXd area = Eigen::VectorXd::Zero(n);

    std::map<std::array<int, 2>, int> edge_count;
    for (const Face& f : mesh.faces) {
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            ++edge_count[{std::min(a, b), std::max(a, b)}];
        }
        const Eigen::Vector3d p[3] = {x.row(f[0]), x.row(f[1]), x.row(f[2])};
        const Eigen::Vector3d cross = (p[1] - p[0]).cross(p[2] - p[0]);
        const double twice_area = cross.norm();
        if (!(twice_area > 0.0)) continue;
        const double tri_area = 0.5 * twice_area;
        for (int k = 0; k < 3; ++k) normal.row(f[k]) += cross.transpose();

        double cot[3];
        bool obtuse_at[3];
        for (int k = 0; k < 3; ++k) {
            const Eigen::Vector3d u = p[(k + 1) % 3] - p[k], v = p[(k + 2) % 3] - p[k];
            const double d = u.dot(v);
            cot[k] = d / twice_area;
            obtuse_at[k] = d < 0.0;
        }
        const bool obtuse = obtuse_at[0] || obtuse_at[1] || obtuse_at[2];
        for (int k = 0; k < 3; ++k) {
            // corner k faces the edge (k+1, k+2)
            const int i = f[(k + 1) % 3], j = f[(k + 2) % 3];
            const Eigen::Vector3d e = p[(k + 1) % 3] - p[(k + 2) % 3];
            laplace.row(i) += cot[k] * e.transpose();
            laplace.row(j) -= cot[k] * e.transpose();
        }
        for (int k = 0; k < 3; ++k) {
            if (!obtuse) {
                const int k1 = (k + 1) % 3, k2 = (k + 2) % 3;
                // Voronoi region: 1/8 (|x_k - x_k1|^2 cot(k2) + |x_k - x_k2|^2 cot(k1))
                area(f[k]) += 0.125 * ((p[k] - p[k1]).squaredNorm() * cot[k2] + (p[k] - p[k2]).squaredNorm() * cot[k1]);
            } else {
                area(f[k]) += obtuse_at[k] ? tri_area / 2.0 : tri_area / 4.0;
            }
        }
    }

    CurvatureResult out;
    out.values = Eigen::VectorXd::Zero(n);
    out.boundary.assign(static_cast<std::size_t>(n), 0);
    for (const auto& [e, c] : edge_count)
        if (c == 1) out.boundary[e[0]] = out.boundary[e[1]] = 1;
    for (Index i = 0; i < n; ++i) {
        if (out.boundary[i]) continue;
        if (!(area(i) > 0.0)) {
            out.degenerate.push_back(i);
            continue;
        }
        const Eigen::Vector3d k = laplace.row(i).transpose();
        const double h = 0.5 * k.norm() / (2.0 * area(i));
        const double s = k.dot(normal.row(i).transpose());
        out.values(i) = s < 0.0 ? -h : h;
    }
    return out;
}

enum class SigmaMode { PerChannel, Scalar };

/// Training-set normalization statistics.
struct DatasetStats {
    MatrixXd template_mean;                 ///< N x 3 per-vertex mean position
    Eigen::RowVector3d sigma{1.0, 1.0, 1.0};///< per-channel scale (equal entries in scalar mode)
    double curvature_mean = 0.0;
    double curvature_std = 1.0;
    std::array<bool, 3> clamped{false, false, false};
};

namespace detail {

inline void check_same_count(std::span<const MatrixXd> xs) {
    if (xs.empty()) throw std::invalid_argument("dataset statistics need at least one sample");
    for (const auto& x : xs)
        if (x.rows() != xs[0].rows() || x.cols() != 3)
            throw ShapeError("sample of shape " + shape_str(x.rows(), x.cols()) + " in a set of " +
                             shape_str(xs[0].rows(), 3) + " samples");
}

}  // namespace detail

/// X_T is the per-vertex mean; sigma is the population standard deviation of
/// X - X_T pooled over all vertices and samples, per channel (or over all
/// three channels in scalar mode). Zero spread is clamped to 1e-8.
inline DatasetStats compute_dataset_stats(std::span<const MatrixXd> training_positions,
                                          SigmaMode mode = SigmaMode::PerChannel) {
    detail::check_same_count(training_positions);
    const Index n = training_positions[0].rows();
    const double count = static_cast<double>(training_positions.size());
    DatasetStats s;
    s.template_mean = MatrixXd::Zero(n, 3);
    for (const auto& x : training_positions) s.template_mean += x;
    s.template_mean /= count;

    Eigen::RowVector3d sq = Eigen::RowVector3d::Zero();
    for (const auto& x : training_positions) sq += (x - s.template_mean).colwise().squaredNorm();
    const double denom = count * static_cast<double>(n);
    Eigen::RowVector3d sigma = (sq / denom).cwiseSqrt();
    if (mode == SigmaMode::Scalar) sigma.setConstant(std::sqrt(sq.sum() / (3.0 * denom)));
    for (int c = 0; c < 3; ++c) {
        if (!(sigma(c) > 1e-8)) {
            sigma(c) = 1e-8;
            s.clamped[c] = true;
        }
    }
    if (s.clamped[0] || s.clamped[1] || s.clamped[2])
        std::cerr << "warning: zero positional variance in training set; sigma clamped to 1e-8\n";
    s.sigma = sigma;
    return s;
}

/// Adds the curvature-channel standardization over the training meshes.
inline void fit_curvature_stats(DatasetStats& stats, std::span<const Mesh> training_meshes) {
    double sum = 0.0, sum_sq = 0.0;
    double count = 0.0;
    for (const auto& m : training_meshes) {
        auto h = mean_curvature(m).values;
        sum += h.sum();
        sum_sq += h.squaredNorm();
        count += static_cast<double>(h.size());
    }
    if (count == 0.0) return;
    stats.curvature_mean = sum / count;
    const double var = std::max(0.0, sum_sq / count - stats.curvature_mean * stats.curvature_mean);
    stats.curvature_std = std::sqrt(var) > 1e-8 ? std::sqrt(var) : 1e-8;
}

inline DatasetStats compute_dataset_stats(std::span<const Mesh> training_meshes,
                                          SigmaMode mode = SigmaMode::PerChannel) {
    std::vector<MatrixXd> xs;
    xs.reserve(training_meshes.size());
    for (const auto& m : training_meshes) xs.push_back(m.positions);
    auto s = compute_dataset_stats(std::span<const MatrixXd>(xs), mode);
    fit_curvature_stats(s, training_meshes);
    return s;
}

inline void check_stats_shape(const MatrixXd& x, const DatasetStats& stats) {
    if (x.rows() != stats.template_mean.rows() || x.cols() != 3)
        throw ShapeError("positions " + shape_str(x.rows(), x.cols()) + " do not match template " +
                         shape_str(stats.template_mean.rows(), 3));
}

inline MatrixXd normalize(const MatrixXd& x, const DatasetStats& stats) {
    check_stats_shape(x, stats);
    return (x - stats.template_mean).array().rowwise() / stats.sigma.array();
}

inline MatrixXd denormalize(const MatrixXd& xhat, const DatasetStats& stats) {
    check_stats_shape(xhat, stats);
    MatrixXd out = xhat.array().rowwise() * stats.sigma.array();
    return out + stats.template_mean;
}

/// N x 3 normalized positions, plus a standardized mean-curvature column when requested.
inline MatrixXd assemble_features(const Mesh& mesh, const DatasetStats& stats, bool use_curvature) {
    MatrixXd pos = normalize(mesh.positions, stats);
    if (!use_curvature) return pos;
    MatrixXd out(pos.rows(), 4);
    out.leftCols(3) = pos;
    const auto h = mean_curvature(mesh).values;
    out.col(3) = (h.array() - stats.curvature_mean) / stats.curvature_std;
    return out;
}

}  // namespace meshgeo
