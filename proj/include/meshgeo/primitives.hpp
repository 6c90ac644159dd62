#pragma once

#include "meshgeo/mesh.hpp"

#include <cmath>
#include <map>

namespace meshgeo {

/// Icosahedron refined by repeated 1-to-4 splits with midpoints pushed to the sphere.
/// Vertex count is 10 * 4^s + 2; faces are oriented outward.
inline Mesh make_icosphere(int subdivisions, double radius = 1.0) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Eigen::Vector3d> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0},
                                      {0, -1, t}, {0, 1, t}, {0, -1, -t}, {0, 1, -t},
                                      {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    for (auto& p : v) p.normalize();
    std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                           {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                           {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (int s = 0; s < subdivisions; ++s) {
        std::map<std::pair<int, int>, int> mid;
        auto midpoint = [&](int a, int b) {
            auto key = std::minmax(a, b);
            auto it = mid.find(key);
            if (it != mid.end()) return it->second;
            v.push_back((v[a] + v[b]).normalized());
            int id = static_cast<int>(v.size()) - 1;
            mid.emplace(key, id);
            return id;
        };
        std::vector<Face> next;
        next.reserve(f.size() * 4);
        for (const Face& tri : f) {
            int a = midpoint(tri[0], tri[1]), b = midpoint(tri[1], tri[2]), c = midpoint(tri[2], tri[0]);
            next.push_back({tri[0], a, c});
            next.push_back({tri[1], b, a});
            next.push_back({tri[2], c, b});
            next.push_back({a, b, c});
        }
        f = std::move(next);
    }
    Mesh m;
    m.positions.resize(static_cast<Index>(v.size()), 3);
    for (std::size_t i = 0; i < v.size(); ++i) m.positions.row(static_cast<Index>(i)) = radius * v[i].transpose();
    m.faces = std::move(f);
    return m;
}

/// Flat nx-by-ny vertex grid in the z = 0 plane, each cell split along its diagonal.
inline Mesh make_grid(int nx, int ny, double spacing = 1.0) {
    if (nx < 2 || ny < 2) throw std::invalid_argument("grid needs at least 2x2 vertices");
    Mesh m;
    m.positions.resize(static_cast<Index>(nx) * ny, 3);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) m.positions.row(j * nx + i) << i * spacing, j * spacing, 0.0;
    for (int j = 0; j + 1 < ny; ++j)
        for (int i = 0; i + 1 < nx; ++i) {
            int a = j * nx + i, b = a + 1, c = a + nx, d = c + 1;
            m.faces.push_back({a, b, d});
            m.faces.push_back({a, d, c});
        }
    return m;
}

inline Mesh make_tetrahedron() {
    Mesh m;
    m.positions.resize(4, 3);
    m.positions << 1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1;
    m.faces = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
    return m;
}

inline Eigen::Vector3d bbox_extent(const MatrixXd& positions) {
    return (positions.colwise().maxCoeff() - positions.colwise().minCoeff()).transpose();
}

inline double bbox_diagonal(const MatrixXd& positions) { return bbox_extent(positions).norm(); }

}  // namespace meshgeo
