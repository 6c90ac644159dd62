#pragma once

#include "meshgeo/common.hpp"

#include <Eigen/SparseCore>

#include <algorithm>
#include <span>
#include <vector>

namespace meshgeo {

/// Compressed-row sparse matrix used for the sampling operators.
///
/// Column indices are strictly increasing within a row and no explicit zero
/// is stored. Storage is an Eigen row-major sparse matrix kept compressed.
class SparseMatrix {
public:
    using Storage = Eigen::SparseMatrix<double, Eigen::RowMajor, int>;
    using Triplet = Eigen::Triplet<double, int>;

    SparseMatrix() = default;

    SparseMatrix(Index rows, Index cols) : m_(static_cast<int>(rows), static_cast<int>(cols)) {
        m_.makeCompressed();
    }

    /// Duplicate coordinates are summed; entries that end up exactly zero are dropped.
    static SparseMatrix from_triplets(Index rows, Index cols, const std::vector<Triplet>& triplets) {
        for (const auto& t : triplets) {
            if (t.row() < 0 || t.row() >= rows || t.col() < 0 || t.col() >= cols)
                throw std::out_of_range("sparse triplet outside " + shape_str(rows, cols));
        }
        SparseMatrix s;
        s.m_.resize(static_cast<int>(rows), static_cast<int>(cols));
        s.m_.setFromTriplets(triplets.begin(), triplets.end());
        s.m_.prune(0.0, 0.0);
        s.m_.makeCompressed();
        return s;
    }

    static SparseMatrix identity(Index n) {
        std::vector<Triplet> t;
        t.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) t.emplace_back(i, i, 1.0);
        return from_triplets(n, n, t);
    }

    Index rows() const noexcept { return m_.rows(); }
    Index cols() const noexcept { return m_.cols(); }
    Index nnz() const noexcept { return m_.nonZeros(); }

    std::span<const int> row_offsets() const noexcept {
        return {m_.outerIndexPtr(), static_cast<std::size_t>(m_.rows()) + 1};
    }
    std::span<const int> col_indices() const noexcept {
        return {m_.innerIndexPtr(), static_cast<std::size_t>(m_.nonZeros())};
    }
    std::span<const double> values() const noexcept {
        return {m_.valuePtr(), static_cast<std::size_t>(m_.nonZeros())};
    }

    std::vector<Triplet> triplets() const {
        std::vector<Triplet> out;
        out.reserve(static_cast<std::size_t>(nnz()));
        for (int r = 0; r < m_.outerSize(); ++r)
            for (Storage::InnerIterator it(m_, r); it; ++it) out.emplace_back(r, it.col(), it.value());
        return out;
    }

    const Storage& storage() const noexcept { return m_; }

    MatrixXd to_dense() const { return MatrixXd(m_); }

    /// this * X.
    template <class T>
    Matrix<T> apply(const Matrix<T>& x) const {
        if (x.rows() != cols())
            throw ShapeError("sparse apply: " + shape_str(rows(), cols()) + " * " +
                             shape_str(x.rows(), x.cols()));
        Matrix<T> out = Matrix<T>::Zero(rows(), x.cols());
        const auto off = row_offsets();
        const auto idx = col_indices();
        const auto val = values();
        for (Index r = 0; r < rows(); ++r)
            for (int k = off[r]; k < off[r + 1]; ++k) out.row(r) += static_cast<T>(val[k]) * x.row(idx[k]);
        return out;
    }

    /// this^T * G, used for the backward pass of apply.
    template <class T>
    Matrix<T> apply_transpose(const Matrix<T>& g) const {
        if (g.rows() != rows())
            throw ShapeError("sparse apply_transpose: " + shape_str(rows(), cols()) + "^T * " +
                             shape_str(g.rows(), g.cols()));
        Matrix<T> out = Matrix<T>::Zero(cols(), g.cols());
        const auto off = row_offsets();
        const auto idx = col_indices();
        const auto val = values();
        for (Index r = 0; r < rows(); ++r)
            for (int k = off[r]; k < off[r + 1]; ++k) out.row(idx[k]) += static_cast<T>(val[k]) * g.row(r);
        return out;
    }

    friend bool operator==(const SparseMatrix& a, const SparseMatrix& b) {
        if (a.rows() != b.rows() || a.cols() != b.cols() || a.nnz() != b.nnz()) return false;
        const auto ao = a.row_offsets(), bo = b.row_offsets();
        const auto ai = a.col_indices(), bi = b.col_indices();
        const auto av = a.values(), bv = b.values();
        return std::equal(ao.begin(), ao.end(), bo.begin()) && std::equal(ai.begin(), ai.end(), bi.begin()) &&
               std::equal(av.begin(), av.end(), bv.begin());
    }

private:
    Storage m_;
};

}  // namespace meshgeo
