#pragma once

#include "meshgeo/autodiff.hpp"
#include "meshgeo/mesh.hpp"

#include <limits>
#include <memory>

namespace meshgeo {

/// Feature-steered convolution weights bound to a tape.
///
/// `weight` stacks the M head matrices side by side (F_in x M*F_out), `steer`
/// holds the steering vectors u_m as columns (F_in x M), `steer_bias` the
/// offsets c_m (1 x M) and `bias` the output bias (1 x F_out).
template <class T>
struct FeaStConvWeights {
    ad::Tensor<T> weight;
    ad::Tensor<T> steer;
    ad::Tensor<T> steer_bias;
    ad::Tensor<T> bias;

    Index heads() const { return steer.cols(); }
    Index in_channels() const { return weight.rows(); }
    Index out_channels() const { return bias.cols(); }
};

template <class T>
struct LinearWeights {
    ad::Tensor<T> weight;  ///< in x out
    ad::Tensor<T> bias;    ///< 1 x out
};

template <class T>
struct AttentionWeights {
    LinearWeights<T> layer1;  ///< 2 F_dec -> hidden
    LinearWeights<T> layer2;  ///< hidden -> 2
};

/// y_i = b + 1/|N(i)| sum_{j in N(i)} sum_m q_m(x_i, x_j) W_m x_j,
/// q_m = softmax_m(u_m^T (x_j - x_i) + c_m). With `degree_normalize` off the
/// 1/|N(i)| factor is dropped. Recorded as a single tape node.
template <class T>
ad::Tensor<T> feastconv(const ad::Tensor<T>& x, const Adjacency& adj, const FeaStConvWeights<T>& w,
                        bool degree_normalize = true) {
    const Index n = x.rows();
    const Index fin = x.cols();
    const Index heads = w.heads();
    const Index fout = w.out_channels();
    if (adj.size() != n) throw ShapeError("feastconv: " + std::to_string(n) + " rows for a " +
                                          std::to_string(adj.size()) + "-vertex graph");
    if (w.weight.rows() != fin || w.weight.cols() != heads * fout || w.steer.rows() != fin ||
        w.steer_bias.rows() != 1 || w.steer_bias.cols() != heads || w.bias.rows() != 1)
        throw ShapeError("feastconv: parameter shapes do not match input " + shape_str(n, fin));

    auto& tape = x.tape();
    const auto& X = x.value();
    Matrix<T> proj(n, heads * fout);
    proj.noalias() = X * w.weight.value();
    Matrix<T> steer(n, heads);
    steer.noalias() = X * w.steer.value();
    const auto& c = w.steer_bias.value();

    const auto& offsets = adj.offsets();
    const auto& nbr = adj.indices();
    auto q = std::make_shared<std::vector<T>>(static_cast<std::size_t>(offsets[n]) * heads);
    auto inv_deg = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));

    Matrix<T> out = w.bias.value().replicate(n, 1);
    Eigen::Matrix<T, 1, Eigen::Dynamic> acc(fout);
    for (Index i = 0; i < n; ++i) {
        const T scale = degree_normalize ? T(1) / static_cast<T>(offsets[i + 1] - offsets[i]) : T(1);
        (*inv_deg)[i] = scale;
        acc.setZero();
        for (int e = offsets[i]; e < offsets[i + 1]; ++e) {
            const int j = nbr[e];
            T* qe = q->data() + static_cast<std::size_t>(e) * heads;
            T mx = -std::numeric_limits<T>::infinity();
            for (Index m = 0; m < heads; ++m) {
                qe[m] = steer(j, m) - steer(i, m) + c(0, m);
                mx = std::max(mx, qe[m]);
            }
            T total = 0;
            for (Index m = 0; m < heads; ++m) {
                qe[m] = std::exp(qe[m] - mx);
                total += qe[m];
            }
            for (Index m = 0; m < heads; ++m) {
                qe[m] /= total;
                acc.noalias() += qe[m] * proj.row(j).segment(m * fout, fout);
            }
        }
        out.row(i) += scale * acc;
    }

    const auto ix = x.id(), iw = w.weight.id(), iu = w.steer.id(), ic = w.steer_bias.id(), ib = w.bias.id();
    auto proj_ptr = std::make_shared<Matrix<T>>(std::move(proj));
    return tape.record(std::move(out), {x, w.weight, w.steer, w.steer_bias, w.bias},
                       [=, &adj](ad::Tape<T>& t, const Matrix<T>& g) {
                           const auto& P = *proj_ptr;
                           const auto& off = adj.offsets();
                           const auto& nb = adj.indices();
                           Matrix<T> gp = Matrix<T>::Zero(n, heads * fout);
                           Matrix<T> gs = Matrix<T>::Zero(n, heads);
                           Matrix<T> gc = Matrix<T>::Zero(1, heads);
                           std::vector<T> gq(static_cast<std::size_t>(heads));
                           for (Index i = 0; i < n; ++i) {
                               const auto gi = ((*inv_deg)[i] * g.row(i)).eval();
                               for (int e = off[i]; e < off[i + 1]; ++e) {
                                   const int j = nb[e];
                                   const T* qe = q->data() + static_cast<std::size_t>(e) * heads;
                                   T dot = 0;
                                   for (Index m = 0; m < heads; ++m) {
                                       gq[m] = gi.dot(P.row(j).segment(m * fout, fout));
                                       gp.row(j).segment(m * fout, fout).noalias() += qe[m] * gi;
                                       dot += qe[m] * gq[m];
                                   }
                                   for (Index m = 0; m < heads; ++m) {
                                       const T gl = qe[m] * (gq[m] - dot);
                                       gs(j, m) += gl;
                                       gs(i, m) -= gl;
                                       gc(0, m) += gl;
                                   }
                               }
                           }
                           const auto& Xv = t.value(ix);
                           if (t.requires_grad(ix)) {
                               Matrix<T> gx(n, fin);
                               gx.noalias() = gp * t.value(iw).transpose();
                               gx.noalias() += gs * t.value(iu).transpose();
                               t.accumulate(ix, gx);
                           }
                           if (t.requires_grad(iw)) t.accumulate(iw, Xv.transpose() * gp);
                           if (t.requires_grad(iu)) t.accumulate(iu, Xv.transpose() * gs);
                           if (t.requires_grad(ic)) t.accumulate(ic, gc);
                           if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                       });
}

/// FeaStConv followed by LeakyReLU.
template <class T>
ad::Tensor<T> gc_layer(const ad::Tensor<T>& x, const Adjacency& adj, const FeaStConvWeights<T>& w, T slope,
                       bool degree_normalize = true) {
    return ad::leaky_relu(feastconv(x, adj, w, degree_normalize), slope);
}

template <class T>
ad::Tensor<T> linear(const ad::Tensor<T>& x, const LinearWeights<T>& w) {
    return ad::add_row(ad::matmul(x, w.weight), w.bias);
}

template <class T>
struct FusionResult {
    ad::Tensor<T> global_weight;  ///< N x 1
    ad::Tensor<T> local_weight;   ///< N x 1
    ad::Tensor<T> fused;          ///< N x F_dec
};

/// Per-vertex convex combination of the two decoder outputs; weights come from
/// softmax(layer2(relu(layer1([x_G | x_L])))).
template <class T>
FusionResult<T> attention_fuse(const ad::Tensor<T>& xg, const ad::Tensor<T>& xl, const AttentionWeights<T>& w) {
    if (xg.rows() != xl.rows() || xg.cols() != xl.cols())
        throw ShapeError("attention_fuse: " + shape_str(xg.rows(), xg.cols()) + " vs " + shape_str(xl.rows(), xl.cols()));
    auto hidden = ad::relu(linear(ad::concat_cols(xg, xl), w.layer1));
    auto att = ad::softmax_rows(linear(hidden, w.layer2));
    FusionResult<T> r;
    r.global_weight = ad::slice_cols(att, 0, 1);
    r.local_weight = ad::slice_cols(att, 1, 1);
    r.fused = ad::add(ad::scale_rows(xg, r.global_weight), ad::scale_rows(xl, r.local_weight));
    return r;
}

}  // namespace meshgeo
