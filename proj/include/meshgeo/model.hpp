#pragma once

#include "meshgeo/geometry.hpp"
#include "meshgeo/layers.hpp"
#include "meshgeo/sampling.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>

namespace meshgeo {

enum class PathMode { Both, LocalOnly, GlobalOnly };

inline std::string to_string(PathMode m) {
    switch (m) {
        case PathMode::LocalOnly: return "local_only";
        case PathMode::GlobalOnly: return "global_only";
        default: return "both";
    }
}

inline PathMode path_mode_from_string(const std::string& s) {
    if (s == "both") return PathMode::Both;
    if (s == "local_only") return PathMode::LocalOnly;
    if (s == "global_only") return PathMode::GlobalOnly;
    throw std::invalid_argument("unknown path mode '" + s + "' (expected both, local_only or global_only)");
}

struct ModelConfig {
    Index n_vertices = 0;
    Index latent = 256;
    std::vector<Index> local_channels{8, 16, 32};
    std::vector<Index> global_channels{32, 64, 128};
    int levels = 3;
    Index heads = 8;
    double slope = 0.01;
    bool use_attention = true;
    bool use_residual = true;
    bool use_curvature = true;
    bool degree_normalize = true;
    PathMode path_mode = PathMode::Both;
    Index attention_hidden = 0;  ///< 0 means F_out

    Index in_channels() const noexcept { return use_curvature ? 4 : 3; }
    Index out_channels() const noexcept { return in_channels(); }
    Index half_latent() const noexcept { return latent / 2; }
    Index hidden() const noexcept { return attention_hidden > 0 ? attention_hidden : out_channels(); }

    /// Vertex count after `level` halvings.
    Index vertices_at(int level) const noexcept {
        Index n = n_vertices;
        for (int l = 0; l < level; ++l) n /= 2;
        return n;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
        if (n_vertices <= 0) fail("vertex count must be positive");
        if (latent <= 0 || latent % 2 != 0) fail("latent size must be positive and even, got " + std::to_string(latent));
        if (levels < 1) fail("need at least one sampling level");
        if (static_cast<int>(global_channels.size()) != levels)
            fail(std::to_string(global_channels.size()) + " global channel widths for " + std::to_string(levels) +
                 " levels");
        if (local_channels.empty()) fail("local path needs at least one layer");
        if (heads < 1) fail("heads must be at least 1");
        if (vertices_at(levels) < 1) fail("too many levels for the vertex count");
        for (Index c : local_channels)
            if (c <= 0) fail("non-positive local width");
        for (Index c : global_channels)
            if (c <= 0) fail("non-positive global width");
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_vertices", c.n_vertices},
                       {"latent", c.latent},
                       {"local_channels", c.local_channels},
                       {"global_channels", c.global_channels},
                       {"levels", c.levels},
                       {"heads", c.heads},
                       {"slope", c.slope},
                       {"use_attention", c.use_attention},
                       {"use_residual", c.use_residual},
                       {"use_curvature", c.use_curvature},
                       {"degree_normalize", c.degree_normalize},
                       {"path_mode", to_string(c.path_mode)},
                       {"attention_hidden", c.attention_hidden}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    for (const auto& [key, value] : j.items()) {
        if (key == "n_vertices") value.get_to(c.n_vertices);
        else if (key == "latent") value.get_to(c.latent);
        else if (key == "local_channels") value.get_to(c.local_channels);
        else if (key == "global_channels") value.get_to(c.global_channels);
        else if (key == "levels") value.get_to(c.levels);
        else if (key == "heads") value.get_to(c.heads);
        else if (key == "slope") value.get_to(c.slope);
        else if (key == "use_attention") value.get_to(c.use_attention);
        else if (key == "use_residual") value.get_to(c.use_residual);
        else if (key == "use_curvature") value.get_to(c.use_curvature);
        else if (key == "degree_normalize") value.get_to(c.degree_normalize);
        else if (key == "path_mode") c.path_mode = path_mode_from_string(value.get<std::string>());
        else if (key == "attention_hidden") value.get_to(c.attention_hidden);
        else throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
}

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return nlohmann::json(a) == nlohmann::json(b);
}

/// Named parameter tensors. Iteration order (and therefore initialization and
/// serialization order) is the lexicographic order of the names.
template <class T>
struct ModelParams {
    std::map<std::string, Matrix<T>> tensors;

    const Matrix<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }
    Matrix<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, m] : tensors) n += static_cast<std::size_t>(m.size());
        return n;
    }

    /// Same names and shapes, all zeros.
    ModelParams zeros_like() const {
        ModelParams z;
        for (const auto& [name, m] : tensors) z.tensors.emplace(name, Matrix<T>::Zero(m.rows(), m.cols()));
        return z;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        for (const auto& [name, m] : tensors) out.tensors.emplace(name, m.template cast<U>());
        return out;
    }

    bool operator==(const ModelParams&) const = default;
};

namespace detail {

struct ParamShape {
    std::string name;
    Index rows, cols;
    Index fan_in, fan_out;
    bool zero;
};

inline void conv_shapes(std::vector<ParamShape>& out, const std::string& prefix, Index in, Index outc, Index heads) {
    out.push_back({prefix + ".W", in, heads * outc, in, outc, false});
    out.push_back({prefix + ".u", in, heads, in, heads, false});
    out.push_back({prefix + ".c", 1, heads, 0, 0, true});
    out.push_back({prefix + ".b", 1, outc, 0, 0, true});
}

inline void linear_shapes(std::vector<ParamShape>& out, const std::string& prefix, Index in, Index outc) {
    out.push_back({prefix + ".W", in, outc, in, outc, false});
    out.push_back({prefix + ".b", 1, outc, 0, 0, true});
}

/// Input and output widths of each local decoder layer: reversed local widths, then F_out.
inline std::vector<Index> local_decoder_ladder(const ModelConfig& c) {
    std::vector<Index> ladder(c.local_channels.rbegin(), c.local_channels.rend());
    ladder.push_back(c.out_channels());
    return ladder;
}

inline std::vector<ParamShape> param_shapes(const ModelConfig& c) {
    c.validate();
    std::vector<ParamShape> s;
    const Index fin = c.in_channels(), fout = c.out_channels(), half = c.half_latent();
    const auto& gch = c.global_channels;
    const auto& lch = c.local_channels;
    const int levels = c.levels;

    for (int l = 0; l < levels; ++l)
        conv_shapes(s, "enc.global.gc" + std::to_string(l), l == 0 ? fin : gch[l - 1], gch[l], c.heads);
    linear_shapes(s, "enc.global.lin", gch.back(), half);
    for (std::size_t l = 0; l < lch.size(); ++l) {
        const Index in = l == 0 ? fin : lch[l - 1];
        conv_shapes(s, "enc.local.gc" + std::to_string(l), in, lch[l], c.heads);
        if (c.use_residual && in != lch[l])
            s.push_back({"enc.local.res" + std::to_string(l) + ".P", in, lch[l], in, lch[l], false});
    }
    linear_shapes(s, "enc.local.lin", c.n_vertices * lch.back(), half);
    linear_shapes(s, "enc.fc", c.latent, c.latent);

    linear_shapes(s, "dec.fc", c.latent, c.latent);
    linear_shapes(s, "dec.global.lin", half, c.vertices_at(levels) * gch.back());
    for (int k = 0; k < levels; ++k) {
        const Index in = gch[levels - 1 - k];
        const Index out = k == levels - 1 ? fout : gch[levels - 2 - k];
        conv_shapes(s, "dec.global.gc" + std::to_string(k), in, out, c.heads);
    }
    const auto ladder = local_decoder_ladder(c);
    linear_shapes(s, "dec.local.lin", half, c.n_vertices * ladder.front());
    for (std::size_t k = 0; k + 1 < ladder.size(); ++k) {
        conv_shapes(s, "dec.local.gc" + std::to_string(k), ladder[k], ladder[k + 1], c.heads);
        if (c.use_residual && ladder[k] != ladder[k + 1])
            s.push_back({"dec.local.res" + std::to_string(k) + ".P", ladder[k], ladder[k + 1], ladder[k],
                         ladder[k + 1], false});
    }
    linear_shapes(s, "att.layer1", 2 * fout, c.hidden());
    linear_shapes(s, "att.layer2", c.hidden(), 2);
    return s;
}

}  // namespace detail

/// Weights uniform in ±sqrt(6 / (fan_in + fan_out)); biases and steering offsets zero.
template <class T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
    auto shapes = detail::param_shapes(config);
    std::sort(shapes.begin(), shapes.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    std::mt19937_64 rng(seed);
    ModelParams<T> p;
    for (const auto& s : shapes) {
        Matrix<T> m = Matrix<T>::Zero(s.rows, s.cols);
        if (!s.zero) {
            const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(u(rng));
        }
        p.tensors.emplace(s.name, std::move(m));
    }
    return p;
}

/// Throws ShapeError unless `p` holds exactly the tensors `config` calls for.
template <class T>
void check_params(const ModelConfig& config, const ModelParams<T>& p) {
    const auto shapes = detail::param_shapes(config);
    if (shapes.size() != p.tensors.size())
        throw ShapeError("expected " + std::to_string(shapes.size()) + " parameter tensors, found " +
                         std::to_string(p.tensors.size()));
    for (const auto& s : shapes) {
        auto it = p.tensors.find(s.name);
        if (it == p.tensors.end()) throw ShapeError("missing parameter " + s.name);
        if (it->second.rows() != s.rows || it->second.cols() != s.cols)
            throw ShapeError(s.name + ": expected " + shape_str(s.rows, s.cols) + ", found " +
                             shape_str(it->second.rows(), it->second.cols()));
    }
}

/// Template topology shared by every sample: the sampling hierarchy plus the
/// adjacency of each level (level 0 is the template itself).
struct MeshGraph {
    Hierarchy hierarchy;
    std::vector<Adjacency> adjacency;

    static MeshGraph build(const Mesh& template_mesh, int levels) {
        return from_hierarchy(build_hierarchy(template_mesh, levels));
    }

    static MeshGraph from_hierarchy(Hierarchy h) {
        MeshGraph g;
        g.adjacency.push_back(build_adjacency(h.template_mesh));
        for (const auto& lvl : h.levels) g.adjacency.push_back(lvl.coarse_adjacency);
        g.hierarchy = std::move(h);
        return g;
    }

    const Adjacency& at(int level) const { return adjacency.at(static_cast<std::size_t>(level)); }
    int levels() const noexcept { return static_cast<int>(hierarchy.levels.size()); }
    Index vertices() const noexcept { return hierarchy.template_mesh.num_vertices(); }
};

inline void check_graph(const ModelConfig& c, const MeshGraph& g) {
    if (g.vertices() != c.n_vertices)
        throw ShapeError("template has " + std::to_string(g.vertices()) + " vertices, model expects " +
                         std::to_string(c.n_vertices));
    if (g.levels() != c.levels)
        throw ShapeError("hierarchy has " + std::to_string(g.levels()) + " levels, model expects " +
                         std::to_string(c.levels));
    for (int l = 0; l <= c.levels; ++l)
        if (g.hierarchy.vertex_count(static_cast<std::size_t>(l)) != c.vertices_at(l))
            throw ShapeError("level " + std::to_string(l) + " has " +
                             std::to_string(g.hierarchy.vertex_count(static_cast<std::size_t>(l))) +
                             " vertices, expected " + std::to_string(c.vertices_at(l)));
}

/// Parameters recorded as tape leaves.
template <class T>
class BoundParams {
public:
    /// With `grads` set, every leaf accumulates its gradient into the matching
    /// tensor of `grads` (created on demand). Both maps must outlive the tape.
    BoundParams(ad::Tape<T>& tape, const ModelParams<T>& params, ModelParams<T>* grads = nullptr) {
        for (const auto& [name, value] : params.tensors) {
            Matrix<T>* sink = grads ? &grads->tensors[name] : nullptr;
            leaves_.emplace(name, tape.parameter(value, sink));
        }
    }

    /// Wraps tensors that are already on a tape.
    static BoundParams from_leaves(std::map<std::string, ad::Tensor<T>> leaves) {
        BoundParams b;
        b.leaves_ = std::move(leaves);
        return b;
    }

    const ad::Tensor<T>& operator[](const std::string& name) const {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return leaves_.count(name) != 0; }

    FeaStConvWeights<T> conv(const std::string& prefix) const {
        return {(*this)[prefix + ".W"], (*this)[prefix + ".u"], (*this)[prefix + ".c"], (*this)[prefix + ".b"]};
    }
    LinearWeights<T> lin(const std::string& prefix) const { return {(*this)[prefix + ".W"], (*this)[prefix + ".b"]}; }
    AttentionWeights<T> attention() const { return {lin("att.layer1"), lin("att.layer2")}; }

private:
    BoundParams() = default;

    std::map<std::string, ad::Tensor<T>> leaves_;
};

namespace detail {

// out = act(conv(x)) + proj(x), proj being identity on equal widths
template <class T>
ad::Tensor<T> residual_block(const ad::Tensor<T>& x, const Adjacency& adj, const BoundParams<T>& p,
                             const std::string& conv, const std::string& res, const ModelConfig& c, bool activate) {
    auto y = feastconv(x, adj, p.conv(conv), c.degree_normalize);
    if (activate) y = ad::leaky_relu(y, static_cast<T>(c.slope));
    if (!c.use_residual) return y;
    if (p.contains(res + ".P")) return ad::add(y, ad::matmul(x, p[res + ".P"]));
    return ad::add(y, x);
}

}  // namespace detail

/// GC layers interleaved with down-sampling, then linear to Z/2, mean over vertices, LeakyReLU.
template <class T>
ad::Tensor<T> encode_global(const ad::Tensor<T>& x, const MeshGraph& g, const BoundParams<T>& p, const ModelConfig& c) {
    auto h = x;
    for (int l = 0; l < c.levels; ++l) {
        h = gc_layer(h, g.at(l), p.conv("enc.global.gc" + std::to_string(l)), static_cast<T>(c.slope),
                     c.degree_normalize);
        h = ad::spmm(g.hierarchy.levels[static_cast<std::size_t>(l)].down, h);
    }
    h = linear(h, p.lin("enc.global.lin"));
    return ad::leaky_relu(ad::mean_rows(h), static_cast<T>(c.slope));
}

/// Residual GC layers on the template graph, flattened, linear to Z/2, LeakyReLU.
template <class T>
ad::Tensor<T> encode_local(const ad::Tensor<T>& x, const Adjacency& adj, const BoundParams<T>& p,
                           const ModelConfig& c) {
    auto h = x;
    for (std::size_t l = 0; l < c.local_channels.size(); ++l) {
        const auto k = std::to_string(l);
        h = detail::residual_block(h, adj, p, "enc.local.gc" + k, "enc.local.res" + k, c, true);
    }
    return ad::leaky_relu(linear(ad::flatten(h), p.lin("enc.local.lin")), static_cast<T>(c.slope));
}

/// z = FC([z_G | z_L]); the half of a disabled path is zero.
template <class T>
ad::Tensor<T> encode(const ad::Tensor<T>& x, const MeshGraph& g, const BoundParams<T>& p, const ModelConfig& c) {
    if (x.rows() != c.n_vertices || x.cols() != c.in_channels())
        throw ShapeError("encoder input " + shape_str(x.rows(), x.cols()) + ", expected " +
                         shape_str(c.n_vertices, c.in_channels()));
    auto& tape = x.tape();
    const auto zero = [&] { return tape.constant(Matrix<T>::Zero(1, c.half_latent())); };
    auto zg = c.path_mode == PathMode::LocalOnly ? zero() : encode_global(x, g, p, c);
    auto zl = c.path_mode == PathMode::GlobalOnly ? zero() : encode_local(x, g.at(0), p, c);
    return linear(ad::concat_cols(zg, zl), p.lin("enc.fc"));
}

template <class T>
struct Decoded {
    ad::Tensor<T> output;         ///< N x F_out
    ad::Tensor<T> global_weight;  ///< N x 1
    ad::Tensor<T> local_weight;   ///< N x 1
};

template <class T>
ad::Tensor<T> decode_global(const ad::Tensor<T>& zg, const MeshGraph& g, const BoundParams<T>& p,
                            const ModelConfig& c) {
    auto h = ad::reshape(linear(zg, p.lin("dec.global.lin")), c.vertices_at(c.levels), c.global_channels.back());
    for (int k = 0; k < c.levels; ++k) {
        const int level = c.levels - 1 - k;
        h = ad::spmm(g.hierarchy.levels[static_cast<std::size_t>(level)].up, h);
        h = feastconv(h, g.at(level), p.conv("dec.global.gc" + std::to_string(k)), c.degree_normalize);
        if (k + 1 < c.levels) h = ad::leaky_relu(h, static_cast<T>(c.slope));
    }
    return h;
}

template <class T>
ad::Tensor<T> decode_local(const ad::Tensor<T>& zl, const Adjacency& adj, const BoundParams<T>& p,
                           const ModelConfig& c) {
    const auto ladder = detail::local_decoder_ladder(c);
    auto h = ad::reshape(linear(zl, p.lin("dec.local.lin")), c.n_vertices, ladder.front());
    const std::size_t layers = ladder.size() - 1;
    for (std::size_t k = 0; k < layers; ++k) {
        const auto s = std::to_string(k);
        h = detail::residual_block(h, adj, p, "dec.local.gc" + s, "dec.local.res" + s, c, k + 1 < layers);
    }
    return h;
}

/// [z_G | z_L] = FC(z), both paths decoded and fused per vertex.
template <class T>
Decoded<T> decode(const ad::Tensor<T>& z, const MeshGraph& g, const BoundParams<T>& p, const ModelConfig& c) {
    if (z.rows() != 1 || z.cols() != c.latent)
        throw ShapeError("latent " + shape_str(z.rows(), z.cols()) + ", expected " + shape_str(1, c.latent));
    auto& tape = z.tape();
    auto h = linear(z, p.lin("dec.fc"));
    const Index half = c.half_latent();
    const auto ones = [&] { return tape.constant(Matrix<T>::Ones(c.n_vertices, 1)); };
    const auto zeros = [&] { return tape.constant(Matrix<T>::Zero(c.n_vertices, 1)); };
    Decoded<T> d;
    if (c.path_mode == PathMode::LocalOnly) {
        d.output = decode_local(ad::slice_cols(h, half, half), g.at(0), p, c);
        d.global_weight = zeros();
        d.local_weight = ones();
        return d;
    }
    if (c.path_mode == PathMode::GlobalOnly) {
        d.output = decode_global(ad::slice_cols(h, 0, half), g, p, c);
        d.global_weight = ones();
        d.local_weight = zeros();
        return d;
    }
    auto xg = decode_global(ad::slice_cols(h, 0, half), g, p, c);
    auto xl = decode_local(ad::slice_cols(h, half, half), g.at(0), p, c);
    if (c.use_attention) {
        auto f = attention_fuse(xg, xl, p.attention());
        d.output = f.fused;
        d.global_weight = f.global_weight;
        d.local_weight = f.local_weight;
    } else {
        d.output = ad::scale(ad::add(xg, xl), static_cast<T>(0.5));
        d.global_weight = tape.constant(Matrix<T>::Constant(c.n_vertices, 1, static_cast<T>(0.5)));
        d.local_weight = d.global_weight;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Checkpoint

struct TrainingMeta {
    int epoch = 0;
    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    double best_validation = std::numeric_limits<double>::quiet_NaN();
};

template <class T>
struct Checkpoint {
    ModelConfig config;
    DatasetStats stats;
    MeshGraph graph;
    ModelParams<T> params;
    TrainingMeta meta;
};

class CheckpointVersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointIntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

class TensorWriter {
public:
    template <class S>
    void add(const std::string& name, const S* data, Index rows, Index cols) {
        const char* dtype = std::is_same_v<S, float> ? "f32" : std::is_same_v<S, double> ? "f64" : "i32";
        const std::size_t bytes = sizeof(S) * static_cast<std::size_t>(rows * cols);
        directory_.push_back({{"name", name}, {"dtype", dtype}, {"shape", {rows, cols}}, {"offset", payload_.size()},
                              {"bytes", bytes}});
        payload_.append(reinterpret_cast<const char*>(data), bytes);
    }
    template <class Derived>
    void add(const std::string& name, const Eigen::DenseBase<Derived>& m) {
        using S = typename Derived::Scalar;
        Matrix<S> rm = m;
        add(name, rm.data(), rm.rows(), rm.cols());
    }
    void add_faces(const std::string& name, const std::vector<Face>& faces) {
        add(name, faces.empty() ? nullptr : faces.front().data(), static_cast<Index>(faces.size()), 3);
    }
    void add_ints(const std::string& name, const std::vector<int>& v) {
        add(name, v.data(), 1, static_cast<Index>(v.size()));
    }

    nlohmann::json directory_ = nlohmann::json::array();
    std::string payload_;
};

class TensorReader {
public:
    TensorReader(const nlohmann::json& directory, std::string_view payload) : payload_(payload) {
        for (const auto& e : directory) entries_.emplace(e.at("name").get<std::string>(), e);
    }

    template <class S>
    Matrix<S> get(const std::string& name) const {
        const auto& e = entry(name);
        const auto rows = e.at("shape")[0].get<Index>(), cols = e.at("shape")[1].get<Index>();
        const auto dtype = e.at("dtype").get<std::string>();
        Matrix<S> out(rows, cols);
        if (dtype == "f32") fill<float>(e, out);
        else if (dtype == "f64") fill<double>(e, out);
        else if (dtype == "i32") fill<std::int32_t>(e, out);
        else throw CheckpointIntegrityError("tensor " + name + " has unknown dtype " + dtype);
        return out;
    }

    std::vector<Face> faces(const std::string& name) const {
        auto m = get<int>(name);
        if (m.cols() != 3 && m.size() != 0) throw CheckpointIntegrityError(name + " is not a face list");
        std::vector<Face> f(static_cast<std::size_t>(m.rows()));
        for (Index r = 0; r < m.rows(); ++r) f[r] = {m(r, 0), m(r, 1), m(r, 2)};
        return f;
    }

    std::vector<int> ints(const std::string& name) const {
        auto m = get<int>(name);
        return std::vector<int>(m.data(), m.data() + m.size());
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const std::map<std::string, nlohmann::json>& entries() const { return entries_; }

    std::string dtype(const std::string& name) const { return entry(name).at("dtype").get<std::string>(); }

private:
    const nlohmann::json& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw CheckpointIntegrityError("checkpoint lacks tensor " + name);
        return it->second;
    }

    template <class Src, class S>
    void fill(const nlohmann::json& e, Matrix<S>& out) const {
        const auto offset = e.at("offset").get<std::size_t>(), bytes = e.at("bytes").get<std::size_t>();
        if (bytes != sizeof(Src) * static_cast<std::size_t>(out.size()) || offset + bytes > payload_.size())
            throw CheckpointIntegrityError("tensor " + e.at("name").get<std::string>() + " exceeds the payload");
        std::vector<Src> tmp(static_cast<std::size_t>(out.size()));
        if (bytes) std::memcpy(tmp.data(), payload_.data() + offset, bytes);
        for (Index k = 0; k < out.size(); ++k) out.data()[k] = static_cast<S>(tmp[static_cast<std::size_t>(k)]);
    }

    std::string_view payload_;
    std::map<std::string, nlohmann::json> entries_;
};

template <class T>
void put_u(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get_u(std::string_view in, std::size_t at) {
    T v;
    std::memcpy(&v, in.data() + at, sizeof(T));
    return v;
}

}  // namespace detail

/// Layout: "3DGM", u32 version, u64 header length, JSON header, payload.
/// Parameters are stored in their own precision; everything else as f64/i32.
template <class T>
std::string save_checkpoint(const Checkpoint<T>& ck) {
    detail::TensorWriter w;
    for (const auto& [name, m] : ck.params.tensors) w.add("param/" + name, m);
    w.add("stats/template_mean", ck.stats.template_mean);
    w.add("stats/sigma", ck.stats.sigma);
    const auto& h = ck.graph.hierarchy;
    w.add("graph/template/positions", h.template_mesh.positions);
    w.add_faces("graph/template/faces", h.template_mesh.faces);
    for (std::size_t l = 0; l < h.levels.size(); ++l) {
        const auto& lvl = h.levels[l];
        const std::string p = "graph/level" + std::to_string(l) + "/";
        w.add(p + "positions", lvl.coarse_mesh.positions);
        w.add_faces(p + "faces", lvl.coarse_mesh.faces);
        w.add_ints(p + "kept", lvl.kept);
        const auto trip = lvl.up.triplets();
        std::vector<int> rows, cols;
        MatrixXd vals(1, static_cast<Index>(trip.size()));
        for (std::size_t k = 0; k < trip.size(); ++k) {
            rows.push_back(trip[k].row());
            cols.push_back(trip[k].col());
            vals(0, static_cast<Index>(k)) = trip[k].value();
        }
        w.add_ints(p + "up_rows", rows);
        w.add_ints(p + "up_cols", cols);
        w.add(p + "up_values", vals);
    }

    nlohmann::json header;
    header["config"] = ck.config;
    header["stats"] = {{"curvature_mean", ck.stats.curvature_mean},
                       {"curvature_std", ck.stats.curvature_std},
                       {"clamped", ck.stats.clamped}};
    header["meta"] = {{"epoch", ck.meta.epoch},
                      {"learning_rate", ck.meta.learning_rate},
                      {"seed", ck.meta.seed},
                      {"best_validation", std::isfinite(ck.meta.best_validation) ? nlohmann::json(ck.meta.best_validation)
                                                                                 : nlohmann::json(nullptr)}};
    header["levels"] = h.levels.size();
    header["tensors"] = w.directory_;
    header["payload_bytes"] = w.payload_.size();
    header["payload_fnv1a"] = detail::fnv1a(w.payload_);
    const std::string text = header.dump(1);

    std::string out = "3DGM";
    detail::put_u<std::uint32_t>(out, kCheckpointVersion);
    detail::put_u<std::uint64_t>(out, text.size());
    out += text;
    out += w.payload_;
    return out;
}

template <class T>
Checkpoint<T> load_checkpoint(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "3DGM")
        throw CheckpointIntegrityError("not a checkpoint (bad magic bytes)");
    const auto version = detail::get_u<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                                     std::to_string(kCheckpointVersion) + ")");
    const auto header_len = detail::get_u<std::uint64_t>(bytes, 8);
    if (header_len > bytes.size() - 16) throw CheckpointIntegrityError("checkpoint truncated inside the header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointIntegrityError(std::string("checkpoint header unreadable: ") + e.what());
    }
    const std::string_view payload = bytes.substr(16 + header_len);
    try {
        if (payload.size() != header.at("payload_bytes").get<std::size_t>())
            throw CheckpointIntegrityError("checkpoint payload is " + std::to_string(payload.size()) +
                                           " bytes, header declares " +
                                           std::to_string(header.at("payload_bytes").get<std::size_t>()));
        if (detail::fnv1a(payload) != header.at("payload_fnv1a").get<std::uint64_t>())
            throw CheckpointIntegrityError("checkpoint payload checksum mismatch");

        detail::TensorReader r(header.at("tensors"), payload);
        Checkpoint<T> ck;
        ck.config = header.at("config").get<ModelConfig>();
        ck.stats.template_mean = r.get<double>("stats/template_mean");
        const MatrixXd sigma = r.get<double>("stats/sigma");
        if (sigma.size() != 3) throw CheckpointIntegrityError("stats/sigma must hold 3 values");
        ck.stats.sigma = Eigen::Map<const Eigen::RowVector3d>(sigma.data());
        ck.stats.curvature_mean = header.at("stats").at("curvature_mean").get<double>();
        ck.stats.curvature_std = header.at("stats").at("curvature_std").get<double>();
        ck.stats.clamped = header.at("stats").at("clamped").get<std::array<bool, 3>>();

        const auto& meta = header.at("meta");
        ck.meta.epoch = meta.at("epoch").get<int>();
        ck.meta.learning_rate = meta.at("learning_rate").get<double>();
        ck.meta.seed = meta.at("seed").get<std::uint64_t>();
        ck.meta.best_validation = meta.at("best_validation").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                                       : meta.at("best_validation").get<double>();

        Hierarchy h;
        h.template_mesh.positions = r.get<double>("graph/template/positions");
        h.template_mesh.faces = r.faces("graph/template/faces");
        const auto levels = header.at("levels").get<std::size_t>();
        const Mesh* fine = &h.template_mesh;
        h.levels.reserve(levels);
        for (std::size_t l = 0; l < levels; ++l) {
            const std::string p = "graph/level" + std::to_string(l) + "/";
            SamplingLevel lvl;
            lvl.coarse_mesh.positions = r.get<double>(p + "positions");
            lvl.coarse_mesh.faces = r.faces(p + "faces");
            lvl.kept = r.ints(p + "kept");
            lvl.down = build_down_matrix(lvl.kept, fine->num_vertices());
            const auto rows = r.ints(p + "up_rows"), cols = r.ints(p + "up_cols");
            const MatrixXd vals = r.get<double>(p + "up_values");
            if (rows.size() != cols.size() || static_cast<Index>(rows.size()) != vals.size())
                throw CheckpointIntegrityError("up-sampling triplets of level " + std::to_string(l) + " disagree");
            std::vector<SparseMatrix::Triplet> trip;
            for (std::size_t k = 0; k < rows.size(); ++k) trip.emplace_back(rows[k], cols[k], vals(0, static_cast<Index>(k)));
            lvl.up = SparseMatrix::from_triplets(fine->num_vertices(), lvl.coarse_mesh.num_vertices(), trip);
            lvl.coarse_adjacency = build_adjacency(lvl.coarse_mesh);
            h.levels.push_back(std::move(lvl));
            fine = &h.levels.back().coarse_mesh;
        }
        ck.graph = MeshGraph::from_hierarchy(std::move(h));

        for (const auto& [name, _] : r.entries())
            if (name.rfind("param/", 0) == 0) ck.params.tensors.emplace(name.substr(6), r.get<T>(name));
        check_params(ck.config, ck.params);
        check_graph(ck.config, ck.graph);
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointIntegrityError(std::string("checkpoint header malformed: ") + e.what());
    } catch (const std::out_of_range& e) {
        throw CheckpointIntegrityError(std::string("checkpoint inconsistent: ") + e.what());
    }
}

/// Precision the parameters were stored in ("f32" or "f64").
inline std::string checkpoint_param_dtype(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "3DGM") throw CheckpointIntegrityError("not a checkpoint");
    const auto header_len = detail::get_u<std::uint64_t>(bytes, 8);
    if (header_len > bytes.size() - 16) throw CheckpointIntegrityError("checkpoint truncated inside the header");
    auto header = nlohmann::json::parse(bytes.substr(16, header_len), nullptr, false);
    if (header.is_discarded()) throw CheckpointIntegrityError("checkpoint header unreadable");
    for (const auto& e : header.value("tensors", nlohmann::json::array()))
        if (e.value("name", "").rfind("param/", 0) == 0) return e.value("dtype", "");
    throw CheckpointIntegrityError("checkpoint has no parameters");
}

template <class T>
void save_checkpoint_file(const std::string& path, const Checkpoint<T>& ck) {
    write_file(path, save_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint_file(const std::string& path) {
    return load_checkpoint<T>(read_file(path));
}

// ---------------------------------------------------------------------------
// Mesh-level inference

/// Latent code of a mesh aligned to the checkpoint template.
template <class T>
Matrix<T> encode_mesh(const Mesh& mesh, const Checkpoint<T>& ck) {
    if (mesh.num_vertices() != ck.config.n_vertices)
        throw ShapeError("mesh has " + std::to_string(mesh.num_vertices()) + " vertices, model expects " +
                         std::to_string(ck.config.n_vertices));
    ad::Tape<T> tape;
    BoundParams<T> p(tape, ck.params);
    auto x = tape.constant(assemble_features(mesh, ck.stats, ck.config.use_curvature).template cast<T>());
    return encode(x, ck.graph, p, ck.config).value();
}

template <class T>
struct DecodedMesh {
    Mesh mesh;
    Eigen::VectorXd global_weight;
    Eigen::VectorXd local_weight;
};

/// Decodes a latent code into a mesh with the template faces.
template <class T>
DecodedMesh<T> decode_latent(const Matrix<T>& z, const Checkpoint<T>& ck) {
    ad::Tape<T> tape;
    BoundParams<T> p(tape, ck.params);
    auto d = decode(tape.constant(z), ck.graph, p, ck.config);
    DecodedMesh<T> out;
    const MatrixXd xhat = d.output.value().leftCols(3).template cast<double>();
    out.mesh.positions = denormalize(xhat, ck.stats);
    out.mesh.faces = ck.graph.hierarchy.template_mesh.faces;
    out.global_weight = d.global_weight.value().col(0).template cast<double>();
    out.local_weight = d.local_weight.value().col(0).template cast<double>();
    return out;
}

template <class T>
Mesh reconstruct(const Mesh& mesh, const Checkpoint<T>& ck) {
    return decode_latent(encode_mesh(mesh, ck), ck).mesh;
}

}  // namespace meshgeo
