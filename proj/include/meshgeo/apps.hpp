#pragma once

#include "meshgeo/primitives.hpp"
#include "meshgeo/training.hpp"

#include <filesystem>
#include <iomanip>
#include <sstream>

namespace meshgeo {

// ---------------------------------------------------------------------------
// Synthetic dataset

/// Template plus K smooth displacement fields; sample s is X_T + sum_k a_sk B_k.
struct SyntheticSpec {
    std::string template_path;  ///< empty: icosphere
    int subdivisions = 3;
    double radius = 100.0;
    int modes = 6;
    int bumps_per_mode = 3;
    double bump_width = 0.5;      ///< Gaussian width relative to the template's bbox diagonal / 2
    double mode_amplitude = 0.1;  ///< max |B_k| per vertex relative to the bbox diagonal
    double coeff_min = -1.0;
    double coeff_max = 1.0;
    int count = 64;
    std::uint64_t seed = 0;
    std::string format = "obj";
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"template_path", s.template_path}, {"subdivisions", s.subdivisions},
                       {"radius", s.radius},               {"modes", s.modes},
                       {"bumps_per_mode", s.bumps_per_mode}, {"bump_width", s.bump_width},
                       {"mode_amplitude", s.mode_amplitude}, {"coeff_min", s.coeff_min},
                       {"coeff_max", s.coeff_max},         {"count", s.count},
                       {"seed", s.seed},                   {"format", s.format}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.template_path = j.value("template_path", d.template_path);
    s.subdivisions = j.value("subdivisions", d.subdivisions);
    s.radius = j.value("radius", d.radius);
    s.modes = j.value("modes", d.modes);
    s.bumps_per_mode = j.value("bumps_per_mode", d.bumps_per_mode);
    s.bump_width = j.value("bump_width", d.bump_width);
    s.mode_amplitude = j.value("mode_amplitude", d.mode_amplitude);
    s.coeff_min = j.value("coeff_min", d.coeff_min);
    s.coeff_max = j.value("coeff_max", d.coeff_max);
    s.count = j.value("count", d.count);
    s.seed = j.value("seed", d.seed);
    s.format = j.value("format", d.format);
}

struct SyntheticDataset {
    SyntheticSpec spec;
    Mesh template_mesh;
    std::vector<MatrixXd> basis;  ///< K fields, N x 3
    MatrixXd coefficients;        ///< count x K
    std::vector<Mesh> meshes;
    DataSplit split;              ///< 9:1 train/test
};

/// Deterministic for a fixed spec (seed included).
inline SyntheticDataset make_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.modes < 0 || spec.count <= 0 || spec.bumps_per_mode <= 0)
        throw std::invalid_argument("synthetic spec needs modes >= 0, count > 0 and bumps_per_mode > 0");
    if (!(spec.coeff_min <= spec.coeff_max)) throw std::invalid_argument("synthetic spec: coeff_min > coeff_max");
    SyntheticDataset ds;
    ds.spec = spec;
    ds.template_mesh = spec.template_path.empty() ? make_icosphere(spec.subdivisions, spec.radius)
                                                  : load_mesh_file(spec.template_path);
    const auto& X = ds.template_mesh.positions;
    const Index n = X.rows();
    const double diag = bbox_diagonal(X);
    const double width = spec.bump_width * 0.5 * diag;

    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<Index> pick(0, n - 1);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int k = 0; k < spec.modes; ++k) {
        MatrixXd b = MatrixXd::Zero(n, 3);
        for (int m = 0; m < spec.bumps_per_mode; ++m) {
            const Eigen::RowVector3d centre = X.row(pick(rng));
            Eigen::RowVector3d dir(gauss(rng), gauss(rng), gauss(rng));
            dir.normalize();
            for (Index i = 0; i < n; ++i) {
                const double d2 = (X.row(i) - centre).squaredNorm();
                b.row(i) += std::exp(-d2 / (2.0 * width * width)) * dir;
            }
        }
        const double peak = b.rowwise().norm().maxCoeff();
        if (peak > 0.0) b *= spec.mode_amplitude * diag / peak;
        ds.basis.push_back(std::move(b));
    }

    std::uniform_real_distribution<double> coeff(spec.coeff_min, spec.coeff_max);
    ds.coefficients.resize(spec.count, spec.modes);
    for (int s = 0; s < spec.count; ++s) {
        Mesh m;
        m.positions = X;
        m.faces = ds.template_mesh.faces;
        for (int k = 0; k < spec.modes; ++k) {
            const double a = spec.coeff_min == spec.coeff_max ? spec.coeff_min : coeff(rng);
            ds.coefficients(s, k) = a;
            m.positions += a * ds.basis[k];
        }
        ds.meshes.push_back(std::move(m));
    }
    ds.split = split_dataset(ds.meshes.size(), static_cast<int>(ds.meshes.size() / 10), spec.seed);
    return ds;
}

inline std::string sample_name(std::size_t k, const std::string& ext) {
    std::ostringstream s;
    s << "sample_" << std::setw(4) << std::setfill('0') << k << '.' << ext;
    return s.str();
}

/// Writes template, samples and manifest.json into `dir`.
inline void write_dataset(const SyntheticDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string ext = ds.spec.format;
    if (ext != "obj" && ext != "ply") throw std::invalid_argument("dataset format must be obj or ply");
    save_mesh_file((fs::path(dir) / ("template." + ext)).string(), ds.template_mesh);
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t k = 0; k < ds.meshes.size(); ++k) {
        const auto name = sample_name(k, ext);
        save_mesh_file((fs::path(dir) / name).string(), ds.meshes[k]);
        files.push_back(name);
    }
    nlohmann::json manifest{{"spec", ds.spec},
                            {"template", "template." + ext},
                            {"samples", files},
                            {"split", {{"train", ds.split.train}, {"test", ds.split.val}}}};
    write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

struct LoadedDataset {
    Mesh template_mesh;
    std::vector<Mesh> meshes;
    DataSplit split;  ///< `val` holds the test indices
};

inline LoadedDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = nlohmann::json::parse(read_file((fs::path(dir) / "manifest.json").string()));
    LoadedDataset ds;
    ds.template_mesh = load_mesh_file((fs::path(dir) / manifest.at("template").get<std::string>()).string());
    for (const auto& f : manifest.at("samples")) ds.meshes.push_back(load_mesh_file((fs::path(dir) / f.get<std::string>()).string()));
    ds.split.train = manifest.at("split").at("train").get<std::vector<int>>();
    ds.split.val = manifest.at("split").at("test").get<std::vector<int>>();
    return ds;
}

// ---------------------------------------------------------------------------
// Latent arithmetic

/// (1 - t) z1 + t z2, the single form behind both interpolation and extrapolation.
template <class T>
Matrix<T> latent_blend(const Matrix<T>& z1, const Matrix<T>& z2, double t) {
    if (z1.rows() != z2.rows() || z1.cols() != z2.cols())
        throw ShapeError("latent codes " + shape_str(z1.rows(), z1.cols()) + " and " + shape_str(z2.rows(), z2.cols()));
    const T w1 = static_cast<T>(1.0 - t), w2 = static_cast<T>(t);
    return (w1 * z1.array() + w2 * z2.array()).matrix();
}

/// z = a z1 + (1 - a) z2: a = 1 gives z1, a = 0 gives z2.
template <class T>
Matrix<T> interpolate_latent(const Matrix<T>& z1, const Matrix<T>& z2, double a) {
    return latent_blend(z1, z2, 1.0 - a);
}

/// z = z1 + a (z2 - z1): a = 0 gives z1, a = 1 gives z2, any real a allowed.
template <class T>
Matrix<T> extrapolate_latent(const Matrix<T>& z1, const Matrix<T>& z2, double a) {
    return latent_blend(z1, z2, a);
}

/// a = 1, 1 - 1/(steps-1), ..., 0
inline std::vector<double> interpolation_weights(int steps) {
    if (steps < 2) throw std::invalid_argument("interpolation needs at least 2 steps");
    std::vector<double> a;
    for (int k = 0; k < steps; ++k) a.push_back(1.0 - static_cast<double>(k) / (steps - 1));
    a.back() = 0.0;
    return a;
}

template <class T>
std::vector<Mesh> interpolate_meshes(const Mesh& m1, const Mesh& m2, const std::vector<double>& a,
                                     const Checkpoint<T>& ck) {
    const auto z1 = encode_mesh(m1, ck), z2 = encode_mesh(m2, ck);
    std::vector<Mesh> out;
    for (double w : a) out.push_back(decode_latent(interpolate_latent(z1, z2, w), ck).mesh);
    return out;
}

template <class T>
std::vector<Mesh> extrapolate_meshes(const Mesh& m1, const Mesh& m2, const std::vector<double>& a,
                                     const Checkpoint<T>& ck) {
    const auto z1 = encode_mesh(m1, ck), z2 = encode_mesh(m2, ck);
    std::vector<Mesh> out;
    for (double w : a) out.push_back(decode_latent(extrapolate_latent(z1, z2, w), ck).mesh);
    return out;
}

// ---------------------------------------------------------------------------
// Denoising

/// Reported in place of +inf when two meshes coincide.
inline constexpr double kPsnrCap = 999.0;

/// 20 log10(bbox diagonal of `clean` / RMS vertex error), capped at kPsnrCap.
inline double psnr(const Mesh& clean, const Mesh& other) {
    if (clean.num_vertices() != other.num_vertices())
        throw ShapeError("psnr: " + std::to_string(clean.num_vertices()) + " vs " +
                         std::to_string(other.num_vertices()) + " vertices");
    const double rms = std::sqrt((clean.positions - other.positions).rowwise().squaredNorm().mean());
    if (rms == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 20.0 * std::log10(bbox_diagonal(clean.positions) / rms));
}

inline Mesh add_gaussian_noise(const Mesh& mesh, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be non-negative");
    Mesh noisy = mesh;
    if (sigma == 0.0) return noisy;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    for (Index k = 0; k < noisy.positions.size(); ++k) noisy.positions.data()[k] += n(rng);
    return noisy;
}

struct DenoiseResult {
    Mesh noisy;
    Mesh denoised;
    double psnr_noisy = 0;
    double psnr_denoised = 0;
    Eigen::VectorXd error;  ///< per-vertex distance between denoised and clean
};

template <class T>
DenoiseResult denoise(const Mesh& clean, double sigma, std::uint64_t seed, const Checkpoint<T>& ck) {
    DenoiseResult r;
    r.noisy = add_gaussian_noise(clean, sigma, seed);
    r.denoised = reconstruct(r.noisy, ck);
    r.psnr_noisy = psnr(clean, r.noisy);
    r.psnr_denoised = psnr(clean, r.denoised);
    r.error = (r.denoised.positions - clean.positions).rowwise().norm();
    return r;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
    std::string name;
    ModelConfig config;
};

/// Latent sweep plus one row per switch, all derived from `base`.
inline std::vector<AblationRow> default_ablation_matrix(const ModelConfig& base) {
    std::vector<AblationRow> rows;
    auto with = [&](std::string name, auto&& edit) {
        ModelConfig c = base;
        edit(c);
        rows.push_back({std::move(name), c});
    };
    for (Index z : {32, 64, 128, 256}) with("latent_" + std::to_string(z), [z](ModelConfig& c) { c.latent = z; });
    with("full", [](ModelConfig&) {});
    with("attn", [](ModelConfig& c) { c.use_residual = false; c.use_curvature = false; });
    with("attn_res", [](ModelConfig& c) { c.use_curvature = false; });
    with("no_attention", [](ModelConfig& c) { c.use_attention = false; });
    with("local_only", [](ModelConfig& c) { c.path_mode = PathMode::LocalOnly; });
    with("global_only", [](ModelConfig& c) { c.path_mode = PathMode::GlobalOnly; });
    return rows;
}

struct AblationResult {
    std::string name;
    MetricsReport metrics;
    double final_train_mse = 0;
};

inline std::string ablation_csv_header() { return "name,latent,attention,residual,curvature,path,mean,median,l2,train_mse\n"; }

inline std::string ablation_csv_row(const AblationRow& row, const AblationResult& r) {
    std::string s = row.name + ',' + std::to_string(row.config.latent) + ',' +
                    std::to_string(row.config.use_attention) + ',' + std::to_string(row.config.use_residual) + ',' +
                    std::to_string(row.config.use_curvature) + ',' + to_string(row.config.path_mode);
    for (double v : {r.metrics.mean, r.metrics.median, r.metrics.l2, r.final_train_mse}) {
        s += ',';
        detail::append_number(s, v);
    }
    return s + '\n';
}

/// Trains every row on `train_meshes` and scores reconstructions of `eval_meshes`.
/// Rows are appended to `csv_path` (if given) as soon as they finish.
template <class T>
std::vector<AblationResult> run_ablation(const std::vector<AblationRow>& rows, const std::vector<Mesh>& train_meshes,
                                         const std::vector<Mesh>& eval_meshes, const Mesh& template_mesh,
                                         const TrainConfig& train, const std::string& csv_path = {},
                                         bool verbose = false) {
    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path);
        if (!csv) throw std::runtime_error("cannot write " + csv_path);
        csv << ablation_csv_header() << std::flush;
    }
    std::vector<AblationResult> out;
    for (const auto& row : rows) {
        FitOptions<T> opt;
        opt.verbose = verbose;
        auto fitted = fit<T>(train_meshes, template_mesh, row.config, train, opt);
        std::vector<Mesh> pred;
        for (const auto& m : eval_meshes) pred.push_back(reconstruct(m, fitted.final));
        AblationResult r;
        r.name = row.name;
        r.metrics = evaluate_metrics(pred, eval_meshes);
        r.final_train_mse = fitted.log.back().train_mse;
        if (csv.is_open()) csv << ablation_csv_row(row, r) << std::flush;
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient-check suite

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0;
    std::size_t probes = 0;
};

namespace detail {

inline MatrixXd uniform_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    return MatrixXd::NullaryExpr(r, c, [&] { return u(rng); });
}

}  // namespace detail

/// Finite-difference checks of every primitive, FeaStConv, the attention block
/// and the full model loss on the 12-vertex icosahedron with Z = 8, all in double precision.
inline std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed = 1, const ad::GradCheckOptions& opt = {}) {
    using ad::Tape;
    using ad::Tensor;
    using Span = std::span<const Tensor<double>>;
    std::mt19937_64 rng(seed);
    std::vector<GradCheckEntry> out;
    auto run = [&](const std::string& name, auto&& fn, std::vector<MatrixXd> params) {
        auto rep = ad::gradient_check<double>(fn, params, opt);
        out.push_back({name, rep.max_rel_error, rep.probes});
    };
    auto rnd = [&](Index r, Index c, double lo = -1.0, double hi = 1.0) { return detail::uniform_matrix(r, c, rng, lo, hi); };
    // weights every output entry so that the scalar depends on all of them
    auto probe = [](const Tensor<double>& y, const MatrixXd& w) { return ad::sum(ad::mul(y, y.tape().constant(w))); };

    const MatrixXd a = rnd(4, 3), b = rnd(4, 3), w43 = rnd(4, 3), w34 = rnd(3, 4), w44 = rnd(4, 4), w26 = rnd(2, 6),
                   w112 = rnd(1, 12), w42 = rnd(4, 2), w46 = rnd(4, 6);
    run("add", [&](Tape<double>&, Span p) { return probe(ad::add(p[0], p[1]), w43); }, {a, b});
    run("sub", [&](Tape<double>&, Span p) { return probe(ad::sub(p[0], p[1]), w43); }, {a, b});
    run("mul", [&](Tape<double>&, Span p) { return probe(ad::mul(p[0], p[1]), w43); }, {a, b});
    run("scale", [&](Tape<double>&, Span p) { return probe(ad::scale(p[0], -1.7), w43); }, {a});
    run("add_scalar", [&](Tape<double>&, Span p) { return probe(ad::add_scalar(p[0], 0.4), w43); }, {a});
    run("square", [&](Tape<double>&, Span p) { return probe(ad::square(p[0]), w43); }, {a});
    run("sqrt", [&](Tape<double>&, Span p) { return probe(ad::sqrt(p[0]), w43); }, {rnd(4, 3, 0.5, 2.0)});
    run("l2_norm", [&](Tape<double>&, Span p) { return ad::l2_norm(p[0]); }, {a});
    run("sum", [&](Tape<double>&, Span p) { return ad::sum(p[0]); }, {a});
    run("mean_rows", [&](Tape<double>&, Span p) { return probe(ad::mean_rows(p[0]), w43.topRows(1)); }, {a});
    run("leaky_relu", [&](Tape<double>&, Span p) { return probe(ad::leaky_relu(p[0], 0.01), w43); }, {a});
    run("relu", [&](Tape<double>&, Span p) { return probe(ad::relu(p[0]), w43); }, {a});
    run("softmax_rows", [&](Tape<double>&, Span p) { return probe(ad::softmax_rows(p[0]), w43); }, {a});
    run("matmul", [&](Tape<double>&, Span p) { return probe(ad::matmul(p[0], p[1]), w44); }, {a, w34});
    run("reshape", [&](Tape<double>&, Span p) { return probe(ad::reshape(p[0], 2, 6), w26); }, {a});
    run("flatten", [&](Tape<double>&, Span p) { return probe(ad::flatten(p[0]), w112); }, {a});
    run("slice_cols", [&](Tape<double>&, Span p) { return probe(ad::slice_cols(p[0], 1, 2), w42); }, {a});
    run("concat_cols", [&](Tape<double>&, Span p) { return probe(ad::concat_cols(p[0], p[1]), w46); }, {a, b});
    run("broadcast_row", [&](Tape<double>&, Span p) { return probe(ad::broadcast_row(p[0], 4), w43); }, {rnd(1, 3)});
    run("add_row", [&](Tape<double>&, Span p) { return probe(ad::add_row(p[0], p[1]), w43); }, {a, rnd(1, 3)});
    run("scale_rows", [&](Tape<double>&, Span p) { return probe(ad::scale_rows(p[0], p[1]), w43); }, {a, rnd(4, 1)});
    {
        std::vector<SparseMatrix::Triplet> t = {{0, 1, 0.5}, {1, 0, 2.0}, {1, 3, -1.0}, {2, 2, 1.5}, {0, 3, 0.25}};
        const auto sp = SparseMatrix::from_triplets(3, 4, t);
        const MatrixXd w = rnd(3, 3);
        run("spmm", [&](Tape<double>&, Span p) { return probe(ad::spmm(sp, p[0]), w); }, {a});
    }

    const Mesh grid = make_grid(5, 4);
    const Adjacency adj = build_adjacency(grid);
    {
        const Index heads = 3, fin = 3, fout = 4;
        const MatrixXd w = rnd(20, fout);
        run("feastconv",
            [&](Tape<double>&, Span p) {
                return probe(feastconv(p[0], adj, FeaStConvWeights<double>{p[1], p[2], p[3], p[4]}), w);
            },
            {rnd(20, fin), rnd(fin, heads * fout), rnd(fin, heads), rnd(1, heads), rnd(1, fout)});
        run("gc_layer",
            [&](Tape<double>&, Span p) {
                return probe(gc_layer(p[0], adj, FeaStConvWeights<double>{p[1], p[2], p[3], p[4]}, 0.01), w);
            },
            {rnd(20, fin), rnd(fin, heads * fout), rnd(fin, heads), rnd(1, heads), rnd(1, fout)});
    }
    {
        const Index f = 3, h = 4;
        const MatrixXd w = rnd(20, f);
        run("attention_fuse",
            [&](Tape<double>&, Span p) {
                AttentionWeights<double> aw{{p[2], p[3]}, {p[4], p[5]}};
                return probe(attention_fuse(p[0], p[1], aw).fused, w);
            },
            {rnd(20, f), rnd(20, f), rnd(2 * f, h), rnd(1, h), rnd(h, 2), rnd(1, 2)});
    }
    {
        const MatrixXd target = rnd(20, 4);
        run("mse_loss", [&](Tape<double>& t, Span p) { return mse_loss(p[0], t.constant(target)); }, {rnd(20, 4)});
        run("spherical_reg", [&](Tape<double>&, Span p) { return spherical_reg(p[0]); }, {rnd(1, 8)});
    }

    // full model on the icosahedron: 12 -> 6 vertices, Z = 8
    {
        const Mesh ico = make_icosphere(0);
        ModelConfig cfg;
        cfg.n_vertices = ico.num_vertices();
        cfg.latent = 8;
        cfg.levels = 1;
        cfg.global_channels = {8};
        cfg.local_channels = {4, 8, 8};
        cfg.heads = 4;
        const MeshGraph graph = MeshGraph::build(ico, cfg.levels);
        std::vector<Mesh> set;
        for (int k = 0; k < 4; ++k) {
            Mesh m = ico;
            m.positions += rnd(ico.num_vertices(), 3, -0.2, 0.2);
            set.push_back(std::move(m));
        }
        const DatasetStats stats = compute_dataset_stats(std::span<const Mesh>(set));
        const MatrixXd x = assemble_features(set[0], stats, cfg.use_curvature);
        auto params = init_params<double>(cfg, seed);
        // give biases and offsets non-zero values so their gradients are exercised
        for (auto& [name, m] : params.tensors)
            if (m.rows() == 1) m = rnd(1, m.cols(), -0.1, 0.1);
        // Check near a fitted state: unit latent norm and a target within 1e-4 of the
        // reconstruction. A small loss keeps central-difference round-off below the
        // smallest gradient entries.
        MatrixXd target;
        {
            Tape<double> t;
            BoundParams<double> bp(t, params);
            const double norm = encode(t.constant(x), graph, bp, cfg).value().norm();
            params.at("enc.fc.W") /= norm;
            params.at("enc.fc.b") /= norm;
        }
        {
            Tape<double> t;
            BoundParams<double> bp(t, params);
            const MatrixXd y = decode(encode(t.constant(x), graph, bp, cfg), graph, bp, cfg).output.value();
            target = y + rnd(y.rows(), y.cols(), -1e-4, 1e-4);
        }
        std::vector<std::string> names;
        std::vector<MatrixXd> values;
        for (const auto& [name, m] : params.tensors) {
            names.push_back(name);
            values.push_back(m);
        }
        auto loss = [&](Tape<double>& t, Span p) {
            std::map<std::string, Tensor<double>> leaves;
            for (std::size_t k = 0; k < names.size(); ++k) leaves.emplace(names[k], p[k]);
            const auto bp = BoundParams<double>::from_leaves(std::move(leaves));
            auto z = encode(t.constant(x), graph, bp, cfg);
            auto d = decode(z, graph, bp, cfg);
            return total_loss(d.output, t.constant(target), z, 0.0001).total;
        };
        auto rep = ad::gradient_check<double>(loss, values, opt);
        out.push_back({"model_total_loss", rep.max_rel_error, rep.probes});
    }
    return out;
}

}  // namespace meshgeo
