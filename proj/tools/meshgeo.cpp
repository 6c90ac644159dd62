#include "meshgeo/meshgeo.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace meshgeo;
namespace fs = std::filesystem;

namespace {

// Bad input that the user can fix by changing arguments; exits with 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
    std::string out = ".";
    std::string config;
};

struct FileConfig {
    ModelConfig model;
    TrainConfig train;
    SyntheticSpec synth;
};

FileConfig load_config(const std::string& path) {
    FileConfig c;
    if (path.empty()) return c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "model") value.get_to(c.model);
        else if (key == "train") value.get_to(c.train);
        else if (key == "synth") value.get_to(c.synth);
        else throw UsageError("config " + path + ": unknown section '" + key + "' (expected model, train, synth)");
    }
    return c;
}

fs::path out_dir(const Globals& g) {
    fs::create_directories(g.out);
    return fs::path(g.out);
}

std::string checkpoint_path(const Globals& g, bool for_writing) {
    if (!g.checkpoint.empty()) return g.checkpoint;
    if (for_writing) return (out_dir(g) / "model.ckpt").string();
    throw UsageError("--checkpoint is required");
}

// Runs `fn` with the checkpoint loaded at its stored precision.
template <class Fn>
void with_checkpoint(const std::string& path, Fn&& fn) {
    const std::string bytes = read_file(path);
    if (checkpoint_param_dtype(bytes) == "f64") {
        const auto ck = load_checkpoint<double>(bytes);
        fn(ck);
    } else {
        const auto ck = load_checkpoint<float>(bytes);
        fn(ck);
    }
}

struct MeshSet {
    Mesh template_mesh;
    std::vector<Mesh> meshes;
    std::vector<std::string> names;
};

// Meshes from a dataset directory (`split`: all, train or test) or from explicit files.
MeshSet gather_meshes(const std::string& data, const std::string& split, const std::vector<std::string>& files,
                      const std::string& template_path) {
    MeshSet s;
    if (!data.empty()) {
        auto ds = load_dataset(data);
        std::vector<int> ids;
        if (split == "train") ids = ds.split.train;
        else if (split == "test") ids = ds.split.val;
        else {
            ids.resize(ds.meshes.size());
            std::iota(ids.begin(), ids.end(), 0);
        }
        for (int i : ids) {
            s.meshes.push_back(ds.meshes[static_cast<std::size_t>(i)]);
            s.names.push_back(fs::path(sample_name(static_cast<std::size_t>(i), "x")).stem().string());
        }
        s.template_mesh = std::move(ds.template_mesh);
    }
    for (const auto& f : files) {
        s.meshes.push_back(load_mesh_file(f));
        s.names.push_back(fs::path(f).stem().string());
    }
    if (!template_path.empty()) s.template_mesh = load_mesh_file(template_path);
    else if (data.empty() && !s.meshes.empty()) s.template_mesh = s.meshes.front();
    if (s.meshes.empty()) throw UsageError("no input meshes (give --data or mesh files)");
    return s;
}

std::string mesh_ext(const std::string& format) {
    if (format != "obj" && format != "ply") throw UsageError("--format must be obj or ply");
    return format;
}

void write_error_map(const fs::path& path, const Mesh& mesh, const Eigen::VectorXd& error) {
    save_mesh_file(path.string(), mesh, std::span<const double>(error.data(), static_cast<std::size_t>(error.size())));
}

std::string fmt(double v) {
    std::string s;
    detail::append_number(s, v);
    return s;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::optional<int> count, modes, subdivisions;
    std::optional<double> radius, amplitude;
    std::string template_path, format;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
    auto spec = load_config(g.config).synth;
    if (g.seed) spec.seed = *g.seed;
    if (a.count) spec.count = *a.count;
    if (a.modes) spec.modes = *a.modes;
    if (a.subdivisions) spec.subdivisions = *a.subdivisions;
    if (a.radius) spec.radius = *a.radius;
    if (a.amplitude) spec.mode_amplitude = *a.amplitude;
    if (!a.template_path.empty()) spec.template_path = a.template_path;
    if (!a.format.empty()) spec.format = mesh_ext(a.format);
    const auto ds = make_synthetic_dataset(spec);
    write_dataset(ds, out_dir(g).string());
    std::cout << "wrote " << ds.meshes.size() << " meshes with " << ds.template_mesh.num_vertices() << " vertices to "
              << g.out << " (train " << ds.split.train.size() << ", test " << ds.split.val.size() << ")\n";
    return 0;
}

struct TrainArgs {
    std::string data, template_path, split = "train";
    std::vector<std::string> files;
    std::optional<int> epochs, batch, latent;
    std::optional<double> lr;
    bool quiet = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
    auto cfg = load_config(g.config);
    if (g.seed) cfg.train.seed = *g.seed;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch) cfg.train.batch_size = *a.batch;
    if (a.lr) cfg.train.lr0 = *a.lr;
    if (a.latent) cfg.model.latent = *a.latent;
    const auto set = gather_meshes(a.data, a.split, a.files, a.template_path);
    const auto dir = out_dir(g);
    FitOptions<float> opt;
    opt.log_csv = (dir / "train_log.csv").string();
    opt.verbose = !a.quiet;
    const auto result = fit<float>(set.meshes, set.template_mesh, cfg.model, cfg.train, opt);
    const std::string path = checkpoint_path(g, true);
    save_checkpoint_file(path, result.final);
    if (!result.split.val.empty()) save_checkpoint_file((dir / "best.ckpt").string(), result.best);
    const auto& first = result.log.front();
    const auto& last = result.log.back();
    std::cout << "epoch 1 train_total " << fmt(first.train_total) << " train_mse " << fmt(first.train_mse) << "\n"
              << "epoch " << last.epoch << " train_total " << fmt(last.train_total) << " train_mse "
              << fmt(last.train_mse) << "\n"
              << "checkpoint " << path << "\n";
    return 0;
}

struct ReconArgs {
    std::string data, split = "test", format = "obj";
    std::vector<std::string> files;
};

int cmd_reconstruct(const Globals& g, const ReconArgs& a) {
    const auto set = gather_meshes(a.data, a.split, a.files, {});
    const auto dir = out_dir(g);
    const auto ext = mesh_ext(a.format);
    with_checkpoint(checkpoint_path(g, false), [&](const auto& ck) {
        std::vector<Mesh> pred;
        for (std::size_t k = 0; k < set.meshes.size(); ++k) {
            if (set.meshes[k].num_vertices() != ck.config.n_vertices)
                throw ShapeError(set.names[k] + " has " + std::to_string(set.meshes[k].num_vertices()) +
                                 " vertices, expected N = " + std::to_string(ck.config.n_vertices));
            pred.push_back(reconstruct(set.meshes[k], ck));
            save_mesh_file((dir / ("recon_" + set.names[k] + "." + ext)).string(), pred.back());
        }
        const auto report = evaluate_metrics(pred, set.meshes);
        write_file((dir / "metrics.csv").string(), metrics_csv(report));
        for (std::size_t k = 0; k < pred.size(); ++k)
            write_error_map(dir / ("error_" + set.names[k] + ".ply"), pred[k], report.per_vertex[k]);
        std::cout << "reconstructed " << pred.size() << " meshes\n" << metrics_csv(report);
    });
    return 0;
}

struct PairArgs {
    std::string mesh1, mesh2, format = "obj";
    int steps = 5;
    std::vector<double> a{0.0, 0.5, 1.0, 1.5, 2.0};
};

int cmd_interpolate(const Globals& g, const PairArgs& p) {
    const Mesh m1 = load_mesh_file(p.mesh1), m2 = load_mesh_file(p.mesh2);
    const auto weights = interpolation_weights(p.steps);
    const auto dir = out_dir(g);
    const auto ext = mesh_ext(p.format);
    with_checkpoint(checkpoint_path(g, false), [&](const auto& ck) {
        const auto meshes = interpolate_meshes(m1, m2, weights, ck);
        for (std::size_t k = 0; k < meshes.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof name, "interp_%03zu.", k);
            save_mesh_file((dir / (name + ext)).string(), meshes[k]);
            std::cout << name << ext << " a=" << fmt(weights[k]) << "\n";
        }
    });
    return 0;
}

int cmd_extrapolate(const Globals& g, const PairArgs& p) {
    const Mesh m1 = load_mesh_file(p.mesh1), m2 = load_mesh_file(p.mesh2);
    const auto dir = out_dir(g);
    const auto ext = mesh_ext(p.format);
    with_checkpoint(checkpoint_path(g, false), [&](const auto& ck) {
        const auto meshes = extrapolate_meshes(m1, m2, p.a, ck);
        for (std::size_t k = 0; k < meshes.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof name, "extrap_%03zu.", k);
            save_mesh_file((dir / (name + ext)).string(), meshes[k]);
            std::cout << name << ext << " a=" << fmt(p.a[k]) << "\n";
        }
    });
    return 0;
}

struct DenoiseArgs {
    std::string mesh, format = "obj";
    double sigma = 0.001;
    bool relative = false;
};

int cmd_denoise(const Globals& g, const DenoiseArgs& a) {
    const Mesh clean = load_mesh_file(a.mesh);
    const double sigma = a.relative ? a.sigma * bbox_diagonal(clean.positions) : a.sigma;
    const auto dir = out_dir(g);
    const auto ext = mesh_ext(a.format);
    with_checkpoint(checkpoint_path(g, false), [&](const auto& ck) {
        const auto r = denoise(clean, sigma, g.seed.value_or(0), ck);
        save_mesh_file((dir / ("noisy." + ext)).string(), r.noisy);
        save_mesh_file((dir / ("denoised." + ext)).string(), r.denoised);
        write_error_map(dir / "error_map.ply", r.denoised, r.error);
        const std::string csv = "sigma,psnr_noisy_db,psnr_denoised_db,psnr_definition\n" + fmt(sigma) + ',' +
                                fmt(r.psnr_noisy) + ',' + fmt(r.psnr_denoised) +
                                ",20*log10(bbox_diagonal/rms_vertex_error) capped at 999\n";
        write_file((dir / "psnr.csv").string(), csv);
        std::cout << csv;
    });
    return 0;
}

struct MetricsArgs {
    std::vector<std::string> pred, truth;
};

int cmd_metrics(const Globals& g, const MetricsArgs& a) {
    if (a.pred.size() != a.truth.size())
        throw UsageError(std::to_string(a.pred.size()) + " --pred files for " + std::to_string(a.truth.size()) +
                         " --truth files");
    std::vector<Mesh> pred, truth;
    for (const auto& f : a.pred) pred.push_back(load_mesh_file(f));
    for (const auto& f : a.truth) truth.push_back(load_mesh_file(f));
    const auto report = evaluate_metrics(pred, truth);
    const auto dir = out_dir(g);
    write_file((dir / "metrics.csv").string(), metrics_csv(report));
    for (std::size_t k = 0; k < pred.size(); ++k)
        write_error_map(dir / ("error_" + fs::path(a.pred[k]).stem().string() + ".ply"), pred[k], report.per_vertex[k]);
    std::cout << metrics_csv(report);
    return 0;
}

struct AblateArgs {
    std::string data;
    std::vector<std::string> rows;
    std::optional<int> epochs, batch;
    bool quiet = false;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
    if (a.data.empty()) throw UsageError("ablate needs --data");
    auto cfg = load_config(g.config);
    if (g.seed) cfg.train.seed = *g.seed;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    if (a.batch) cfg.train.batch_size = *a.batch;
    auto train_set = gather_meshes(a.data, "train", {}, {});
    auto test_set = gather_meshes(a.data, "test", {}, {});
    auto rows = default_ablation_matrix(cfg.model);
    if (!a.rows.empty()) {
        std::vector<AblationRow> picked;
        for (const auto& name : a.rows) {
            auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.name == name; });
            if (it == rows.end()) throw UsageError("unknown ablation row '" + name + "'");
            picked.push_back(*it);
        }
        rows = std::move(picked);
    }
    const auto csv = (out_dir(g) / "ablation.csv").string();
    const auto results = run_ablation<float>(rows, train_set.meshes, test_set.meshes, train_set.template_mesh,
                                             cfg.train, csv, !a.quiet);
    std::cout << read_file(csv);
    return results.empty() ? 1 : 0;
}

int cmd_gradcheck(const Globals& g) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto entries = run_gradcheck_suite(g.seed.value_or(1));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double worst = 0.0;
    std::printf("%-20s %14s %8s\n", "check", "max_rel_error", "probes");
    for (const auto& e : entries) {
        std::printf("%-20s %14.3e %8zu\n", e.name.c_str(), e.max_rel_error, e.probes);
        worst = std::max(worst, e.max_rel_error);
    }
    std::printf("max relative error %.3e (tolerance 1e-5, eps 1e-6, float64) in %.2f s\n", worst, secs);
    return worst < 1e-5 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-convolutional mesh autoencoder"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--checkpoint", g.checkpoint, "Checkpoint file");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_option("--config", g.config, "JSON config with model, train and synth sections")->check(CLI::ExistingFile);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic deformation dataset");
    s->add_option("--count", synth.count, "Number of samples");
    s->add_option("--modes", synth.modes, "Number of deformation modes K");
    s->add_option("--subdivisions", synth.subdivisions, "Icosphere subdivision level");
    s->add_option("--radius", synth.radius, "Icosphere radius");
    s->add_option("--amplitude", synth.amplitude, "Mode amplitude relative to the bbox diagonal");
    s->add_option("--template", synth.template_path, "Template mesh instead of an icosphere")->check(CLI::ExistingFile);
    s->add_option("--format", synth.format, "obj or ply");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train an autoencoder");
    t->add_option("--data", train.data, "Dataset directory with manifest.json")->check(CLI::ExistingDirectory);
    t->add_option("--split", train.split, "Dataset split: train, test or all")->capture_default_str();
    t->add_option("--template", train.template_path, "Template mesh")->check(CLI::ExistingFile);
    t->add_option("meshes", train.files, "Additional mesh files")->check(CLI::ExistingFile);
    t->add_option("--epochs", train.epochs, "Epochs");
    t->add_option("--batch", train.batch, "Batch size");
    t->add_option("--lr", train.lr, "Initial learning rate");
    t->add_option("--latent", train.latent, "Latent size Z");
    t->add_flag("--quiet", train.quiet, "No per-epoch progress");

    ReconArgs recon;
    auto* r = app.add_subcommand("reconstruct", "Encode and decode meshes, report metrics");
    r->add_option("--data", recon.data, "Dataset directory")->check(CLI::ExistingDirectory);
    r->add_option("--split", recon.split, "Dataset split: train, test or all")->capture_default_str();
    r->add_option("meshes", recon.files, "Mesh files")->check(CLI::ExistingFile);
    r->add_option("--format", recon.format, "Output format: obj or ply")->capture_default_str();

    PairArgs pair;
    auto* ip = app.add_subcommand("interpolate", "Decode z = a z1 + (1 - a) z2 for a from 1 to 0");
    ip->add_option("mesh1", pair.mesh1)->required()->check(CLI::ExistingFile);
    ip->add_option("mesh2", pair.mesh2)->required()->check(CLI::ExistingFile);
    ip->add_option("--steps", pair.steps, "Number of meshes")->capture_default_str()->check(CLI::Range(2, 10000));
    ip->add_option("--format", pair.format, "Output format")->capture_default_str();
    auto* ep = app.add_subcommand("extrapolate", "Decode z = z1 + a (z2 - z1)");
    ep->add_option("mesh1", pair.mesh1)->required()->check(CLI::ExistingFile);
    ep->add_option("mesh2", pair.mesh2)->required()->check(CLI::ExistingFile);
    ep->add_option("--a", pair.a, "Comma-separated a values")->delimiter(',')->capture_default_str();
    ep->add_option("--format", pair.format, "Output format")->capture_default_str();

    DenoiseArgs den;
    auto* d = app.add_subcommand("denoise", "Add Gaussian noise, reconstruct, report PSNR");
    d->add_option("mesh", den.mesh)->required()->check(CLI::ExistingFile);
    d->add_option("--sigma", den.sigma, "Noise standard deviation")->capture_default_str()->check(CLI::NonNegativeNumber);
    d->add_flag("--relative", den.relative, "Interpret --sigma as a fraction of the bbox diagonal");
    d->add_option("--format", den.format, "Output format")->capture_default_str();

    MetricsArgs met;
    auto* m = app.add_subcommand("metrics", "Per-vertex error statistics between mesh pairs");
    m->add_option("--pred", met.pred, "Predicted meshes")->required()->check(CLI::ExistingFile);
    m->add_option("--truth", met.truth, "Ground-truth meshes")->required()->check(CLI::ExistingFile);

    AblateArgs abl;
    auto* ab = app.add_subcommand("ablate", "Train and score the ablation matrix");
    ab->add_option("--data", abl.data, "Dataset directory")->check(CLI::ExistingDirectory);
    ab->add_option("--rows", abl.rows, "Subset of rows by name")->delimiter(',');
    ab->add_option("--epochs", abl.epochs, "Epochs per row");
    ab->add_option("--batch", abl.batch, "Batch size");
    ab->add_flag("--quiet", abl.quiet, "No per-epoch progress");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every layer and the full model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (s->parsed()) return cmd_synth(g, synth);
        if (t->parsed()) return cmd_train(g, train);
        if (r->parsed()) return cmd_reconstruct(g, recon);
        if (ip->parsed()) return cmd_interpolate(g, pair);
        if (ep->parsed()) return cmd_extrapolate(g, pair);
        if (d->parsed()) return cmd_denoise(g, den);
        if (m->parsed()) return cmd_metrics(g, met);
        if (ab->parsed()) return cmd_ablate(g, abl);
        if (gc->parsed()) return cmd_gradcheck(g);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
