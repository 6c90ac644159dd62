// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include "meshgeo/meshgeo.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#ifndef MESHGEO_CLI
#error "MESHGEO_CLI must name the meshgeo executable"
#endif

using namespace meshgeo;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << detail << std::endl;
    failures += !ok;
}

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

struct RunResult {
    int status = -1;
    std::string output;
};

RunResult run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + MESHGEO_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.output = fs::exists(log) ? read_file(log.string()) : std::string{};
    return r;
}

std::string line_starting(const std::string& text, const std::string& prefix) {
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (line.rfind(prefix, 0) == 0) return line;
    return {};
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized().toRotationMatrix();
}

MatrixXd random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    return MatrixXd::NullaryExpr(r, c, [&] { return u(rng); });
}

double max_vertex_distance(const Mesh& a, const Mesh& b) {
    return (a.positions - b.positions).rowwise().norm().maxCoeff();
}

// Independent reference: explicit loops, pooled population statistics,
// l2 as the per-mesh RMS error averaged over meshes.
MetricsReport naive_metrics(const Mesh& a, const Mesh& b) {
    std::vector<double> e;
    double sq = 0;
    for (Index i = 0; i < a.num_vertices(); ++i) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) d2 += (a.positions(i, c) - b.positions(i, c)) * (a.positions(i, c) - b.positions(i, c));
        e.push_back(std::sqrt(d2));
        sq += d2;
    }
    MetricsReport r;
    for (double v : e) r.mean += v;
    r.mean /= static_cast<double>(e.size());
    for (double v : e) r.std += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(r.std / static_cast<double>(e.size()));
    std::sort(e.begin(), e.end());
    const std::size_t n = e.size();
    r.median = n % 2 ? e[n / 2] : (e[n / 2 - 1] + e[n / 2]) / 2;
    r.l2 = std::sqrt(sq / static_cast<double>(n));
    return r;
}

struct Trained {
    FitResult<float> fit;
    double seconds = 0;
    double first_mse = 0, last_mse = 0;
    double train_error = 0, held_out_error = 0;
    bool first_ten_decreasing = true;
};

double mean_error(const std::vector<Mesh>& meshes, const Checkpoint<float>& ck) {
    std::vector<Mesh> pred;
    for (const auto& m : meshes) pred.push_back(reconstruct(m, ck));
    return evaluate_metrics(pred, meshes).mean;
}

Trained train_overfit(const std::vector<Mesh>& meshes, const std::vector<Mesh>& held_out, const Mesh& template_mesh,
                      int latent, PathMode mode) {
    ModelConfig mc;
    mc.latent = latent;
    mc.path_mode = mode;
    TrainConfig tc;
    tc.epochs = 200;
    tc.batch_size = 8;
    tc.seed = 1;
    tc.val_count = 0;
    Trained t;
    const auto t0 = Clock::now();
    t.fit = fit<float>(meshes, template_mesh, mc, tc);
    t.seconds = seconds_since(t0);
    t.first_mse = t.fit.log.front().train_mse;
    t.last_mse = t.fit.log.back().train_mse;
    for (std::size_t e = 1; e < 10 && e < t.fit.log.size(); ++e)
        t.first_ten_decreasing = t.first_ten_decreasing && t.fit.log[e].train_mse < t.fit.log[e - 1].train_mse;
    t.train_error = mean_error(meshes, t.fit.final);
    t.held_out_error = mean_error(held_out, t.fit.final);
    note("Z=" + std::to_string(latent) + " " + to_string(mode) + ": epoch-1 mse " + num(t.first_mse) + ", epoch-200 mse " +
         num(t.last_mse) + ", mean error " + num(t.train_error) + " training / " + num(t.held_out_error) +
         " held-out, " + num(t.seconds) + " s");
    return t;
}

}  // namespace

int main() {
    const fs::path work = fs::temp_directory_path() / "meshgeo_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);

    // 1. gradient fidelity through the CLI
    {
        const auto t0 = Clock::now();
        const auto r = run_cli("gradcheck", work / "gradcheck.txt");
        const double secs = seconds_since(t0);
        const auto line = line_starting(r.output, "max relative error");
        double worst = std::numeric_limits<double>::infinity();
        if (!line.empty()) worst = std::stod(line.substr(std::string("max relative error ").size()));
        const auto entries = run_gradcheck_suite();
        bool all_below = !entries.empty();
        bool saw_model = false;
        for (const auto& e : entries) {
            all_below = all_below && e.max_rel_error < 1e-5;
            saw_model = saw_model || e.name == "model_total_loss";
        }
        report(1, "gradient fidelity", r.status == 0 && worst < 1e-5 && all_below && saw_model && secs < 60.0,
               "max relative error " + num(worst) + " over " + std::to_string(entries.size()) + " checks, " +
                   num(secs) + " s");
    }

    // 2. curvature oracle
    {
        auto grid = make_grid(7, 6, 0.3);
        for (Index i = 0; i < grid.num_vertices(); ++i) grid.positions(i, 0) += 0.1 * std::sin(3.0 * grid.positions(i, 1));
        const auto hg = mean_curvature(grid);
        double flat = 0;
        for (Index i = 0; i < grid.num_vertices(); ++i)
            if (!hg.boundary[i]) flat = std::max(flat, std::abs(hg.values(i)));
        const double unit = mean_curvature(make_icosphere(3, 1.0)).values.cwiseAbs().mean();
        const double r2 = mean_curvature(make_icosphere(3, 2.0)).values.cwiseAbs().mean();
        Mesh m = make_icosphere(3, 1.0);
        std::mt19937_64 rng(5);
        std::normal_distribution<double> noise(0.0, 0.01);
        for (Index i = 0; i < m.positions.size(); ++i) m.positions.data()[i] += noise(rng);
        const auto before = mean_curvature(m).values;
        double rot = 0;
        for (int k = 0; k < 3; ++k) {
            Mesh r = m;
            r.positions = m.positions * random_rotation(rng).transpose();
            rot = std::max(rot, (mean_curvature(r).values - before).cwiseAbs().maxCoeff());
        }
        const bool ok = flat < 1e-9 && std::abs(unit - 1.0) < 0.05 && std::abs(r2 - 0.5) < 0.05 * 0.5 && rot < 1e-6;
        report(2, "curvature oracle", ok,
               "flat " + num(flat) + ", unit sphere " + num(unit) + ", radius-2 sphere " + num(r2) + ", rotation " +
                   num(rot));
    }

    // 3. sampling invariants
    {
        const auto h = build_hierarchy(make_icosphere(3), 3);
        const std::vector<Index> expected = {642, 321, 160, 80};
        bool counts = h.levels.size() == 3;
        for (std::size_t l = 0; counts && l <= 3; ++l) counts = h.vertex_count(l) == expected[l];
        double row_sum = 0;
        bool round_trip = true, valid = true;
        std::mt19937_64 rng(8);
        for (const auto& lvl : h.levels) {
            const MatrixXd up = lvl.up.to_dense();
            row_sum = std::max(row_sum, (up.rowwise().sum().array() - 1.0).abs().maxCoeff());
            const MatrixXd xc = random_matrix(lvl.n_out(), 3, rng);
            round_trip = round_trip && lvl.down.apply(lvl.up.apply(xc)) == xc;
            valid = valid && validate_mesh(lvl.coarse_mesh).ok();
        }
        report(3, "sampling invariants", counts && row_sum < 1e-9 && round_trip && valid,
               std::string("counts ") + (counts ? "642/321/160/80" : "wrong") + ", max |U row sum - 1| " +
                   num(row_sum) + ", round trip " + (round_trip ? "exact" : "inexact") + ", coarse meshes " +
                   (valid ? "valid" : "invalid"));
    }

    // 4-8 share one synthetic set: 64 training meshes and 20 held-out meshes
    SyntheticSpec spec;
    spec.count = 84;
    spec.seed = 1;
    const auto ds = make_synthetic_dataset(spec);
    const std::vector<Mesh> train(ds.meshes.begin(), ds.meshes.begin() + 64);
    const std::vector<Mesh> held_out(ds.meshes.begin() + 64, ds.meshes.end());
    const double diag = bbox_diagonal(ds.template_mesh.positions);
    note("synthetic set: " + std::to_string(ds.template_mesh.num_vertices()) + " vertices, K = " +
         std::to_string(spec.modes) + ", bbox diagonal " + num(diag));

    const auto z32 = train_overfit(train, held_out, ds.template_mesh, 32, PathMode::Both);
    const auto z256 = train_overfit(train, held_out, ds.template_mesh, 256, PathMode::Both);

    // 4. overfit reproduction
    {
        const bool drop = z32.last_mse * 100.0 <= z32.first_mse && z256.last_mse * 100.0 <= z256.first_mse;
        const bool accurate = z256.train_error < 0.01 * diag;
        const bool trend = z256.train_error <= z32.train_error;
        const bool fast = z32.seconds < 900.0 && z256.seconds < 900.0;
        note(std::string("training mse strictly decreases over the first 10 epochs: Z=32 ") +
             (z32.first_ten_decreasing ? "yes" : "no") + ", Z=256 " + (z256.first_ten_decreasing ? "yes" : "no"));
        report(4, "overfit reproduction", drop && accurate && trend && fast,
               "mse drop " + num(z32.first_mse / z32.last_mse) + "x / " + num(z256.first_mse / z256.last_mse) +
                   "x, Z=256 error " + num(100.0 * z256.train_error / diag) + "% of diagonal, Z=32 error " +
                   num(100.0 * z32.train_error / diag) + "%");
    }

    // 5. ablation ordering, scored on held-out meshes
    {
        const auto local = train_overfit(train, held_out, ds.template_mesh, 256, PathMode::LocalOnly);
        const auto global = train_overfit(train, held_out, ds.template_mesh, 256, PathMode::GlobalOnly);
        const bool train_order = z256.train_error <= local.train_error && local.train_error <= global.train_error;
        note(std::string("training-set ordering full <= local only <= global only: ") + (train_order ? "holds" : "does not hold"));
        report(5, "ablation ordering",
               z256.held_out_error <= local.held_out_error && local.held_out_error <= global.held_out_error,
               "held-out mean error full " + num(z256.held_out_error) + ", local only " + num(local.held_out_error) +
                   ", global only " + num(global.held_out_error));
    }

    // 6. spherical regularization
    {
        double dev = 0;
        for (const auto& m : train) dev += std::abs(static_cast<double>(encode_mesh(m, z256.fit.final).norm()) - 1.0);
        dev /= static_cast<double>(train.size());
        const double first = z256.fit.log.front().latent_norm_deviation;
        report(6, "spherical regularization", dev < 0.2 && dev < first,
               "mean | ||z|| - 1 | " + num(dev) + " after training, " + num(first) + " at epoch 1");
    }

    // 7. latent arithmetic
    {
        const auto& ck = z256.fit.final;
        const Mesh& m1 = train[0];
        const Mesh& m2 = train[1];
        const Mesh r1 = reconstruct(m1, ck), r2 = reconstruct(m2, ck);
        const auto inter = interpolate_meshes(m1, m2, {1.0, 0.0}, ck);
        const auto extra = extrapolate_meshes(m1, m2, {0.0, 1.0}, ck);
        const double endpoint = std::max({max_vertex_distance(inter[0], r1), max_vertex_distance(inter[1], r2),
                                          max_vertex_distance(extra[0], r1), max_vertex_distance(extra[1], r2)});
        const std::vector<double> as = {-0.5, 0.0, 0.3, 0.5, 1.0, 1.75};
        std::vector<double> flipped;
        for (double a : as) flipped.push_back(1.0 - a);
        const auto lhs = interpolate_meshes(m1, m2, as, ck);
        const auto rhs = extrapolate_meshes(m1, m2, flipped, ck);
        bool overlap = true;
        for (std::size_t k = 0; k < as.size(); ++k) overlap = overlap && lhs[k].positions == rhs[k].positions;
        const auto z1 = encode_mesh(m1, ck), z2 = encode_mesh(m2, ck);
        for (double a : as) overlap = overlap && interpolate_latent(z1, z2, a) == extrapolate_latent(z1, z2, 1.0 - a);
        report(7, "latent arithmetic", endpoint < 1e-6 && overlap,
               "endpoint deviation " + num(endpoint) + ", overlap identity " + (overlap ? "exact" : "broken"));
    }

    // 8. denoising with a positions-only model trained on a larger set
    {
        auto denoise_score = [](const std::vector<Mesh>& meshes, const Checkpoint<float>& ck) {
            struct Score {
                int better = 0;
                double noisy = 0, denoised = 0;
            } s;
            for (std::size_t k = 0; k < meshes.size(); ++k) {
                const double sigma = 0.005 * bbox_diagonal(meshes[k].positions);
                const auto r = denoise(meshes[k], sigma, 100 + k, ck);
                s.better += r.psnr_denoised > r.psnr_noisy;
                s.noisy += r.psnr_noisy / static_cast<double>(meshes.size());
                s.denoised += r.psnr_denoised / static_cast<double>(meshes.size());
            }
            return s;
        };
        const auto full = denoise_score(held_out, z256.fit.final);
        note("full model from criterion 4: " + std::to_string(full.better) + "/20 improved, mean PSNR " +
             num(full.noisy) + " dB noisy, " + num(full.denoised) + " dB denoised");

        SyntheticSpec big = spec;
        big.count = 276;
        const auto bds = make_synthetic_dataset(big);
        const std::vector<Mesh> btrain(bds.meshes.begin(), bds.meshes.begin() + 256);
        const std::vector<Mesh> bheld(bds.meshes.begin() + 256, bds.meshes.end());
        ModelConfig mc;
        mc.latent = 256;
        mc.use_curvature = false;
        TrainConfig tc;
        tc.epochs = 100;
        tc.batch_size = 8;
        tc.seed = 1;
        tc.val_count = 0;
        const auto t0 = Clock::now();
        const auto denoiser = fit<float>(btrain, bds.template_mesh, mc, tc).final;
        note("positions-only Z=256 model on 256 meshes, 100 epochs: " + num(seconds_since(t0)) + " s");
        const auto sc = denoise_score(bheld, denoiser);
        const double n = static_cast<double>(bheld.size());
        report(8, "denoising", sc.better >= static_cast<int>(std::ceil(0.9 * n)),
               std::to_string(sc.better) + "/" + std::to_string(bheld.size()) +
                   " held-out meshes improved, mean PSNR " + num(sc.noisy) + " dB noisy, " + num(sc.denoised) +
                   " dB denoised");
    }

    // 9. attention fusion
    {
        std::mt19937_64 rng(27);
        double partition = 0, outside = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const Index n = 40, f = 3, hidden = 6;
            ad::Tape<double> t;
            auto xg = t.constant(random_matrix(n, f, rng, 5.0));
            auto xl = t.constant(random_matrix(n, f, rng, 5.0));
            AttentionWeights<double> w{
                {t.constant(random_matrix(2 * f, hidden, rng, 2.0)), t.constant(random_matrix(1, hidden, rng))},
                {t.constant(random_matrix(hidden, 2, rng, 4.0)), t.constant(random_matrix(1, 2, rng))}};
            const auto r = attention_fuse(xg, xl, w);
            partition = std::max(partition,
                                 ((r.global_weight.value() + r.local_weight.value()).array() - 1.0).abs().maxCoeff());
            const MatrixXd lo = xg.value().cwiseMin(xl.value()), hi = xg.value().cwiseMax(xl.value());
            outside = std::max({outside, (lo - r.fused.value()).maxCoeff(), (r.fused.value() - hi).maxCoeff()});
        }
        report(9, "attention fusion", partition < 1e-6 && outside <= 1e-12,
               "max |w_G + w_L - 1| " + num(partition) + ", max excursion outside pathway range " +
                   num(std::max(outside, 0.0)));
    }

    // 10. determinism of the CLI training run
    {
        const fs::path data = work / "data";
        const auto s = run_cli("--seed 3 --out \"" + data.string() + "\" synth --count 20 --subdivisions 2",
                               work / "synth.txt");
        std::string first[2];
        std::string bytes[2];
        bool ran = s.status == 0;
        for (int k = 0; k < 2 && ran; ++k) {
            const fs::path out = work / ("run" + std::to_string(k));
            const auto r = run_cli("--seed 7 --out \"" + out.string() + "\" train --data \"" + data.string() +
                                       "\" --epochs 3 --batch 8 --latent 16 --quiet",
                                   work / ("train" + std::to_string(k) + ".txt"));
            ran = r.status == 0 && fs::exists(out / "model.ckpt");
            if (ran) {
                first[k] = line_starting(r.output, "epoch 1 ");
                bytes[k] = read_file((out / "model.ckpt").string());
            }
        }
        const bool same = ran && !first[0].empty() && first[0] == first[1] && bytes[0] == bytes[1];
        report(10, "determinism", same,
               ran ? "'" + first[0] + "' in both runs, checkpoints of " + std::to_string(bytes[0].size()) + " bytes " +
                         (bytes[0] == bytes[1] ? "identical" : "different")
                   : std::string("CLI run failed"));
    }

    // 11. metric oracle and learning-rate schedule
    {
        std::mt19937_64 rng(11);
        double worst = 0;
        for (int k = 0; k < 100; ++k) {
            const Index n = 5 + static_cast<Index>(rng() % 200);
            Mesh a, b;
            a.positions = random_matrix(n, 3, rng, 10.0);
            b.positions = random_matrix(n, 3, rng, 10.0);
            const std::vector<Mesh> pa = {a}, pb = {b};
            const auto got = evaluate_metrics(pa, pb);
            const auto ref = naive_metrics(a, b);
            worst = std::max({worst, std::abs(got.mean - ref.mean), std::abs(got.std - ref.std),
                              std::abs(got.median - ref.median), std::abs(got.l2 - ref.l2)});
        }
        const TrainConfig tc;
        const bool lr = lr_at_epoch(0, tc) == 0.0005 && lr_at_epoch(50, tc) == 0.00025 && lr_at_epoch(100, tc) == 0.000125;
        report(11, "metric oracle", worst < 1e-12 && lr,
               "max deviation from reference " + num(worst) + ", lr schedule " + (lr ? "exact" : "wrong"));
    }

    fs::remove_all(work);
    std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
              << std::endl;
    return failures ? 1 : 0;
}
