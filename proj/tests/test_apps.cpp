#include "meshgeo/apps.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace meshgeo;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec s;
    s.subdivisions = 1;
    s.radius = 10.0;
    s.count = 10;
    s.seed = 4;
    return s;
}

ModelConfig tiny_model() {
    ModelConfig c;
    c.latent = 8;
    c.levels = 2;
    c.global_channels = {4, 8};
    c.local_channels = {4, 8, 8};
    c.heads = 3;
    return c;
}

Checkpoint<double> untrained(const SyntheticDataset& ds) {
    Checkpoint<double> ck;
    ck.config = tiny_model();
    ck.config.n_vertices = ds.template_mesh.num_vertices();
    ck.stats = compute_dataset_stats(std::span<const Mesh>(ds.meshes));
    ck.graph = MeshGraph::build(ds.template_mesh, ck.config.levels);
    ck.params = init_params<double>(ck.config, 2);
    return ck;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("meshgeo_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST(Synthetic, NoModesReproducesTemplate) {
    auto spec = small_spec();
    spec.modes = 0;
    const auto ds = make_synthetic_dataset(spec);
    for (const auto& m : ds.meshes) {
        EXPECT_EQ(m.positions, ds.template_mesh.positions);
        EXPECT_EQ(m.faces, ds.template_mesh.faces);
    }
}

TEST(Synthetic, DeterministicPerSeed) {
    const auto a = make_synthetic_dataset(small_spec());
    const auto b = make_synthetic_dataset(small_spec());
    ASSERT_EQ(a.meshes.size(), 10u);
    for (std::size_t k = 0; k < a.meshes.size(); ++k) EXPECT_EQ(a.meshes[k].positions, b.meshes[k].positions);
    auto other = small_spec();
    other.seed = 5;
    EXPECT_NE(make_synthetic_dataset(other).meshes[0].positions, a.meshes[0].positions);
    EXPECT_EQ(a.split.val.size(), 1u);
    EXPECT_EQ(a.split.train.size(), 9u);
}

TEST(Synthetic, DisplacementIsBoundedByModeAmplitudes) {
    const auto ds = make_synthetic_dataset(small_spec());
    const double diag = bbox_diagonal(ds.template_mesh.positions);
    const double bound = ds.spec.modes * ds.spec.mode_amplitude * diag;
    for (const auto& b : ds.basis) EXPECT_NEAR(b.rowwise().norm().maxCoeff(), ds.spec.mode_amplitude * diag, 1e-9);
    for (const auto& m : ds.meshes) {
        const double disp = (m.positions - ds.template_mesh.positions).rowwise().norm().maxCoeff();
        EXPECT_GT(disp, 0.0);
        EXPECT_LE(disp, bound + 1e-9);
    }
    // every sample is the template plus its recorded combination of modes
    MatrixXd rebuilt = ds.template_mesh.positions;
    for (int k = 0; k < ds.spec.modes; ++k) rebuilt += ds.coefficients(3, k) * ds.basis[static_cast<std::size_t>(k)];
    EXPECT_LT((rebuilt - ds.meshes[3].positions).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Synthetic, WriteAndLoadRoundTrip) {
    const auto dir = scratch("dataset");
    const auto ds = make_synthetic_dataset(small_spec());
    write_dataset(ds, dir.string());
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / sample_name(9, "obj")));
    const auto back = load_dataset(dir.string());
    ASSERT_EQ(back.meshes.size(), ds.meshes.size());
    EXPECT_EQ(back.template_mesh.faces, ds.template_mesh.faces);
    for (std::size_t k = 0; k < ds.meshes.size(); ++k) EXPECT_EQ(back.meshes[k].positions, ds.meshes[k].positions);
    EXPECT_EQ(back.split.val, ds.split.val);
    const auto spec = nlohmann::json::parse(read_file((dir / "manifest.json").string())).at("spec").get<SyntheticSpec>();
    EXPECT_EQ(spec.seed, 4u);
    fs::remove_all(dir);
}

TEST(Latent, BlendEndpointsAndOverlap) {
    MatrixXd z1(1, 4), z2(1, 4);
    z1 << 0.3, -1.25, 7.0, 1e-3;
    z2 << -2.0, 0.5, 3.0, 4.0;
    EXPECT_EQ(interpolate_latent(z1, z2, 1.0), z1);
    EXPECT_EQ(interpolate_latent(z1, z2, 0.0), z2);
    EXPECT_EQ(extrapolate_latent(z1, z2, 0.0), z1);
    EXPECT_EQ(extrapolate_latent(z1, z2, 1.0), z2);
    for (double a : {-0.5, 0.0, 0.25, 0.5, 1.0, 2.0})
        EXPECT_EQ(interpolate_latent(z1, z2, a), extrapolate_latent(z1, z2, 1.0 - a)) << a;
    EXPECT_EQ(extrapolate_latent(z1, z2, 2.0), (2.0 * z2 - z1).eval());
    EXPECT_THROW(interpolate_latent(z1, MatrixXd(1, 3), 0.5), ShapeError);
    const auto w = interpolation_weights(5);
    EXPECT_EQ(w, (std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.0}));
    EXPECT_THROW(interpolation_weights(1), std::invalid_argument);
}

TEST(Latent, MeshEndpointsMatchReconstructions) {
    const auto ds = make_synthetic_dataset(small_spec());
    const auto ck = untrained(ds);
    const auto& m1 = ds.meshes[0];
    const auto& m2 = ds.meshes[1];
    const auto r1 = reconstruct(m1, ck), r2 = reconstruct(m2, ck);
    const auto inter = interpolate_meshes(m1, m2, {1.0, 0.0}, ck);
    const auto extra = extrapolate_meshes(m1, m2, {0.0, 1.0}, ck);
    EXPECT_LT((inter[0].positions - r1.positions).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((inter[1].positions - r2.positions).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((extra[0].positions - r1.positions).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((extra[1].positions - r2.positions).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Denoise, PsnrConventions) {
    const Mesh clean = make_icosphere(1, 2.0);
    EXPECT_EQ(psnr(clean, clean), kPsnrCap);
    Mesh shifted = clean;
    shifted.positions.col(0).array() += 0.01;
    // uniform shift: RMS error is the shift itself
    EXPECT_NEAR(psnr(clean, shifted), 20.0 * std::log10(bbox_diagonal(clean.positions) / 0.01), 1e-9);
    EXPECT_THROW(psnr(clean, make_icosphere(0)), ShapeError);
}

TEST(Denoise, NoiseIsDeterministicWithRequestedScale) {
    const Mesh clean = make_icosphere(3);
    const auto a = add_gaussian_noise(clean, 0.05, 9), b = add_gaussian_noise(clean, 0.05, 9);
    EXPECT_EQ(a.positions, b.positions);
    EXPECT_NE(add_gaussian_noise(clean, 0.05, 10).positions, a.positions);
    const MatrixXd d = a.positions - clean.positions;
    const double sd = std::sqrt(d.array().square().mean());
    EXPECT_NEAR(sd, 0.05, 0.003);
    EXPECT_EQ(add_gaussian_noise(clean, 0.0, 9).positions, clean.positions);
    EXPECT_THROW(add_gaussian_noise(clean, -1.0, 9), std::invalid_argument);
}

TEST(Denoise, ReportsBothPsnrValues) {
    const auto ds = make_synthetic_dataset(small_spec());
    const auto ck = untrained(ds);
    const auto r = denoise(ds.meshes[0], 0.05, 3, ck);
    EXPECT_DOUBLE_EQ(r.psnr_noisy, psnr(ds.meshes[0], r.noisy));
    EXPECT_DOUBLE_EQ(r.psnr_denoised, psnr(ds.meshes[0], r.denoised));
    EXPECT_EQ(r.error.size(), ds.meshes[0].num_vertices());
}

TEST(Ablation, MatrixRowsAndCsv) {
    const auto rows = default_ablation_matrix(tiny_model());
    ASSERT_EQ(rows.size(), 10u);
    EXPECT_EQ(rows[0].config.latent, 32);
    EXPECT_EQ(rows[8].config.path_mode, PathMode::LocalOnly);
    EXPECT_EQ(rows[9].config.path_mode, PathMode::GlobalOnly);
    EXPECT_FALSE(rows[5].config.use_curvature);

    const auto ds = make_synthetic_dataset(small_spec());
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    const auto csv = scratch("ablation.csv");
    const std::vector<AblationRow> one = {rows[4]};
    const auto results = run_ablation<float>(one, ds.meshes, {ds.meshes[0]}, ds.template_mesh, tc, csv.string());
    ASSERT_EQ(results.size(), 1u);
    EXPECT_EQ(results[0].name, "full");
    const std::string text = read_file(csv.string());
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
    EXPECT_EQ(text.substr(0, ablation_csv_header().size()), ablation_csv_header());
    EXPECT_EQ(text.substr(ablation_csv_header().size(), 5), "full,");
    fs::remove(csv);
}

TEST(GradCheckSuite, EveryEntryBelowTolerance) {
    const auto entries = run_gradcheck_suite();
    EXPECT_GE(entries.size(), 25u);
    bool saw_model = false;
    for (const auto& e : entries) {
        EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
        EXPECT_GT(e.probes, 0u) << e.name;
        saw_model = saw_model || e.name == "model_total_loss";
    }
    EXPECT_TRUE(saw_model);
}
