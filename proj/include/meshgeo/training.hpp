#pragma once

#include "meshgeo/model.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>

namespace meshgeo {

// ---------------------------------------------------------------------------
// Losses

/// ||X_out - Y||_F^2 / N with N the row (vertex) count, or / (N F) when
/// `per_entry` is set.
template <class T>
ad::Tensor<T> mse_loss(const ad::Tensor<T>& out, const ad::Tensor<T>& target, bool per_entry = false) {
    if (out.rows() != target.rows() || out.cols() != target.cols())
        throw ShapeError("mse_loss: " + shape_str(out.rows(), out.cols()) + " vs " +
                         shape_str(target.rows(), target.cols()));
    const Index divisor = per_entry ? out.rows() * out.cols() : out.rows();
    return ad::scale(ad::sum(ad::square(ad::sub(out, target))), T(1) / static_cast<T>(divisor));
}

/// (||z|| - 1)^2
template <class T>
ad::Tensor<T> spherical_reg(const ad::Tensor<T>& z) {
    return ad::square(ad::add_scalar(ad::l2_norm(z), T(-1)));
}

template <class T>
struct LossTerms {
    ad::Tensor<T> total;
    ad::Tensor<T> mse;
    ad::Tensor<T> reg;
};

template <class T>
LossTerms<T> total_loss(const ad::Tensor<T>& out, const ad::Tensor<T>& target, const ad::Tensor<T>& z, T lambda_reg,
                        bool per_entry = false) {
    LossTerms<T> l;
    l.mse = mse_loss(out, target, per_entry);
    l.reg = spherical_reg(z);
    l.total = ad::add(l.mse, ad::scale(l.reg, lambda_reg));
    return l;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    ModelParams<T> m;
    ModelParams<T> v;
};

/// One bias-corrected Adam update of every tensor in `params`.
template <class T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, double lr) {
    if (state.m.tensors.empty()) {
        state.m = params.zeros_like();
        state.v = params.zeros_like();
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(state.eps);
    for (auto& [name, p] : params.tensors) {
        const auto& g = grads.at(name);
        if (g.rows() != p.rows() || g.cols() != p.cols())
            throw ShapeError("gradient of " + name + " has shape " + shape_str(g.rows(), g.cols()));
        auto& m = state.m.at(name);
        auto& v = state.v.at(name);
        m.array() = b1 * m.array() + (T(1) - b1) * g.array();
        v.array() = b2 * v.array() + (T(1) - b2) * g.array().square();
        p.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
    }
}

// ---------------------------------------------------------------------------
// Configuration and logs

enum class LossChannels { All, Positions };
enum class MseDivisor { Vertices, Entries };

struct TrainConfig {
    double lr0 = 0.0005;
    int halve_every = 50;
    int batch_size = 32;
    int epochs = 300;
    double lambda_reg = 0.0001;
    std::uint64_t seed = 0;
    LossChannels loss_channels = LossChannels::All;
    MseDivisor mse_divisor = MseDivisor::Vertices;
    int val_count = -1;  ///< -1: 100 when more than 1000 samples, else 10%
    SigmaMode sigma_mode = SigmaMode::PerChannel;

    void validate() const {
        if (!(lr0 >= 0.0)) throw std::invalid_argument("train config: lr0 must be non-negative");
        if (halve_every <= 0) throw std::invalid_argument("train config: halve_every must be positive");
        if (batch_size <= 0) throw std::invalid_argument("train config: batch_size must be positive");
        if (epochs <= 0) throw std::invalid_argument("train config: epochs must be positive");
        if (!(lambda_reg >= 0.0)) throw std::invalid_argument("train config: lambda_reg must be non-negative");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr0", c.lr0},
                       {"halve_every", c.halve_every},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"lambda_reg", c.lambda_reg},
                       {"seed", c.seed},
                       {"loss_channels", c.loss_channels == LossChannels::All ? "all" : "positions"},
                       {"mse_divisor", c.mse_divisor == MseDivisor::Vertices ? "vertices" : "entries"},
                       {"val_count", c.val_count},
                       {"sigma_mode", c.sigma_mode == SigmaMode::PerChannel ? "per_channel" : "scalar"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    for (const auto& [key, value] : j.items()) {
        if (key == "lr0") value.get_to(c.lr0);
        else if (key == "halve_every") value.get_to(c.halve_every);
        else if (key == "batch_size") value.get_to(c.batch_size);
        else if (key == "epochs") value.get_to(c.epochs);
        else if (key == "lambda_reg") value.get_to(c.lambda_reg);
        else if (key == "seed") value.get_to(c.seed);
        else if (key == "loss_channels") {
            const auto s = value.get<std::string>();
            if (s == "all") c.loss_channels = LossChannels::All;
            else if (s == "positions") c.loss_channels = LossChannels::Positions;
            else throw std::invalid_argument("train config: loss_channels must be all or positions");
        } else if (key == "mse_divisor") {
            const auto s = value.get<std::string>();
            if (s == "vertices") c.mse_divisor = MseDivisor::Vertices;
            else if (s == "entries") c.mse_divisor = MseDivisor::Entries;
            else throw std::invalid_argument("train config: mse_divisor must be vertices or entries");
        } else if (key == "val_count") value.get_to(c.val_count);
        else if (key == "sigma_mode") {
            const auto s = value.get<std::string>();
            if (s == "per_channel") c.sigma_mode = SigmaMode::PerChannel;
            else if (s == "scalar") c.sigma_mode = SigmaMode::Scalar;
            else throw std::invalid_argument("train config: sigma_mode must be per_channel or scalar");
        } else throw std::invalid_argument("train config: unknown key '" + key + "'");
    }
}

/// lr0 * 0.5^floor(e / halve_every)
inline double lr_at_epoch(int epoch, const TrainConfig& c) {
    if (epoch < 0) throw std::invalid_argument("negative epoch");
    return std::ldexp(c.lr0, -(epoch / c.halve_every));
}

struct EpochLog {
    int epoch = 0;  ///< 1-based
    double lr = 0;
    double train_total = 0, train_mse = 0, train_reg = 0;
    double val_total = std::numeric_limits<double>::quiet_NaN();
    double val_mse = std::numeric_limits<double>::quiet_NaN();
    double val_reg = std::numeric_limits<double>::quiet_NaN();
    double latent_norm_deviation = 0;  ///< mean | ||z|| - 1 | over the epoch's training passes
    double wall_seconds = 0;
};

inline std::string epoch_csv_header() {
    return "epoch,lr,train_total,train_mse,train_reg,val_total,val_mse,val_reg,wall_seconds\n";
}

inline std::string epoch_csv_row(const EpochLog& e) {
    std::string s = std::to_string(e.epoch);
    for (double v : {e.lr, e.train_total, e.train_mse, e.train_reg, e.val_total, e.val_mse, e.val_reg,
                     e.wall_seconds}) {
        s += ',';
        detail::append_number(s, v);
    }
    return s + '\n';
}

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Training loop

/// Index split: shuffled with the seed, first `val` indices go to validation.
struct DataSplit {
    std::vector<int> train;
    std::vector<int> val;
};

inline DataSplit split_dataset(std::size_t n, int val_count, std::uint64_t seed) {
    std::size_t val = val_count >= 0 ? static_cast<std::size_t>(val_count) : (n > 1000 ? 100 : n / 10);
    if (val >= n) throw std::invalid_argument("validation split leaves no training samples");
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::shuffle(idx.begin(), idx.end(), rng);
    DataSplit s;
    s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(val));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(val), idx.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

template <class T>
struct FitResult {
    Checkpoint<T> final;
    Checkpoint<T> best;  ///< lowest validation total; equals `final` without a validation set
    std::vector<EpochLog> log;
    DataSplit split;
};

template <class T>
struct FitOptions {
    std::string log_csv;  ///< written (and flushed) after every epoch when non-empty
    std::function<void(const EpochLog&, const Checkpoint<T>&)> on_epoch;
    bool verbose = false;
};

namespace detail {

template <class T>
struct PreparedSample {
    Matrix<T> features;
    Matrix<T> target;
};

template <class T>
std::string first_non_finite(const ModelParams<T>& p) {
    for (const auto& [name, m] : p.tensors)
        if (!m.allFinite()) return name;
    return {};
}

struct LossSums {
    double total = 0, mse = 0, reg = 0, dev = 0;
    std::size_t count = 0;
};

}  // namespace detail

/// Evaluates mean loss terms over `samples` without recording gradients.
template <class T>
detail::LossSums evaluate_losses(const Checkpoint<T>& ck, const std::vector<detail::PreparedSample<T>>& samples,
                                 double lambda_reg, bool per_entry = false) {
    detail::LossSums s;
    for (const auto& smp : samples) {
        ad::Tape<T> tape;
        BoundParams<T> p(tape, ck.params);
        auto x = tape.constant(smp.features);
        auto z = encode(x, ck.graph, p, ck.config);
        auto d = decode(z, ck.graph, p, ck.config);
        auto out = smp.target.cols() == d.output.cols() ? d.output : ad::slice_cols(d.output, 0, smp.target.cols());
        auto l = total_loss(out, tape.constant(smp.target), z, static_cast<T>(lambda_reg), per_entry);
        s.total += l.total.item();
        s.mse += l.mse.item();
        s.reg += l.reg.item();
        s.dev += std::abs(static_cast<double>(z.value().norm()) - 1.0);
        ++s.count;
    }
    if (s.count) {
        const double n = static_cast<double>(s.count);
        s.total /= n;
        s.mse /= n;
        s.reg /= n;
        s.dev /= n;
    }
    return s;
}

/// Trains an autoencoder on meshes that share `template_mesh`'s topology.
/// Deterministic for a fixed seed: initialization, split and shuffling all
/// derive from `train.seed`, and batch gradients are summed in batch order.
template <class T>
FitResult<T> fit(const std::vector<Mesh>& meshes, const Mesh& template_mesh, ModelConfig model, const TrainConfig& train,
                 const FitOptions<T>& options = {}) {
    train.validate();
    if (meshes.empty()) throw std::invalid_argument("fit needs at least one mesh");
    for (std::size_t k = 0; k < meshes.size(); ++k) {
        if (meshes[k].num_vertices() != template_mesh.num_vertices())
            throw ShapeError("mesh " + std::to_string(k) + " has " + std::to_string(meshes[k].num_vertices()) +
                             " vertices, template has " + std::to_string(template_mesh.num_vertices()));
        if (meshes[k].faces != template_mesh.faces)
            throw ShapeError("mesh " + std::to_string(k) + " does not share the template faces");
    }
    model.n_vertices = template_mesh.num_vertices();
    model.validate();

    FitResult<T> result;
    result.split = split_dataset(meshes.size(), train.val_count, train.seed);
    const auto& split = result.split;

    std::vector<Mesh> train_meshes;
    for (int i : split.train) train_meshes.push_back(meshes[i]);
    Checkpoint<T> ck;
    ck.config = model;
    ck.stats = compute_dataset_stats(std::span<const Mesh>(train_meshes), train.sigma_mode);
    ck.graph = MeshGraph::build(template_mesh, model.levels);
    check_graph(model, ck.graph);
    ck.params = init_params<T>(model, train.seed);
    ck.meta.seed = train.seed;

    const Index target_cols = train.loss_channels == LossChannels::All ? model.out_channels() : 3;
    auto prepare = [&](const std::vector<int>& ids) {
        std::vector<detail::PreparedSample<T>> out;
        for (int i : ids) {
            MatrixXd f = assemble_features(meshes[i], ck.stats, model.use_curvature);
            out.push_back({f.cast<T>(), f.leftCols(target_cols).cast<T>()});
        }
        return out;
    };
    const auto train_set = prepare(split.train);
    const auto val_set = prepare(split.val);

    AdamState<T> adam;
    ModelParams<T> grads = ck.params.zeros_like();
    std::mt19937_64 shuffle_rng(train.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::ofstream csv;
    if (!options.log_csv.empty()) {
        csv.open(options.log_csv);
        if (!csv) throw std::runtime_error("cannot write " + options.log_csv);
        csv << epoch_csv_header() << std::flush;
    }

    double best_val = std::numeric_limits<double>::infinity();
    const T lambda = static_cast<T>(train.lambda_reg);
    const bool per_entry = train.mse_divisor == MseDivisor::Entries;
    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at_epoch(epoch, train);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        detail::LossSums sums;
        const std::size_t batches = (order.size() + train.batch_size - 1) / train.batch_size;
        for (std::size_t b = 0; b < batches; ++b) {
            for (auto& [_, g] : grads.tensors) g.setZero();
            const std::size_t begin = b * train.batch_size;
            const std::size_t end = std::min(order.size(), begin + train.batch_size);
            const T inv_batch = T(1) / static_cast<T>(end - begin);
            for (std::size_t k = begin; k < end; ++k) {
                const auto& smp = train_set[order[k]];
                ad::Tape<T> tape;
                BoundParams<T> p(tape, ck.params, &grads);
                auto x = tape.constant(smp.features);
                auto z = encode(x, ck.graph, p, model);
                auto d = decode(z, ck.graph, p, model);
                auto out = target_cols == d.output.cols() ? d.output : ad::slice_cols(d.output, 0, target_cols);
                auto l = total_loss(out, tape.constant(smp.target), z, lambda, per_entry);
                const double total = l.total.item();
                if (!std::isfinite(total)) {
                    auto bad = detail::first_non_finite(ck.params);
                    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                        std::to_string(b + 1) +
                                        (bad.empty() ? std::string(", all parameters finite")
                                                     : ", offending parameter " + bad));
                }
                tape.backward(ad::scale(l.total, inv_batch));
                sums.total += total;
                sums.mse += l.mse.item();
                sums.reg += l.reg.item();
                sums.dev += std::abs(static_cast<double>(z.value().norm()) - 1.0);
                ++sums.count;
            }
            auto bad = detail::first_non_finite(grads);
            if (!bad.empty())
                throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch + 1) + ", batch " +
                                    std::to_string(b + 1) + ", offending parameter " + bad);
            adam_step(ck.params, grads, adam, lr);
        }

        EpochLog log;
        log.epoch = epoch + 1;
        log.lr = lr;
        const double n = static_cast<double>(sums.count);
        log.train_total = sums.total / n;
        log.train_mse = sums.mse / n;
        log.train_reg = sums.reg / n;
        log.latent_norm_deviation = sums.dev / n;
        if (!val_set.empty()) {
            auto v = evaluate_losses(ck, val_set, train.lambda_reg, per_entry);
            log.val_total = v.total;
            log.val_mse = v.mse;
            log.val_reg = v.reg;
        }
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ck.meta.epoch = epoch + 1;
        ck.meta.learning_rate = lr;

        if (!val_set.empty() && log.val_total < best_val) {
            best_val = log.val_total;
            ck.meta.best_validation = best_val;
            result.best = ck;
        }
        result.log.push_back(log);
        if (csv.is_open()) csv << epoch_csv_row(log) << std::flush;
        if (options.verbose)
            std::cerr << "epoch " << log.epoch << " lr " << lr << " train " << log.train_total << " (mse "
                      << log.train_mse << ", reg " << log.train_reg << ") val " << log.val_total << " ["
                      << log.wall_seconds << " s]\n";
        if (options.on_epoch) options.on_epoch(log, ck);
    }
    if (val_set.empty()) result.best = ck;
    result.best.meta.best_validation = ck.meta.best_validation;
    result.final = std::move(ck);
    return result;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
    double mean = 0, std = 0, median = 0, l2 = 0;
    std::vector<Eigen::VectorXd> per_vertex;  ///< Euclidean error of every vertex, one vector per mesh
};

/// Per-vertex Euclidean errors pooled over all meshes for mean/std/median;
/// L2 is the per-mesh RMS vertex error averaged over meshes.
inline MetricsReport evaluate_metrics(std::span<const Mesh> predicted, std::span<const Mesh> truth) {
    if (predicted.size() != truth.size())
        throw std::invalid_argument(std::to_string(predicted.size()) + " predictions for " +
                                    std::to_string(truth.size()) + " ground-truth meshes");
    if (predicted.empty()) throw std::invalid_argument("no meshes to evaluate");
    MetricsReport r;
    std::vector<double> pooled;
    double l2_sum = 0.0;
    for (std::size_t k = 0; k < predicted.size(); ++k) {
        const auto& a = predicted[k].positions;
        const auto& b = truth[k].positions;
        if (a.rows() != b.rows() || a.cols() != 3 || b.cols() != 3)
            throw ShapeError("pair " + std::to_string(k) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
                             shape_str(b.rows(), b.cols()));
        if (a.rows() == 0) throw ShapeError("pair " + std::to_string(k) + " has no vertices");
        Eigen::VectorXd e = (a - b).rowwise().norm();
        pooled.insert(pooled.end(), e.data(), e.data() + e.size());
        l2_sum += std::sqrt(e.squaredNorm() / static_cast<double>(e.size()));
        r.per_vertex.push_back(std::move(e));
    }
    const double n = static_cast<double>(pooled.size());
    double sum = 0.0;
    for (double v : pooled) sum += v;
    r.mean = sum / n;
    double sq = 0.0;
    for (double v : pooled) sq += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(sq / n);
    std::sort(pooled.begin(), pooled.end());
    const std::size_t mid = pooled.size() / 2;
    r.median = pooled.size() % 2 ? pooled[mid] : 0.5 * (pooled[mid - 1] + pooled[mid]);
    r.l2 = l2_sum / static_cast<double>(predicted.size());
    return r;
}

inline std::string metrics_csv(const MetricsReport& r) {
    std::string s = "mean,std,median,l2\n";
    for (double v : {r.mean, r.std, r.median, r.l2}) {
        detail::append_number(s, v);
        s += ',';
    }
    s.back() = '\n';
    return s;
}

}  // namespace meshgeo
