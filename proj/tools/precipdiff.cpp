// precipdiff: satellite-precipitation bias correction and downscaling with
// residual diffusion models. Subcommands cover synthetic data generation,
// dataset construction, training, inference, evaluation, and grid utilities.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "precipdiff/metrics.hpp"
#include "precipdiff/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace precipdiff;

namespace {

// exit codes: 0 success, 2 I/O or config, 3 training divergence,
// 4 model/task mismatch, 5 evaluation misuse
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitModelMismatch = 4;
constexpr int kExitEvalMisuse = 5;

struct EvalMisuseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void apply_thread_cap() {
#ifdef _OPENMP
    if (const char* env = std::getenv("PRECIPDIFF_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

void write_json(const json& j, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return json::parse(in);
}

// JSON config file with full CLI-flag override: a key applies only when the
// matching flag was not passed on the command line.
class ConfigFile {
  public:
    ConfigFile(const CLI::App* cmd, const std::string& path) : cmd_(cmd) {
        if (!path.empty()) data_ = read_json(path);
    }

    template <typename T>
    void pull(const std::string& flag, const std::string& key, T& var) const {
        if (data_.contains(key) && cmd_->count(flag) == 0) var = data_.at(key).get<T>();
    }

  private:
    const CLI::App* cmd_;
    json data_;
};

std::string event_name(std::size_t i, const char* kind) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "event_%04zu_%s.pgrid", i, kind);
    return buf;
}

// ---- synth ----

struct SynthArgs {
    std::string out_dir = "synth_out";
    std::string config_path;
    int events = 32;
    int rows = 64;
    int cols = 64;
    int factor = 4;
    std::uint64_t seed = 7;
    SynthParams synth;
    BiasOperatorParams bias;
};

int run_synth(const CLI::App* cmd, SynthArgs& a) {
    ConfigFile cfg(cmd, a.config_path);
    cfg.pull("--events", "events", a.events);
    cfg.pull("--rows", "rows", a.rows);
    cfg.pull("--cols", "cols", a.cols);
    cfg.pull("--factor", "factor", a.factor);
    cfg.pull("--seed", "seed", a.seed);
    cfg.pull("--spectral-exponent", "spectral_exponent", a.synth.spectral_exponent);
    cfg.pull("--dry-quantile", "dry_quantile", a.synth.dry_quantile);
    cfg.pull("--intensity-scale", "intensity_scale", a.synth.intensity_scale);
    cfg.pull("--intensity-alpha", "intensity_alpha", a.synth.intensity_alpha);
    cfg.pull("--gain-log-std", "gain_log_std", a.bias.gain_log_std);
    cfg.pull("--gain-corr-len", "gain_corr_len", a.bias.gain_corr_len);
    cfg.pull("--intensity-gamma", "intensity_gamma", a.bias.intensity_gamma);
    cfg.pull("--smoothing-radius", "smoothing_radius", a.bias.smoothing_radius);
    cfg.pull("--drizzle-prob", "drizzle_prob", a.bias.drizzle_prob);
    cfg.pull("--drizzle-scale", "drizzle_scale", a.bias.drizzle_scale);

    if (a.events < 1) throw ConfigError("synth: --events must be >= 1");
    if (a.rows % a.factor != 0 || a.cols % a.factor != 0)
        throw ConfigError("synth: rows/cols must be divisible by factor");

    fs::create_directories(a.out_dir);
    Rng base(a.seed);
    json events = json::array();
    for (int i = 0; i < a.events; ++i) {
        Rng er = base.split(static_cast<std::uint64_t>(i));
        auto truth = synth_event(er, a.rows, a.cols, a.synth);
        truth.timestamp = i;
        auto lr = max_coarsen(truth, a.factor);
        auto sat = apply_bias(lr, a.bias, er);
        sat.timestamp = i;

        auto tp = (fs::path(a.out_dir) / event_name(i, "truth")).string();
        auto sp = (fs::path(a.out_dir) / event_name(i, "sat")).string();
        write_pgrid(truth, tp);
        write_pgrid(sat, sp);
        events.push_back({{"truth", event_name(i, "truth")}, {"sat", event_name(i, "sat")}});
        if ((i + 1) % 32 == 0 || i + 1 == a.events)
            std::cerr << "synth: " << (i + 1) << "/" << a.events << " events\n";
    }

    json manifest = {
        {"command", "synth"},
        {"seed", a.seed},
        {"events", a.events},
        {"rows", a.rows},
        {"cols", a.cols},
        {"factor", a.factor},
        {"synth_params",
         {{"spectral_exponent", a.synth.spectral_exponent},
          {"dry_quantile", a.synth.dry_quantile},
          {"intensity_scale", a.synth.intensity_scale},
          {"intensity_alpha", a.synth.intensity_alpha}}},
        {"bias_params",
         {{"gain_log_std", a.bias.gain_log_std},
          {"gain_corr_len", a.bias.gain_corr_len},
          {"intensity_gamma", a.bias.intensity_gamma},
          {"smoothing_radius", a.bias.smoothing_radius},
          {"drizzle_prob", a.bias.drizzle_prob},
          {"drizzle_scale", a.bias.drizzle_scale}}},
        {"files", events},
    };
    write_json(manifest, (fs::path(a.out_dir) / "manifest.json").string());
    return 0;
}

// ---- build-dataset ----

struct BuildArgs {
    std::string input;  // synth manifest
    std::string out = "dataset.json";
    std::string config_path;
    std::string task = "correction";
    int factor = 4;
    int patch = 20;
    int stride = 10;
    double train_fraction = 0.9;
    double zero_fraction_max = 0.5;
    std::uint64_t split_seed = 0;
};

int run_build_dataset(const CLI::App* cmd, BuildArgs& a) {
    ConfigFile cfg(cmd, a.config_path);
    cfg.pull("--task", "task", a.task);
    cfg.pull("--factor", "factor", a.factor);
    cfg.pull("--patch", "patch", a.patch);
    cfg.pull("--stride", "stride", a.stride);
    cfg.pull("--train-fraction", "train_fraction", a.train_fraction);
    cfg.pull("--zero-fraction-max", "zero_fraction_max", a.zero_fraction_max);
    cfg.pull("--split-seed", "split_seed", a.split_seed);

    if (a.task != "correction" && a.task != "downscale")
        throw ConfigError("build-dataset: task must be correction or downscale");

    auto manifest = read_json(a.input);
    fs::path base = fs::path(a.input).parent_path();
    struct EventPaths {
        std::string truth, sat;
    };
    std::vector<EventPaths> events;
    for (const auto& e : manifest.at("files")) {
        EventPaths p;
        p.truth = (base / e.at("truth").get<std::string>()).string();
        p.sat = (base / e.at("sat").get<std::string>()).string();
        auto truth = read_pgrid(p.truth);
        if (1.0 - rain_fraction(truth) <= a.zero_fraction_max) events.push_back(std::move(p));
    }
    if (events.empty()) throw ConfigError("build-dataset: no events pass the rain filter");

    auto [train, test] = split_train_test(events, a.train_fraction, a.split_seed);
    auto to_json = [](const std::vector<EventPaths>& v) {
        json arr = json::array();
        for (const auto& e : v) arr.push_back({{"truth", e.truth}, {"sat", e.sat}});
        return arr;
    };
    json out = {
        {"command", "build-dataset"},  {"task", a.task},
        {"factor", a.factor},          {"patch", a.patch},
        {"stride", a.stride},          {"train_fraction", a.train_fraction},
        {"zero_fraction_max", a.zero_fraction_max},
        {"split_seed", a.split_seed},  {"train", to_json(train)},
        {"test", to_json(test)},
    };
    write_json(out, a.out);
    std::cerr << "build-dataset: " << train.size() << " train / " << test.size()
              << " test events -> " << a.out << "\n";
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string dataset;
    std::string out = "model.ckpt";
    std::string config_path;
    std::vector<int> channels = {32, 64, 128};
    int embed_dim = 32;
    int epochs = 2000;
    int batch = 16;
    double lr = 2e-4;
    std::uint64_t seed = 0;
};

std::vector<TrainingPair> pairs_from_manifest(const json& m, const std::string& split) {
    std::vector<PrecipGrid> radar, sat;
    for (const auto& e : m.at(split)) {
        radar.push_back(read_pgrid(e.at("truth").get<std::string>()));
        sat.push_back(read_pgrid(e.at("sat").get<std::string>()));
    }
    std::string task = m.at("task").get<std::string>();
    int factor = m.at("factor").get<int>();
    if (task == "correction")
        return build_correction_dataset(sat, radar, factor, m.at("patch").get<int>(),
                                        m.at("stride").get<int>());
    return build_downscale_dataset(radar, factor);
}

int run_train(const CLI::App* cmd, TrainArgs& a) {
    ConfigFile cfg(cmd, a.config_path);
    cfg.pull("--channels", "channels", a.channels);
    cfg.pull("--embed-dim", "embed_dim", a.embed_dim);
    cfg.pull("--epochs", "epochs", a.epochs);
    cfg.pull("--batch", "batch", a.batch);
    cfg.pull("--lr", "lr", a.lr);
    cfg.pull("--seed", "seed", a.seed);

    auto manifest = read_json(a.dataset);
    auto pairs = pairs_from_manifest(manifest, "train");
    std::cerr << "train: " << pairs.size() << " training pairs\n";

    DiffusionModel model;
    UNetConfig ucfg;
    ucfg.channels = a.channels;
    ucfg.noise_embed_dim = a.embed_dim;
    ucfg.validate();
    model.net = build_unet(ucfg, a.seed);
    model.task = manifest.at("task").get<std::string>();
    model.factor = manifest.at("factor").get<int>();
    model.patch_size = manifest.at("patch").get<int>();

    std::vector<double> losses;
    TrainHyper hyper{.epochs = a.epochs, .batch_size = a.batch, .learning_rate = a.lr,
                     .seed = a.seed};
    int report_every = std::max(a.epochs / 20, 1);
    auto result = train_model(model, pairs, hyper, [&](int epoch, double loss) {
        losses.push_back(loss);
        if ((epoch + 1) % report_every == 0 || epoch + 1 == a.epochs)
            std::cerr << "train: epoch " << (epoch + 1) << "/" << a.epochs << " loss " << loss
                      << "\n";
    });

    save_model(model, a.out);
    std::ofstream csv(a.out + ".loss.csv", std::ios::trunc);
    csv << "epoch,mean_loss\n";
    for (std::size_t i = 0; i < result.epoch_loss.size(); ++i)
        csv << i << ',' << result.epoch_loss[i] << '\n';

    json run_manifest = {
        {"command", "train"},
        {"dataset", a.dataset},
        {"task", model.task},
        {"channels", a.channels},
        {"embed_dim", a.embed_dim},
        {"epochs", a.epochs},
        {"batch", a.batch},
        {"lr", a.lr},
        {"seed", a.seed},
        {"residual_mean", model.residual_mean},
        {"residual_std", model.residual_std},
        {"final_loss", result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()},
        {"checkpoint", a.out},
    };
    write_json(run_manifest, a.out + ".manifest.json");
    return 0;
}

// ---- infer ----

struct InferArgs {
    std::string mode = "correct";  // correct | downscale | unified
    std::string model_path;
    std::string down_model_path;
    std::vector<std::string> inputs;
    std::string out_dir = "infer_out";
    std::uint64_t seed = 0;
    int steps = 25;  // paper's sampler budget
    bool emit_intermediate = false;
};

int run_infer(const CLI::App*, InferArgs& a) {
    if (a.inputs.empty()) throw ConfigError("infer: no --input grids given");
    fs::create_directories(a.out_dir);

    DiffusionModel primary = load_model(a.model_path);
    primary.edm.num_steps = a.steps;
    DiffusionModel secondary;
    if (a.mode == "unified") {
        if (a.down_model_path.empty())
            throw ConfigError("infer: unified mode needs --down-model");
        secondary = load_model(a.down_model_path);
        secondary.edm.num_steps = a.steps;
    } else if (a.mode != "correct" && a.mode != "downscale") {
        throw ConfigError("infer: mode must be correct, downscale, or unified");
    }

    Rng base(a.seed);
    json outputs = json::array();
    for (std::size_t i = 0; i < a.inputs.size(); ++i) {
        auto grid = read_pgrid(a.inputs[i]);
        Rng rng = base.split(i);
        std::string stem = fs::path(a.inputs[i]).stem().string();
        if (a.mode == "correct") {
            auto corrected = correct(grid, primary, rng);
            auto path = (fs::path(a.out_dir) / (stem + "_corrected.pgrid")).string();
            write_pgrid(corrected, path);
            outputs.push_back(path);
        } else if (a.mode == "downscale") {
            auto hi = downscale(grid, primary, primary.factor, rng);
            auto path = (fs::path(a.out_dir) / (stem + "_downscaled.pgrid")).string();
            write_pgrid(hi, path);
            outputs.push_back(path);
        } else {
            auto res = unified_inference(grid, primary, secondary, secondary.factor, rng);
            auto cp = (fs::path(a.out_dir) / (stem + "_corrected.pgrid")).string();
            auto dp = (fs::path(a.out_dir) / (stem + "_downscaled.pgrid")).string();
            write_pgrid(res.corrected, cp);
            write_pgrid(res.downscaled, dp);
            outputs.push_back(cp);
            outputs.push_back(dp);
        }
        std::cerr << "infer: " << (i + 1) << "/" << a.inputs.size() << "\n";
    }

    json manifest = {
        {"command", "infer"},
        {"mode", a.mode},
        {"model", a.model_path},
        {"down_model", a.down_model_path},
        {"inputs", a.inputs},
        {"seed", a.seed},
        {"steps", a.steps},
        {"emit_intermediate", a.emit_intermediate},
        {"outputs", outputs},
    };
    write_json(manifest, (fs::path(a.out_dir) / "manifest.json").string());
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::vector<std::string> pred;
    std::vector<std::string> truth;
    std::string out = "report.json";
    std::string bins_csv;
};

int run_eval(const CLI::App*, EvalArgs& a) {
    if (a.pred.empty() || a.pred.size() != a.truth.size())
        throw EvalMisuseError("eval: --pred and --truth lists must align (" +
                              std::to_string(a.pred.size()) + " vs " +
                              std::to_string(a.truth.size()) + ")");
    try {
        // pixel-pooled aggregation: stack equally shaped pairs vertically
        PrecipGrid pred_all, truth_all;
        for (std::size_t i = 0; i < a.pred.size(); ++i) {
            auto p = read_pgrid(a.pred[i]);
            auto t = read_pgrid(a.truth[i]);
            if (p.rows != t.rows || p.cols != t.cols)
                throw ShapeError("eval: pred/truth shape mismatch for pair " + std::to_string(i));
            if (i == 0) {
                pred_all = p;
                truth_all = t;
            } else {
                if (p.cols != pred_all.cols || p.rows != pred_all.rows)
                    throw ShapeError("eval: all pairs must share one shape for pooling");
                pred_all.rows += p.rows;
                truth_all.rows += t.rows;
                pred_all.values.insert(pred_all.values.end(), p.values.begin(), p.values.end());
                truth_all.values.insert(truth_all.values.end(), t.values.begin(),
                                        t.values.end());
            }
        }
        auto report = evaluate_suite(pred_all, truth_all);
        json j = json::parse(report_to_json(report));
        j["pred"] = a.pred;
        j["truth"] = a.truth;
        write_json(j, a.out);
        if (!a.bins_csv.empty()) write_bins_csv(report.per_bin_errors, a.bins_csv);
        std::cerr << "eval: rmse " << report.rmse << " crps " << report.crps << " ssim "
                  << report.ssim << "\n";
        return 0;
    } catch (const ShapeError& e) {
        throw EvalMisuseError(e.what());
    } catch (const EmptyComparisonError& e) {
        throw EvalMisuseError(e.what());
    }
}

// ---- grid-tool ----

struct GridToolArgs {
    std::string op;
    std::string input;
    std::string out;
    int factor = 4;
};

int run_grid_tool(const CLI::App*, GridToolArgs& a) {
    auto grid = read_pgrid(a.input);
    if (a.op == "to-csv") {
        write_grid_csv(grid, a.out);
    } else {
        PrecipGrid result;
        if (a.op == "coarsen-max")
            result = max_coarsen(grid, a.factor);
        else if (a.op == "coarsen-mean")
            result = mean_coarsen(grid, a.factor);
        else if (a.op == "upsample-linear")
            result = linear_upsample(grid, a.factor);
        else if (a.op == "upsample-bicubic")
            result = bicubic_upsample(grid, a.factor);
        else
            throw ConfigError("grid-tool: unknown op '" + a.op + "'");
        write_pgrid(result, a.out);
    }
    json manifest = {
        {"command", "grid-tool"}, {"op", a.op},   {"input", a.input},
        {"factor", a.factor},     {"out", a.out},
    };
    write_json(manifest, a.out + ".manifest.json");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();

    CLI::App app{"precipdiff: residual-diffusion bias correction and downscaling"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate synthetic (truth HR, satellite LR) pairs");
    synth->add_option("--out", sa.out_dir, "output directory");
    synth->add_option("--config", sa.config_path, "JSON config (flags override)");
    synth->add_option("--events", sa.events, "number of events");
    synth->add_option("--rows", sa.rows, "HR rows");
    synth->add_option("--cols", sa.cols, "HR cols");
    synth->add_option("--factor", sa.factor, "coarsening factor");
    synth->add_option("--seed", sa.seed, "random seed");
    synth->add_option("--spectral-exponent", sa.synth.spectral_exponent);
    synth->add_option("--dry-quantile", sa.synth.dry_quantile);
    synth->add_option("--intensity-scale", sa.synth.intensity_scale);
    synth->add_option("--intensity-alpha", sa.synth.intensity_alpha);
    synth->add_option("--gain-log-std", sa.bias.gain_log_std);
    synth->add_option("--gain-corr-len", sa.bias.gain_corr_len);
    synth->add_option("--intensity-gamma", sa.bias.intensity_gamma);
    synth->add_option("--smoothing-radius", sa.bias.smoothing_radius);
    synth->add_option("--drizzle-prob", sa.bias.drizzle_prob);
    synth->add_option("--drizzle-scale", sa.bias.drizzle_scale);

    BuildArgs ba;
    auto* build = app.add_subcommand("build-dataset", "filter, split, and manifest a dataset");
    build->add_option("--input", ba.input, "synth manifest.json")->required();
    build->add_option("--out", ba.out, "dataset manifest output path");
    build->add_option("--config", ba.config_path, "JSON config (flags override)");
    build->add_option("--task", ba.task, "correction | downscale");
    build->add_option("--factor", ba.factor, "coarsening factor");
    build->add_option("--patch", ba.patch, "correction patch size");
    build->add_option("--stride", ba.stride, "correction patch stride");
    build->add_option("--train-fraction", ba.train_fraction);
    build->add_option("--zero-fraction-max", ba.zero_fraction_max, "rain filter threshold");
    build->add_option("--split-seed", ba.split_seed);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train a diffusion model on a dataset manifest");
    train->add_option("--dataset", ta.dataset, "dataset manifest")->required();
    train->add_option("--out", ta.out, "checkpoint output path");
    train->add_option("--config", ta.config_path, "JSON config (flags override)");
    train->add_option("--channels", ta.channels, "U-Net channel widths")->delimiter(',');
    train->add_option("--embed-dim", ta.embed_dim, "noise embedding dimension");
    train->add_option("--epochs", ta.epochs);
    train->add_option("--batch", ta.batch);
    train->add_option("--lr", ta.lr);
    train->add_option("--seed", ta.seed);

    InferArgs ia;
    auto* infer = app.add_subcommand("infer", "run correction/downscaling/unified inference");
    infer->add_option("--mode", ia.mode, "correct | downscale | unified");
    infer->add_option("--model", ia.model_path, "checkpoint")->required();
    infer->add_option("--down-model", ia.down_model_path, "downscale checkpoint (unified)");
    infer->add_option("--input", ia.inputs, "input PGRID files")->required();
    infer->add_option("--out", ia.out_dir, "output directory");
    infer->add_option("--seed", ia.seed);
    infer->add_option("--steps", ia.steps, "sampler steps (default 25)");
    infer->add_flag("--emit-intermediate", ia.emit_intermediate,
                    "write the corrected stage (always on in unified mode)");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "evaluate prediction grids against truth grids");
    eval->add_option("--pred", ea.pred, "prediction PGRID files")->required();
    eval->add_option("--truth", ea.truth, "truth PGRID files")->required();
    eval->add_option("--out", ea.out, "JSON report path");
    eval->add_option("--bins-csv", ea.bins_csv, "per-bin error CSV path");

    GridToolArgs ga;
    auto* gt = app.add_subcommand("grid-tool", "grid resampling and export utilities");
    gt->add_option("op", ga.op,
                   "coarsen-max | coarsen-mean | upsample-linear | upsample-bicubic | to-csv")
        ->required();
    gt->add_option("--input", ga.input, "input PGRID")->required();
    gt->add_option("--out", ga.out, "output path")->required();
    gt->add_option("--factor", ga.factor);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth->parsed()) return run_synth(synth, sa);
        if (build->parsed()) return run_build_dataset(build, ba);
        if (train->parsed()) return run_train(train, ta);
        if (infer->parsed()) return run_infer(infer, ia);
        if (eval->parsed()) return run_eval(eval, ea);
        if (gt->parsed()) return run_grid_tool(gt, ga);
    } catch (const TrainingDivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const NonfiniteGradientError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const WrongModelError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitModelMismatch;
    } catch (const EvalMisuseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitEvalMisuse;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return 0;
}
