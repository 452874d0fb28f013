#include "precipdiff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>

#include <fftw3.h>
#include <json.hpp>

namespace precipdiff {

namespace {

std::mutex fftw_plan_mutex;  // FFTW planning is not thread safe

// Zero-mean, unit-std correlated Gaussian field with a power-law spectrum.
std::vector<double> spectral_gaussian_field(Rng& rng, int rows, int cols, double exponent) {
    int nc = cols / 2 + 1;
    std::vector<double> white(static_cast<std::size_t>(rows) * cols);
    for (auto& v : white) v = rng.gaussian();

    fftw_complex* spec = fftw_alloc_complex(static_cast<std::size_t>(rows) * nc);
    std::vector<double> field(white.size());
    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex);
        fftw_plan fwd =
            fftw_plan_dft_r2c_2d(rows, cols, white.data(), spec, FFTW_ESTIMATE);
        fftw_execute(fwd);
        fftw_destroy_plan(fwd);
    }
    for (int r = 0; r < rows; ++r) {
        double ky = (r <= rows / 2 ? r : r - rows) / static_cast<double>(rows);
        for (int c = 0; c < nc; ++c) {
            double kx = c / static_cast<double>(cols);
            double k = std::sqrt(kx * kx + ky * ky);
            double amp = k > 0.0 ? std::pow(k, -exponent / 2.0) : 0.0;
            spec[r * nc + c][0] *= amp;
            spec[r * nc + c][1] *= amp;
        }
    }
    {
        std::lock_guard<std::mutex> lock(fftw_plan_mutex);
        fftw_plan bwd =
            fftw_plan_dft_c2r_2d(rows, cols, spec, field.data(), FFTW_ESTIMATE);
        fftw_execute(bwd);
        fftw_destroy_plan(bwd);
    }
    fftw_free(spec);

    double mean = std::accumulate(field.begin(), field.end(), 0.0) / field.size();
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= field.size();
    double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
    for (auto& v : field) v = (v - mean) * inv_std;
    return field;
}

}  // namespace

PrecipGrid synth_event(Rng& rng, int rows, int cols, const SynthParams& params) {
    if (rows < 16 || cols < 16) throw std::invalid_argument("synth_event: need >= 16x16");
    auto z = spectral_gaussian_field(rng, rows, cols, params.spectral_exponent);

    // empirical quantile threshold so the dry fraction is exact per field
    std::vector<double> sorted = z;
    std::sort(sorted.begin(), sorted.end());
    std::size_t qi = std::min(sorted.size() - 1,
                              static_cast<std::size_t>(params.dry_quantile * sorted.size()));
    double zq = sorted[qi];

    PrecipGrid g = PrecipGrid::make(rows, cols);
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i] <= zq) continue;  // dry
        g.values[i] = params.intensity_scale * std::expm1(params.intensity_alpha * (z[i] - zq));
    }
    return g;
}

namespace {

// box smoothing, replicated edges; radius 0 is the identity
std::vector<double> box_smooth(const std::vector<double>& in, int rows, int cols, int radius) {
    if (radius <= 0) return in;
    std::vector<double> tmp(in.size()), out(in.size());
    int n = 2 * radius + 1;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int j = -radius; j <= radius; ++j)
                acc += in[r * cols + std::clamp(c + j, 0, cols - 1)];
            tmp[r * cols + c] = acc / n;
        }
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += tmp[std::clamp(r + i, 0, rows - 1) * cols + c];
            out[r * cols + c] = acc / n;
        }
    return out;
}

}  // namespace

PrecipGrid apply_bias(const PrecipGrid& truth_lr, const BiasOperatorParams& params, Rng& rng) {
    truth_lr.validate();
    PrecipGrid out = truth_lr;

    // correlated multiplicative gain, mean 1 in expectation
    std::vector<double> gfield(out.values.size());
    if (params.gain_log_std > 0.0) {
        std::vector<double> noise(out.values.size());
        for (auto& v : noise) v = rng.gaussian();
        noise = box_smooth(noise, out.rows, out.cols, params.gain_corr_len / 2);
        double mean = std::accumulate(noise.begin(), noise.end(), 0.0) / noise.size();
        double var = 0.0;
        for (double v : noise) var += (v - mean) * (v - mean);
        var /= noise.size();
        double inv_std = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
        double ls = params.gain_log_std;
        for (std::size_t i = 0; i < gfield.size(); ++i)
            gfield[i] = std::exp(ls * (noise[i] - mean) * inv_std - 0.5 * ls * ls);
    } else {
        std::fill(gfield.begin(), gfield.end(), 1.0);
    }

    for (std::size_t i = 0; i < out.values.size(); ++i) {
        double v = out.values[i];
        if (std::isnan(v)) continue;
        out.values[i] = gfield[i] * std::pow(v, params.intensity_gamma);
    }
    out.values = box_smooth(out.values, out.rows, out.cols, params.smoothing_radius);
    for (auto& v : out.values) {
        if (std::isnan(v)) continue;
        if (v == 0.0 && params.drizzle_prob > 0.0 && rng.uniform() < params.drizzle_prob)
            v = params.drizzle_scale * rng.uniform();
        v = std::max(v, 0.0);
    }
    return out;
}

std::vector<TrainingPair> build_correction_dataset(const std::vector<PrecipGrid>& sat,
                                                   const std::vector<PrecipGrid>& radar,
                                                   int factor, int patch_size, int stride) {
    if (sat.size() != radar.size())
        throw PairingError("correction dataset: " + std::to_string(sat.size()) +
                           " satellite grids vs " + std::to_string(radar.size()) + " radar grids");
    std::vector<TrainingPair> pairs;
    for (std::size_t i = 0; i < sat.size(); ++i) {
        if (sat[i].timestamp != radar[i].timestamp)
            throw PairingError("correction dataset: timestamp mismatch at index " +
                               std::to_string(i));
        PrecipGrid lr_radar = max_coarsen(radar[i], factor);
        if (lr_radar.rows != sat[i].rows || lr_radar.cols != sat[i].cols)
            throw ShapeError("correction dataset: coarsened radar " +
                             std::to_string(lr_radar.rows) + "x" + std::to_string(lr_radar.cols) +
                             " does not align with satellite grid at index " + std::to_string(i));
        PrecipGrid residual = lr_radar;
        for (std::size_t j = 0; j < residual.values.size(); ++j)
            residual.values[j] -= sat[i].values[j];

        auto cond_patches = extract_patches(sat[i], patch_size, stride);
        auto res_patches = extract_patches(residual, patch_size, stride);
        for (std::size_t p = 0; p < cond_patches.size(); ++p) {
            TrainingPair tp;
            tp.cond = std::move(cond_patches[p].grid);
            tp.target_residual = std::move(res_patches[p].grid);
            tp.task_tag = "correction";
            tp.source_id = "event" + std::to_string(i) + "_patch" + std::to_string(p);
            pairs.push_back(std::move(tp));
        }
    }
    return pairs;
}

std::vector<TrainingPair> build_downscale_dataset(const std::vector<PrecipGrid>& radar,
                                                  int factor) {
    std::vector<TrainingPair> pairs;
    for (std::size_t i = 0; i < radar.size(); ++i) {
        PrecipGrid lr = max_coarsen(radar[i], factor);
        PrecipGrid cond = linear_upsample(lr, factor);
        PrecipGrid residual = radar[i];
        for (std::size_t j = 0; j < residual.values.size(); ++j)
            residual.values[j] -= cond.values[j];
        TrainingPair tp;
        tp.cond = std::move(cond);
        tp.target_residual = std::move(residual);
        tp.task_tag = "downscale";
        tp.source_id = "event" + std::to_string(i);
        pairs.push_back(std::move(tp));
    }
    return pairs;
}

std::vector<PrecipGrid> filter_rain_events(const std::vector<PrecipGrid>& grids,
                                           double zero_fraction_max) {
    if (zero_fraction_max < 0.0 || zero_fraction_max > 1.0)
        throw std::invalid_argument("filter_rain_events: threshold must be in [0,1]");
    std::vector<PrecipGrid> kept;
    for (const auto& g : grids) {
        double zero_fraction = 1.0 - rain_fraction(g);
        if (zero_fraction <= zero_fraction_max) kept.push_back(g);
    }
    return kept;
}

// ---- model persistence ----

void save_model(const DiffusionModel& model, const std::string& path) {
    save_checkpoint(model.net.params, path);
    nlohmann::json j;
    j["task"] = model.task;
    j["residual_mean"] = model.residual_mean;
    j["residual_std"] = model.residual_std;
    j["patch_size"] = model.patch_size;
    j["factor"] = model.factor;
    j["unet"] = nlohmann::json::parse(unet_config_to_json(model.net.config));
    j["edm"] = {{"sigma_min", model.edm.sigma_min}, {"sigma_max", model.edm.sigma_max},
                {"sigma_data", model.edm.sigma_data}, {"rho", model.edm.rho},
                {"p_mean", model.edm.p_mean}, {"p_std", model.edm.p_std},
                {"num_steps", model.edm.num_steps}, {"s_churn", model.edm.s_churn},
                {"s_min", model.edm.s_min}, {"s_max", model.edm.s_max},
                {"s_noise", model.edm.s_noise}};
    std::ofstream out(path + ".json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + ".json' for writing");
    out << j.dump(2) << '\n';
}

DiffusionModel load_model(const std::string& path) {
    std::ifstream in(path + ".json");
    if (!in) throw std::runtime_error("cannot open '" + path + ".json'");
    nlohmann::json j = nlohmann::json::parse(in);
    DiffusionModel m;
    m.task = j.at("task").get<std::string>();
    m.residual_mean = j.at("residual_mean").get<double>();
    m.residual_std = j.at("residual_std").get<double>();
    m.patch_size = j.at("patch_size").get<int>();
    m.factor = j.at("factor").get<int>();
    m.net.config = unet_config_from_json(j.at("unet").dump());
    const auto& e = j.at("edm");
    m.edm.sigma_min = e.at("sigma_min").get<double>();
    m.edm.sigma_max = e.at("sigma_max").get<double>();
    m.edm.sigma_data = e.at("sigma_data").get<double>();
    m.edm.rho = e.at("rho").get<double>();
    m.edm.p_mean = e.at("p_mean").get<double>();
    m.edm.p_std = e.at("p_std").get<double>();
    m.edm.num_steps = e.at("num_steps").get<int>();
    m.edm.s_churn = e.at("s_churn").get<double>();
    m.edm.s_min = e.at("s_min").get<double>();
    m.edm.s_max = e.at("s_max").get<double>();
    m.edm.s_noise = e.at("s_noise").get<double>();
    m.net.params = load_checkpoint(path);
    m.net.embed_freqs = make_embed_freqs(m.net.config.noise_embed_dim);
    return m;
}

// ---- training orchestration ----

PipelineTrainResult train_model(DiffusionModel& model, const std::vector<TrainingPair>& pairs,
                                const TrainHyper& hyper,
                                const std::function<void(int, double)>& on_epoch) {
    if (pairs.empty()) throw std::invalid_argument("train_model: empty dataset");
    int h = pairs[0].cond.rows, w = pairs[0].cond.cols;
    std::vector<std::vector<double>> targets, conds;
    targets.reserve(pairs.size());
    conds.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (p.task_tag != model.task)
            throw WrongModelError("train_model: pair tagged '" + p.task_tag +
                                  "' fed to a '" + model.task + "' model");
        if (p.cond.rows != h || p.cond.cols != w ||
            p.target_residual.rows != h || p.target_residual.cols != w)
            throw ShapeError("train_model: all pairs must share one shape");
        targets.push_back(p.target_residual.values);
        conds.push_back(p.cond.values);
    }
    TrainResult r = edm_train(model.net, targets, conds, h, w, hyper, model.edm, on_epoch);
    model.residual_mean = r.residual_mean;
    model.residual_std = r.residual_std;
    PipelineTrainResult out;
    out.epoch_loss = std::move(r.epoch_loss);
    return out;
}

// ---- inference ----

namespace {

PrecipGrid sample_residual_grid(const PrecipGrid& cond, const DiffusionModel& model, Rng& rng) {
    auto denoise = make_model_denoiser(model.net, cond.values, cond.rows, cond.cols, model.edm);
    auto sampled = edm_sample(denoise, cond.values.size(), rng, model.edm);
    PrecipGrid res = cond;
    for (std::size_t i = 0; i < sampled.size(); ++i)
        res.values[i] = sampled[i] * model.residual_std + model.residual_mean;
    return res;
}

}  // namespace

PrecipGrid correct(const PrecipGrid& sat, const DiffusionModel& model, Rng& rng) {
    if (model.task != "correction")
        throw WrongModelError("correct: checkpoint is tagged '" + model.task + "'");
    int size = std::min({model.patch_size, sat.rows, sat.cols});
    int stride = std::max(size / 2, 1);
    auto patches = extract_patches(sat, size, stride);
    std::vector<Patch> residuals(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        Rng prng = rng.split(i);
        residuals[i].row_off = patches[i].row_off;
        residuals[i].col_off = patches[i].col_off;
        residuals[i].grid = sample_residual_grid(patches[i].grid, model, prng);
    }
    PrecipGrid res = stitch_patches(residuals, sat.rows, sat.cols);
    PrecipGrid out = sat;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = std::max(out.values[i] + res.values[i], 0.0);
    return out;
}

PrecipGrid downscale(const PrecipGrid& lr, const DiffusionModel& model, int factor, Rng& rng) {
    if (model.task != "downscale")
        throw WrongModelError("downscale: checkpoint is tagged '" + model.task + "'");
    PrecipGrid cond = linear_upsample(lr, factor);
    Rng srng = rng.split(0);
    PrecipGrid res = sample_residual_grid(cond, model, srng);
    PrecipGrid out = cond;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = std::max(out.values[i] + res.values[i], 0.0);
    return out;
}

UnifiedResult unified_inference(const PrecipGrid& sat, const DiffusionModel& corr_model,
                                const DiffusionModel& down_model, int factor, Rng& rng) {
    UnifiedResult r;
    Rng crng = rng.split(1);
    Rng drng = rng.split(2);
    r.corrected = correct(sat, corr_model, crng);
    r.downscaled = downscale(r.corrected, down_model, factor, drng);
    return r;
}

// ---- baselines ----

std::pair<double, double> affine_baseline_fit(
    const std::vector<std::pair<PrecipGrid, PrecipGrid>>& pairs) {
    if (pairs.size() < 2) throw std::invalid_argument("affine_baseline_fit: need >= 2 pairs");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t n = 0;
    for (const auto& [cond, hr] : pairs) {
        if (cond.rows != hr.rows || cond.cols != hr.cols)
            throw ShapeError("affine_baseline_fit: pair shape mismatch");
        for (std::size_t i = 0; i < cond.values.size(); ++i) {
            double x = cond.values[i], y = hr.values[i];
            if (std::isnan(x) || std::isnan(y)) continue;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            ++n;
        }
    }
    if (n == 0) throw EmptyComparisonError("affine_baseline_fit: no valid pixels");
    double det = sxx - sx * sx / n;
    if (det <= 1e-12 * std::max(1.0, sxx))
        throw SingularFitError("affine_baseline_fit: constant conditioning field");
    double a = (sxy - sx * sy / n) / det;
    double b = (sy - a * sx) / n;
    return {a, b};
}

PrecipGrid affine_baseline_apply(const PrecipGrid& grid, double a, double b) {
    PrecipGrid out = grid;
    for (auto& v : out.values)
        if (!std::isnan(v)) v = std::max(a * v + b, 0.0);
    return out;
}

}  // namespace precipdiff
