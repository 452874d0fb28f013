#pragma once

#include <string>
#include <vector>

#include "precipdiff/edm.hpp"
#include "precipdiff/raster.hpp"
#include "precipdiff/rng.hpp"
#include "precipdiff/unet.hpp"

namespace precipdiff {

struct TrainingPair {
    PrecipGrid cond;             // conditioning field
    PrecipGrid target_residual;  // same shape; may be negative
    std::string task_tag;        // "correction" | "downscale"
    std::string source_id;
};

// Synthetic HR event generator: spectral synthesis of a correlated Gaussian
// field, dry-area thresholding at a quantile, exp-scaling to mm/h.
struct SynthParams {
    double spectral_exponent = 2.5;  // power-law slope of the field spectrum
    double dry_quantile = 0.5;       // fraction of cells forced to zero
    double intensity_scale = 1.5;    // mm/h scale of the wet transform
    double intensity_alpha = 1.2;    // skew of the wet transform
};

PrecipGrid synth_event(Rng& rng, int rows, int cols, const SynthParams& params = {});

// Satellite-style distortion: multiplicative log-normal gain, intensity
// compression (gamma < 1 inflates light rain, deflates heavy rain), box
// smoothing, and drizzle in dry cells.
struct BiasOperatorParams {
    double gain_log_std = 0.25;
    int gain_corr_len = 8;  // cells
    double intensity_gamma = 0.7;
    int smoothing_radius = 1;
    double drizzle_prob = 0.3;
    double drizzle_scale = 0.2;  // mm/h
};

PrecipGrid apply_bias(const PrecipGrid& truth_lr, const BiasOperatorParams& params, Rng& rng);

// residual = max_coarsen(radar, factor) - sat, cut into patches with cond.
std::vector<TrainingPair> build_correction_dataset(const std::vector<PrecipGrid>& sat,
                                                   const std::vector<PrecipGrid>& radar,
                                                   int factor, int patch_size, int stride);

// cond = linear_upsample(max_coarsen(radar, factor)); residual = radar - cond.
std::vector<TrainingPair> build_downscale_dataset(const std::vector<PrecipGrid>& radar,
                                                  int factor);

// Keeps grids whose zero-value fraction is <= zero_fraction_max (inclusive).
std::vector<PrecipGrid> filter_rain_events(const std::vector<PrecipGrid>& grids,
                                           double zero_fraction_max);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_train_test(std::vector<T> dataset,
                                                           double train_fraction,
                                                           std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("split_train_test: fraction must be in (0,1)");
    Rng rng(seed);
    for (std::size_t i = dataset.size(); i > 1; --i)
        std::swap(dataset[i - 1], dataset[rng.below(i)]);
    std::size_t n_train = static_cast<std::size_t>(train_fraction * dataset.size());
    std::vector<T> train(dataset.begin(), dataset.begin() + n_train);
    std::vector<T> test(dataset.begin() + n_train, dataset.end());
    return {std::move(train), std::move(test)};
}

// Trained diffusion model plus everything inference needs.
struct DiffusionModel {
    UNetModel net;
    std::string task;  // "correction" | "downscale"
    double residual_mean = 0.0;
    double residual_std = 1.0;
    EDMConfig edm;
    int patch_size = 20;  // correction-time tiling
    int factor = 4;
};

// checkpoint (PDCKPT1) + "<path>.json" metadata sidecar
void save_model(const DiffusionModel& model, const std::string& path);
DiffusionModel load_model(const std::string& path);

struct PipelineTrainResult {
    std::vector<double> epoch_loss;
};

// Trains a model for one task on its TrainingPairs (all the same shape).
PipelineTrainResult train_model(DiffusionModel& model, const std::vector<TrainingPair>& pairs,
                                const TrainHyper& hyper,
                                const std::function<void(int, double)>& on_epoch = nullptr);

// Bias correction at LR: per-patch sampled residual added to sat, stitched,
// clamped >= 0.
PrecipGrid correct(const PrecipGrid& sat, const DiffusionModel& model, Rng& rng);

// Downscaling: cond = linear_upsample(lr, factor); cond + sampled residual.
PrecipGrid downscale(const PrecipGrid& lr, const DiffusionModel& model, int factor, Rng& rng);

struct UnifiedResult {
    PrecipGrid corrected;   // intermediate stage, LR
    PrecipGrid downscaled;  // final HR product
};

UnifiedResult unified_inference(const PrecipGrid& sat, const DiffusionModel& corr_model,
                                const DiffusionModel& down_model, int factor, Rng& rng);

// Global least-squares hr ~ a*cond + b over all pixels.
std::pair<double, double> affine_baseline_fit(
    const std::vector<std::pair<PrecipGrid, PrecipGrid>>& pairs);
PrecipGrid affine_baseline_apply(const PrecipGrid& grid, double a, double b);

}  // namespace precipdiff
