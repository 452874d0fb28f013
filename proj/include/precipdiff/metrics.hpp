#pragma once

#include <string>
#include <vector>

#include "precipdiff/raster.hpp"

namespace precipdiff {

struct BinError {
    double bin_low = 0.0;
    double bin_high = 0.0;
    double mean_error = 0.0;
    double std_error = 0.0;
    std::size_t count = 0;
};

struct EvalReport {
    double rmse = 0.0;
    double crps = 0.0;
    double cc = 0.0;
    bool cc_defined = true;  // Pearson is undefined for constant fields
    double ssim = 0.0;
    std::size_t n_pixels = 0;
    std::vector<BinError> per_bin_errors;
};

struct EvalConfig {
    int ssim_window = 11;
    double ssim_data_range = 0.0;  // <= 0: max over both grids, floored at 1 mm/h
    std::vector<double> bin_edges = {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0};
};

double rmse(const PrecipGrid& pred, const PrecipGrid& truth);

// Exactly MAE; CRPS collapses to it for a single-valued prediction.
double crps_deterministic(const PrecipGrid& pred, const PrecipGrid& truth);

// Empirical-ensemble CRPS: mean|x_i - y| - 0.5 * mean|x_i - x_j|.
double crps_ensemble(const std::vector<PrecipGrid>& samples, const PrecipGrid& truth);

double pearson_cc(const PrecipGrid& pred, const PrecipGrid& truth);

// Mean local SSIM over an 11x11 Gaussian window (std 1.5), valid positions.
double ssim(const PrecipGrid& pred, const PrecipGrid& truth, int window = 11,
            double data_range = 0.0);

// Binned on truth intensity; last edge implies a final bin up to +inf.
std::vector<BinError> error_distribution(const PrecipGrid& pred, const PrecipGrid& truth,
                                         const std::vector<double>& bin_edges);

// Like error_distribution, but offsets each prediction pixel to a random
// neighbor within the containing factor x factor block before comparing.
std::vector<BinError> error_distribution_neighborhood(const PrecipGrid& pred,
                                                      const PrecipGrid& truth,
                                                      const std::vector<double>& bin_edges,
                                                      int factor, std::uint64_t seed);

EvalReport evaluate_suite(const PrecipGrid& pred, const PrecipGrid& truth,
                          const EvalConfig& config = {});

std::string report_to_json(const EvalReport& report);
void write_bins_csv(const std::vector<BinError>& bins, const std::string& path);

}  // namespace precipdiff
