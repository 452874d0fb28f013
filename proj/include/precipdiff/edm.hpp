#pragma once

#include <functional>
#include <string>
#include <vector>

#include "precipdiff/rng.hpp"
#include "precipdiff/tensor.hpp"
#include "precipdiff/unet.hpp"

namespace precipdiff {

struct EDMConfig {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double sigma_data = 0.5;
    double rho = 7.0;
    double p_mean = -1.2;
    double p_std = 1.2;
    int num_steps = 25;
    double s_churn = 2.5;
    double s_min = 0.05;
    double s_max = 50.0;
    double s_noise = 1.003;

    void validate() const;
};

struct Precond {
    double c_skip;
    double c_out;
    double c_in;
    double c_noise;
};

Precond edm_precondition(double sigma, const EDMConfig& config);

// EDM loss weight; lambda(sigma) * c_out(sigma)^2 == 1.
double edm_loss_weight(double sigma, const EDMConfig& config);

// Noise levels sigma_0 > ... > sigma_{N-1} > 0 followed by an exact 0.
std::vector<double> sigma_steps(const EDMConfig& config);

// A denoiser D(x; sigma): flat field in, flat field out. The network-backed
// version wraps preconditioning around the U-Net; analytic denoisers plug in
// for validation.
using DenoiseFn =
    std::function<std::vector<double>(const std::vector<double>& x, double sigma)>;

// D(x;sigma) = c_skip*x + c_out*F(c_in*x, embed(c_noise), cond), no autodiff.
DenoiseFn make_model_denoiser(const UNetModel& model, std::vector<double> cond,
                              int height, int width, const EDMConfig& config);

// Posterior mean denoiser for scalar data ~ N(mu, s^2): the exact optimum.
DenoiseFn make_gaussian_denoiser(double mu, double s);

// Second-order (Heun) stochastic sampler; returns the field at sigma = 0.
std::vector<double> edm_sample(const DenoiseFn& denoise, std::size_t n, Rng& rng,
                               const EDMConfig& config);

// Per-sample EDM training loss over a batch of (target residual, cond) fields,
// each [1,H,W] flattened. Returns the scalar loss tensor (graph attached).
Tensor edm_training_loss(const UNetModel& model, const std::vector<std::vector<double>>& targets,
                         const std::vector<std::vector<double>>& conds, int height, int width,
                         Rng& rng, const EDMConfig& config);

// --- DDPM reference oracle (validation only; generation uses EDM) ---

struct DDPMSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;
};

DDPMSchedule make_linear_ddpm_schedule(int T, double beta_start, double beta_end);

// Closed-form forward marginal sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.
std::vector<double> ddpm_forward_marginal(const std::vector<double>& x0, int t,
                                          const DDPMSchedule& schedule, Rng& rng);

// --- training loop ---

struct TrainHyper {
    int epochs = 2000;
    int batch_size = 16;
    double learning_rate = 2e-4;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean loss per epoch
    double residual_mean = 0.0;      // standardization stats of the target set
    double residual_std = 1.0;
};

// Trains the model in place on (cond, target residual) fields of fixed size.
// Residuals are standardized by the train-set mean/std before diffusion.
TrainResult edm_train(UNetModel& model, const std::vector<std::vector<double>>& targets,
                      const std::vector<std::vector<double>>& conds, int height, int width,
                      const TrainHyper& hyper, const EDMConfig& config,
                      const std::function<void(int, double)>& on_epoch = nullptr);

}  // namespace precipdiff
