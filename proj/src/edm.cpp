#include "precipdiff/edm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace precipdiff {

void EDMConfig::validate() const {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
        throw ConfigError("edm: need 0 < sigma_min < sigma_max");
    if (!(sigma_data > 0.0)) throw ConfigError("edm: sigma_data must be positive");
    if (num_steps < 2) throw ConfigError("edm: num_steps must be >= 2");
}

Precond edm_precondition(double sigma, const EDMConfig& config) {
    if (!(sigma > 0.0)) throw std::invalid_argument("edm_precondition: sigma must be > 0");
    double sd = config.sigma_data;
    double s2 = sigma * sigma + sd * sd;
    Precond p;
    p.c_skip = sd * sd / s2;
    p.c_out = sigma * sd / std::sqrt(s2);
    p.c_in = 1.0 / std::sqrt(s2);
    p.c_noise = 0.25 * std::log(sigma);
    return p;
}

double edm_loss_weight(double sigma, const EDMConfig& config) {
    double sd = config.sigma_data;
    return (sigma * sigma + sd * sd) / ((sigma * sd) * (sigma * sd));
}

std::vector<double> sigma_steps(const EDMConfig& config) {
    config.validate();
    int N = config.num_steps;
    double inv_rho = 1.0 / config.rho;
    double a = std::pow(config.sigma_max, inv_rho);
    double b = std::pow(config.sigma_min, inv_rho);
    std::vector<double> sig(N + 1, 0.0);
    for (int i = 0; i < N; ++i) {
        double t = static_cast<double>(i) / (N - 1);
        sig[i] = std::pow(a + t * (b - a), config.rho);
    }
    sig[0] = config.sigma_max;   // exact endpoints
    sig[N - 1] = config.sigma_min;
    sig[N] = 0.0;
    return sig;
}

DenoiseFn make_model_denoiser(const UNetModel& model, std::vector<double> cond,
                              int height, int width, const EDMConfig& config) {
    auto cond_t = Tensor::from_data({1, 1, height, width}, std::move(cond), false);
    return [&model, cond_t, height, width, config](const std::vector<double>& x,
                                                   double sigma) {
        NoGradGuard no_grad;
        Precond p = edm_precondition(sigma, config);
        std::vector<double> scaled(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) scaled[i] = p.c_in * x[i];
        Tensor xin = Tensor::from_data({1, 1, height, width}, std::move(scaled), false);
        Tensor emb = noise_embedding({p.c_noise}, model.config.noise_embed_dim, model.embed_freqs);
        Tensor f = model.forward(xin, emb, cond_t);
        std::vector<double> out(x.size());
        const auto& fd = f.data();
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = p.c_skip * x[i] + p.c_out * fd[i];
        return out;
    };
}

DenoiseFn make_gaussian_denoiser(double mu, double s) {
    return [mu, s](const std::vector<double>& x, double sigma) {
        double s2 = s * s, g2 = sigma * sigma;
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = (s2 * x[i] + g2 * mu) / (s2 + g2);
        return out;
    };
}

std::vector<double> edm_sample(const DenoiseFn& denoise, std::size_t n, Rng& rng,
                               const EDMConfig& config) {
    auto sig = sigma_steps(config);
    int N = config.num_steps;
    std::vector<double> x(n);
    for (auto& v : x) v = rng.gaussian(0.0, sig[0]);

    for (int i = 0; i < N; ++i) {
        double sigma = sig[i];
        double sigma_next = sig[i + 1];

        double gamma = 0.0;
        if (config.s_churn > 0.0 && sigma >= config.s_min && sigma <= config.s_max)
            gamma = std::min(config.s_churn / N, std::sqrt(2.0) - 1.0);
        double sigma_hat = sigma * (1.0 + gamma);
        if (gamma > 0.0) {
            double extra = config.s_noise * std::sqrt(sigma_hat * sigma_hat - sigma * sigma);
            for (auto& v : x) v += extra * rng.gaussian();
        }

        auto d0 = denoise(x, sigma_hat);
        std::vector<double> slope(n);
        for (std::size_t j = 0; j < n; ++j) slope[j] = (x[j] - d0[j]) / sigma_hat;

        std::vector<double> x_next(n);
        for (std::size_t j = 0; j < n; ++j) x_next[j] = x[j] + (sigma_next - sigma_hat) * slope[j];

        if (sigma_next > 0.0) {
            auto d1 = denoise(x_next, sigma_next);
            for (std::size_t j = 0; j < n; ++j) {
                double slope1 = (x_next[j] - d1[j]) / sigma_next;
                x_next[j] = x[j] + (sigma_next - sigma_hat) * 0.5 * (slope[j] + slope1);
            }
        }
        x = std::move(x_next);
        for (double v : x)
            if (!std::isfinite(v))
                throw SamplingDivergenceError("nonfinite sampler state at step " +
                                              std::to_string(i));
    }
    return x;
}

Tensor edm_training_loss(const UNetModel& model, const std::vector<std::vector<double>>& targets,
                         const std::vector<std::vector<double>>& conds, int height, int width,
                         Rng& rng, const EDMConfig& config) {
    if (targets.empty() || targets.size() != conds.size())
        throw ShapeError("edm_training_loss: empty or mismatched batch");
    int B = static_cast<int>(targets.size());
    std::size_t hw = static_cast<std::size_t>(height) * width;

    std::vector<double> sigma(B), c_noise(B), w(B), cin(B), cskip(B), cout_(B);
    for (int b = 0; b < B; ++b) {
        sigma[b] = std::exp(rng.gaussian(config.p_mean, config.p_std));
        Precond p = edm_precondition(sigma[b], config);
        c_noise[b] = p.c_noise;
        cin[b] = p.c_in;
        cskip[b] = p.c_skip;
        cout_[b] = p.c_out;
        w[b] = edm_loss_weight(sigma[b], config);
    }

    std::vector<double> target_flat(B * hw), cond_flat(B * hw), noisy_flat(B * hw);
    for (int b = 0; b < B; ++b) {
        if (targets[b].size() != hw || conds[b].size() != hw)
            throw ShapeError("edm_training_loss: field size mismatch in batch item " +
                             std::to_string(b));
        for (std::size_t i = 0; i < hw; ++i) {
            target_flat[b * hw + i] = targets[b][i];
            cond_flat[b * hw + i] = conds[b][i];
            noisy_flat[b * hw + i] = targets[b][i] + sigma[b] * rng.gaussian();
        }
    }

    Tensor target = Tensor::from_data({B, 1, height, width}, std::move(target_flat), false);
    Tensor cond = Tensor::from_data({B, 1, height, width}, std::move(cond_flat), false);
    Tensor noisy = Tensor::from_data({B, 1, height, width}, std::move(noisy_flat), false);

    Tensor xin = scale_per_sample(noisy, cin);
    Tensor emb = noise_embedding(c_noise, model.config.noise_embed_dim, model.embed_freqs);
    Tensor f = model.forward(xin, emb, cond);
    Tensor denoised = add(scale_per_sample(noisy, cskip), scale_per_sample(f, cout_));

    Tensor diff = add(denoised, scalar_mul(target, -1.0));
    Tensor sq = mul(diff, diff);
    Tensor weighted = scale_per_sample(sq, w);
    return mean(weighted);
}

DDPMSchedule make_linear_ddpm_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("ddpm: T must be >= 1");
    DDPMSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alpha_bars.resize(T);
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * t / (T - 1);
        if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("ddpm: betas must be in (0,1)");
        s.betas[t] = beta;
        abar *= 1.0 - beta;
        s.alpha_bars[t] = abar;
    }
    return s;
}

std::vector<double> ddpm_forward_marginal(const std::vector<double>& x0, int t,
                                          const DDPMSchedule& schedule, Rng& rng) {
    if (t < 1 || t > schedule.T)
        throw std::invalid_argument("ddpm_forward_marginal: t out of range [1," +
                                    std::to_string(schedule.T) + "]");
    double abar = schedule.alpha_bars[t - 1];
    double sa = std::sqrt(abar);
    double sn = std::sqrt(1.0 - abar);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = sa * x0[i] + sn * rng.gaussian();
    return out;
}

TrainResult edm_train(UNetModel& model, const std::vector<std::vector<double>>& targets,
                      const std::vector<std::vector<double>>& conds, int height, int width,
                      const TrainHyper& hyper, const EDMConfig& config,
                      const std::function<void(int, double)>& on_epoch) {
    if (targets.empty()) throw std::invalid_argument("edm_train: empty dataset");
    if (targets.size() != conds.size())
        throw ShapeError("edm_train: target/cond count mismatch");

    TrainResult result;
    // standardize residuals so sigma_data matches the data scale
    double sum = 0.0, sum2 = 0.0;
    std::size_t count = 0;
    for (const auto& t : targets) {
        for (double v : t) {
            sum += v;
            sum2 += v * v;
        }
        count += t.size();
    }
    double mean_v = sum / count;
    double var = std::max(sum2 / count - mean_v * mean_v, 0.0);
    double std_v = std::sqrt(var);
    if (std_v < 1e-12) std_v = 1.0;  // degenerate all-equal residuals
    result.residual_mean = mean_v;
    result.residual_std = std_v;

    std::vector<std::vector<double>> norm_targets(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        norm_targets[i].resize(targets[i].size());
        for (std::size_t j = 0; j < targets[i].size(); ++j)
            norm_targets[i][j] = (targets[i][j] - mean_v) / std_v;
    }

    AdamState adam;
    adam.config.learning_rate = hyper.learning_rate;
    Rng rng(hyper.seed);
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        // seeded Fisher-Yates shuffle
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.below(i + 1)]);

        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
            std::size_t stop = std::min(order.size(), start + hyper.batch_size);
            std::vector<std::vector<double>> bt, bc;
            for (std::size_t i = start; i < stop; ++i) {
                bt.push_back(norm_targets[order[i]]);
                bc.push_back(conds[order[i]]);
            }
            Tensor loss = edm_training_loss(model, bt, bc, height, width, rng, config);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainingDivergenceError("nonfinite loss at epoch " + std::to_string(epoch));
            backward(loss);
            adam_step(model.params, adam);
            epoch_loss += lv;
            ++batches;
        }
        epoch_loss /= std::max(batches, 1);
        result.epoch_loss.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    return result;
}

}  // namespace precipdiff
