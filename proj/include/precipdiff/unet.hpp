#pragma once

#include <map>
#include <string>
#include <vector>

#include "precipdiff/tensor.hpp"

namespace precipdiff {

struct UNetConfig {
    int in_channels = 2;  // noisy residual + conditioning field
    std::vector<int> channels = {32, 64, 128};
    int noise_embed_dim = 32;
    int out_channels = 1;

    int blocks() const { return static_cast<int>(channels.size()); }
    // spatial inputs must be divisible by this (or get reflect-padded)
    int divisor() const { return 1 << (blocks() - 1); }
    void validate() const;
};

// U-Net with stride-2 downsampling, nearest-neighbor upsampling + conv,
// channel-concat skip connections, and a per-level noise-embedding bias.
// The final conv is zero-initialized so a fresh model outputs exactly 0.
struct UNetModel {
    UNetConfig config;
    std::map<std::string, Tensor> params;
    std::vector<double> embed_freqs;  // fixed Fourier frequencies, not trained

    // noisy: [N,1,H,W], embedding: [N,noise_embed_dim], cond: [N,1,H,W]
    Tensor forward(const Tensor& noisy, const Tensor& embedding, const Tensor& cond) const;

    std::int64_t parameter_count() const;
};

UNetModel build_unet(const UNetConfig& config, std::uint64_t seed);

// Fourier-feature embedding [sin(2*pi*f_i*c), cos(2*pi*f_i*c)] per batch item.
Tensor noise_embedding(const std::vector<double>& c_noise, int dim,
                       const std::vector<double>& freqs);

// Frequencies are derived from a fixed seed so every model shares them and
// checkpoints need not store them.
std::vector<double> make_embed_freqs(int dim);

// group count for a channel width: min(8, C) reduced to the nearest divisor
int norm_groups(int channels);

std::string unet_config_to_json(const UNetConfig& config);
UNetConfig unet_config_from_json(const std::string& json_text);

}  // namespace precipdiff
