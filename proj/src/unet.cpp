#include "precipdiff/unet.hpp"

#include <cmath>

#include "precipdiff/rng.hpp"

#include <json.hpp>

namespace precipdiff {

void UNetConfig::validate() const {
    if (channels.size() < 2) throw ConfigError("unet: need at least 2 levels");
    for (int c : channels)
        if (c < 1) throw ConfigError("unet: channel widths must be positive");
    if (in_channels < 2) throw ConfigError("unet: in_channels must include the conditioning path");
    if (noise_embed_dim < 2 || noise_embed_dim % 2 != 0)
        throw ConfigError("unet: noise_embed_dim must be even and >= 2");
    if (out_channels != 1) throw ConfigError("unet: out_channels must be 1");
}

int norm_groups(int channels) {
    int g = std::min(8, channels);
    while (channels % g != 0) --g;
    return g;
}

std::vector<double> make_embed_freqs(int dim) {
    if (dim % 2 != 0) throw ConfigError("noise_embedding: dim must be even");
    Rng rng(0x5EEDF0F0u);  // fixed: all models share the same feature basis
    std::vector<double> f(dim / 2);
    for (auto& v : f) v = rng.gaussian();
    return f;
}

Tensor noise_embedding(const std::vector<double>& c_noise, int dim,
                       const std::vector<double>& freqs) {
    if (dim % 2 != 0) throw ConfigError("noise_embedding: dim must be even");
    if (static_cast<int>(freqs.size()) != dim / 2)
        throw ConfigError("noise_embedding: frequency count != dim/2");
    int N = static_cast<int>(c_noise.size());
    std::vector<double> out(static_cast<std::size_t>(N) * dim);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < dim / 2; ++i) {
            double phase = 2.0 * M_PI * freqs[i] * c_noise[n];
            out[n * dim + i] = std::sin(phase);
            out[n * dim + dim / 2 + i] = std::cos(phase);
        }
    return Tensor::from_data({N, dim}, std::move(out), false);
}

namespace {

Tensor he_conv_weight(Rng& rng, int co, int ci, int k) {
    std::vector<double> w(static_cast<std::size_t>(co) * ci * k * k);
    double std = std::sqrt(2.0 / (static_cast<double>(ci) * k * k));
    for (auto& v : w) v = rng.gaussian(0.0, std);
    return Tensor::from_data({co, ci, k, k}, std::move(w), true);
}

struct ParamSet {
    std::map<std::string, Tensor>& p;
    const Tensor& operator()(const std::string& name) const {
        auto it = p.find(name);
        if (it == p.end()) throw ConfigError("unet: missing parameter '" + name + "'");
        return it->second;
    }
};

// conv -> group_norm -> +noise bias -> silu -> conv -> group_norm -> silu
Tensor level_block(const ParamSet& P, const std::string& prefix, const Tensor& x,
                   const Tensor& embedding, int channels) {
    int g = norm_groups(channels);
    Tensor h = conv2d(x, P(prefix + ".conv1.w"), P(prefix + ".conv1.b"), 1, 1);
    h = group_norm(h, g, P(prefix + ".gn1.g"), P(prefix + ".gn1.b"));
    Tensor eb = linear(embedding, P(prefix + ".emb.w"), P(prefix + ".emb.b"));
    h = add_channel_bias(h, eb);
    h = silu(h);
    h = conv2d(h, P(prefix + ".conv2.w"), P(prefix + ".conv2.b"), 1, 1);
    h = group_norm(h, g, P(prefix + ".gn2.g"), P(prefix + ".gn2.b"));
    return silu(h);
}

void init_level_block(std::map<std::string, Tensor>& p, Rng& rng, const std::string& prefix,
                      int cin, int cout, int embed_dim) {
    p[prefix + ".conv1.w"] = he_conv_weight(rng, cout, cin, 3);
    p[prefix + ".conv1.b"] = Tensor::zeros({cout}, true);
    p[prefix + ".gn1.g"] = Tensor::full({cout}, 1.0, true);
    p[prefix + ".gn1.b"] = Tensor::zeros({cout}, true);
    {
        std::vector<double> w(static_cast<std::size_t>(embed_dim) * cout);
        double std = std::sqrt(1.0 / embed_dim);
        for (auto& v : w) v = rng.gaussian(0.0, std);
        p[prefix + ".emb.w"] = Tensor::from_data({embed_dim, cout}, std::move(w), true);
    }
    p[prefix + ".emb.b"] = Tensor::zeros({cout}, true);
    p[prefix + ".conv2.w"] = he_conv_weight(rng, cout, cout, 3);
    p[prefix + ".conv2.b"] = Tensor::zeros({cout}, true);
    p[prefix + ".gn2.g"] = Tensor::full({cout}, 1.0, true);
    p[prefix + ".gn2.b"] = Tensor::zeros({cout}, true);
}

}  // namespace

UNetModel build_unet(const UNetConfig& config, std::uint64_t seed) {
    config.validate();
    UNetModel m;
    m.config = config;
    m.embed_freqs = make_embed_freqs(config.noise_embed_dim);
    Rng rng(seed);
    const auto& ch = config.channels;
    int L = config.blocks();

    m.params["in.w"] = he_conv_weight(rng, ch[0], config.in_channels, 3);
    m.params["in.b"] = Tensor::zeros({ch[0]}, true);
    for (int i = 0; i < L; ++i) {
        init_level_block(m.params, rng, "enc" + std::to_string(i), ch[i], ch[i],
                         config.noise_embed_dim);
        if (i + 1 < L) {
            m.params["down" + std::to_string(i) + ".w"] = he_conv_weight(rng, ch[i + 1], ch[i], 3);
            m.params["down" + std::to_string(i) + ".b"] = Tensor::zeros({ch[i + 1]}, true);
        }
    }
    for (int i = L - 2; i >= 0; --i) {
        m.params["up" + std::to_string(i) + ".w"] = he_conv_weight(rng, ch[i], ch[i + 1], 3);
        m.params["up" + std::to_string(i) + ".b"] = Tensor::zeros({ch[i]}, true);
        init_level_block(m.params, rng, "dec" + std::to_string(i), 2 * ch[i], ch[i],
                         config.noise_embed_dim);
    }
    // zero init: a fresh model predicts the EDM skip path exactly
    m.params["out.w"] = Tensor::zeros({config.out_channels, ch[0], 3, 3}, true);
    m.params["out.b"] = Tensor::zeros({config.out_channels}, true);
    return m;
}

Tensor UNetModel::forward(const Tensor& noisy, const Tensor& embedding, const Tensor& cond) const {
    if (noisy.shape().size() != 4 || cond.shape().size() != 4)
        throw ShapeError("unet forward: inputs must be [N,1,H,W]");
    if (noisy.shape() != cond.shape())
        throw ShapeError("unet forward: residual/conditioning shape mismatch " +
                         shape_str(noisy.shape()) + " vs " + shape_str(cond.shape()));
    int H = noisy.shape()[2], W = noisy.shape()[3];
    int div = config.divisor();
    int pad_h = (div - H % div) % div;
    int pad_w = (div - W % div) % div;

    Tensor x = concat_channels(noisy, cond);
    if (pad_h || pad_w) x = reflect_pad2d(x, 0, pad_h, 0, pad_w);

    ParamSet P{const_cast<std::map<std::string, Tensor>&>(params)};
    const auto& ch = config.channels;
    int L = config.blocks();

    x = conv2d(x, P("in.w"), P("in.b"), 1, 1);
    std::vector<Tensor> skips;
    for (int i = 0; i < L; ++i) {
        x = level_block(P, "enc" + std::to_string(i), x, embedding, ch[i]);
        if (i + 1 < L) {
            skips.push_back(x);
            x = conv2d(x, P("down" + std::to_string(i) + ".w"),
                       P("down" + std::to_string(i) + ".b"), 2, 1);
        }
    }
    for (int i = L - 2; i >= 0; --i) {
        x = upsample_nearest2(x);
        x = conv2d(x, P("up" + std::to_string(i) + ".w"), P("up" + std::to_string(i) + ".b"), 1, 1);
        x = concat_channels(x, skips[i]);
        x = level_block(P, "dec" + std::to_string(i), x, embedding, ch[i]);
    }
    x = conv2d(x, P("out.w"), P("out.b"), 1, 1);
    if (pad_h || pad_w) x = crop2d(x, 0, 0, H, W);
    return x;
}

std::int64_t UNetModel::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

std::string unet_config_to_json(const UNetConfig& config) {
    nlohmann::json j;
    j["in_channels"] = config.in_channels;
    j["channels"] = config.channels;
    j["noise_embed_dim"] = config.noise_embed_dim;
    j["out_channels"] = config.out_channels;
    return j.dump();
}

UNetConfig unet_config_from_json(const std::string& json_text) {
    auto j = nlohmann::json::parse(json_text);
    UNetConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.noise_embed_dim = j.at("noise_embed_dim").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.validate();
    return c;
}

}  // namespace precipdiff
