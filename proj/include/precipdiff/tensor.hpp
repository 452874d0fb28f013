#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "precipdiff/errors.hpp"

namespace precipdiff {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::int64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Scatters this node's grad into parents' grads; cleared after backward.
    std::function<void(Node&)> backprop;

    void ensure_grad();
};

}  // namespace detail

// Handle to a node in a reverse-mode tape. Copies are shallow; the tape is
// recorded during forward evaluation and consumed by backward().
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }
    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Gradient buffer; valid after backward() for tracked leaves.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    void zero_grad();

    double item() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

  private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backprop);
};

// --- elementwise / reduction suite (broadcast-free) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// concat along the channel axis of [N,C,H,W] tensors
Tensor concat_channels(const Tensor& a, const Tensor& b);

// --- network building blocks ---
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);
Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);
// x: [N,D] @ weight: [D,M] + bias: [M]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// x: [N,C,H,W] + bias: [N,C] broadcast over H,W
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor upsample_nearest2(const Tensor& x);
Tensor reflect_pad2d(const Tensor& x, int top, int bottom, int left, int right);
Tensor crop2d(const Tensor& x, int top, int left, int out_h, int out_w);
// per-sample scaling of [N,...] by s[N]
Tensor scale_per_sample(const Tensor& x, const std::vector<double>& s);

// Runs reverse-mode accumulation from a scalar loss. Tracked leaves receive
// gradients; the tape is freed afterwards.
void backward(const Tensor& loss);

// Suppresses tape recording on the current thread while alive (inference).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// --- Adam ---
struct AdamConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
};

// Applies one bias-corrected update to every parameter using its stored
// gradient, then clears the gradients. Throws NonfiniteGradientError naming
// the offending parameter.
void adam_step(std::map<std::string, Tensor>& params, AdamState& state);

// --- finite-difference gradient checking ---
// f: scalar function of a flat point. Returns max over coordinates of
// |analytic - numeric| / max(1, |numeric|) with central differences.
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> point,
                  std::span<const double> analytic_grad, double eps);

// --- checkpoint serialization (PDCKPT1, CRC-64 trailer) ---
void save_checkpoint(const std::map<std::string, Tensor>& params, const std::string& path);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

std::uint64_t crc64(const void* bytes, std::size_t len, std::uint64_t seed = 0);

}  // namespace precipdiff
