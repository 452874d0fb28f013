#include "precipdiff/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace precipdiff {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

void Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

namespace {
std::atomic<std::int64_t> next_node_id{1};
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> d(numel(shape), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> d(numel(shape), value);
    return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    Tensor t;
    t.node_ = detail::make_node(std::move(shape), std::move(data), requires_grad);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

namespace {
thread_local int no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backprop) {
    bool track = false;
    if (no_grad_depth == 0)
        for (const auto& p : parents)
            if (p.requires_grad()) track = true;
    Tensor out;
    out.node_ = detail::make_node(std::move(shape), std::move(data), track);
    if (track) {
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) out.node_->parents.push_back(p.node());
        out.node_->backprop = std::move(backprop);
    }
    return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        for (auto& p : n.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->data[i];
        }
    });
}

Tensor scalar_mul(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
    return make_op(a.shape(), std::move(out), {a}, [s](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * s;
    });
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sigmoid(ad[i]);
    return make_op(a.shape(), std::move(out), {a}, [](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            double s = sigmoid(p->data[i]);
            p->grad[i] += n.grad[i] * s * (1.0 + p->data[i] * (1.0 - s));
        }
    });
}

Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    double inv = 1.0 / static_cast<double>(a.size());
    return make_op({1}, {acc * inv}, {a}, [inv](detail::Node& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        double g = n.grad[0] * inv;
        for (auto& gi : p->grad) gi += g;
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const auto& ad = a.data();
    const auto& bd = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < ad.size(); ++i) {
        double d = ad[i] - bd[i];
        acc += d * d;
    }
    double inv = 1.0 / static_cast<double>(a.size());
    return make_op({1}, {acc * inv}, {a, b}, [inv](detail::Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        double g = 2.0 * n.grad[0] * inv;
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < pa->data.size(); ++i)
                pa->grad[i] += g * (pa->data[i] - pb->data[i]);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < pb->data.size(); ++i)
                pb->grad[i] -= g * (pa->data[i] - pb->data[i]);
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4)
        throw ShapeError("concat_channels expects [N,C,H,W] tensors");
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw ShapeError("concat_channels: N/H/W mismatch " + shape_str(as) + " vs " + shape_str(bs));
    int N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
    std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Shape out_shape{N, Ca + Cb, H, W};
    std::vector<double> out(numel(out_shape));
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int n = 0; n < N; ++n) {
        std::copy_n(ad.begin() + n * Ca * hw, Ca * hw, out.begin() + n * (Ca + Cb) * hw);
        std::copy_n(bd.begin() + n * Cb * hw, Cb * hw, out.begin() + n * (Ca + Cb) * hw + Ca * hw);
    }
    return make_op(std::move(out_shape), std::move(out), {a, b},
                   [N, Ca, Cb, hw](detail::Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        for (int i = 0; i < N; ++i) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::int64_t j = 0; j < Ca * hw; ++j)
                    pa->grad[i * Ca * hw + j] += n.grad[i * (Ca + Cb) * hw + j];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t j = 0; j < Cb * hw; ++j)
                    pb->grad[i * Cb * hw + j] += n.grad[i * (Ca + Cb) * hw + Ca * hw + j];
            }
        }
    });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
    if (input.shape().size() != 4) throw ShapeError("conv2d: input must be [N,C,H,W]");
    if (weight.shape().size() != 4) throw ShapeError("conv2d: weight must be [Co,Ci,k,k]");
    const auto& is = input.shape();
    const auto& ws = weight.shape();
    int N = is[0], Ci = is[1], H = is[2], W = is[3];
    int Co = ws[0], k = ws[2];
    if (ws[1] != Ci)
        throw ShapeError("conv2d: input channels " + std::to_string(Ci) +
                         " != weight channels " + std::to_string(ws[1]));
    if (ws[3] != k) throw ShapeError("conv2d: non-square kernel");
    if (k % 2 != 1) throw ConfigError("conv2d: kernel size must be odd");
    if (padding < 0 || stride < 1) throw ConfigError("conv2d: bad stride/padding");
    if (bias.shape() != Shape{Co}) throw ShapeError("conv2d: bias must be [Co]");
    int Ho = (H + 2 * padding - k) / stride + 1;
    int Wo = (W + 2 * padding - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: input too small for kernel");

    Shape out_shape{N, Co, Ho, Wo};
    std::vector<double> out(numel(out_shape));
    const double* in = input.data().data();
    const double* w = weight.data().data();
    const double* b = bias.data().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            double* op = out.data() + ((std::int64_t)n * Co + co) * Ho * Wo;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    double acc = b[co];
                    int hi0 = ho * stride - padding;
                    int wi0 = wo * stride - padding;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const double* ip = in + ((std::int64_t)n * Ci + ci) * H * W;
                        const double* wp = w + (((std::int64_t)co * Ci + ci) * k) * k;
                        for (int kh = 0; kh < k; ++kh) {
                            int hi = hi0 + kh;
                            if (hi < 0 || hi >= H) continue;
                            for (int kw = 0; kw < k; ++kw) {
                                int wi = wi0 + kw;
                                if (wi < 0 || wi >= W) continue;
                                acc += ip[hi * W + wi] * wp[kh * k + kw];
                            }
                        }
                    }
                    op[ho * Wo + wo] = acc;
                }
            }
        }
    }

    auto back = [N, Ci, H, W, Co, k, Ho, Wo, stride, padding](detail::Node& node) {
        auto& pin = node.parents[0];
        auto& pw = node.parents[1];
        auto& pb = node.parents[2];
        const double* go = node.grad.data();
        if (pin->requires_grad) {
            pin->ensure_grad();
            const double* w = pw->data.data();
            double* gi = pin->grad.data();
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                for (int co = 0; co < Co; ++co) {
                    const double* gp = go + ((std::int64_t)n * Co + co) * Ho * Wo;
                    for (int ho = 0; ho < Ho; ++ho) {
                        int hi0 = ho * stride - padding;
                        for (int wo = 0; wo < Wo; ++wo) {
                            double g = gp[ho * Wo + wo];
                            if (g == 0.0) continue;
                            int wi0 = wo * stride - padding;
                            for (int ci = 0; ci < Ci; ++ci) {
                                double* ip = gi + ((std::int64_t)n * Ci + ci) * H * W;
                                const double* wp = w + (((std::int64_t)co * Ci + ci) * k) * k;
                                for (int kh = 0; kh < k; ++kh) {
                                    int hi = hi0 + kh;
                                    if (hi < 0 || hi >= H) continue;
                                    for (int kw = 0; kw < k; ++kw) {
                                        int wi = wi0 + kw;
                                        if (wi < 0 || wi >= W) continue;
                                        ip[hi * W + wi] += g * wp[kh * k + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            const double* in = pin->data.data();
            double* gw = pw->grad.data();
#pragma omp parallel for schedule(static)
            for (int co = 0; co < Co; ++co) {
                for (int n = 0; n < N; ++n) {
                    const double* gp = go + ((std::int64_t)n * Co + co) * Ho * Wo;
                    for (int ho = 0; ho < Ho; ++ho) {
                        int hi0 = ho * stride - padding;
                        for (int wo = 0; wo < Wo; ++wo) {
                            double g = gp[ho * Wo + wo];
                            if (g == 0.0) continue;
                            int wi0 = wo * stride - padding;
                            for (int ci = 0; ci < Ci; ++ci) {
                                const double* ip = in + ((std::int64_t)n * Ci + ci) * H * W;
                                double* wp = gw + (((std::int64_t)co * Ci + ci) * k) * k;
                                for (int kh = 0; kh < k; ++kh) {
                                    int hi = hi0 + kh;
                                    if (hi < 0 || hi >= H) continue;
                                    for (int kw = 0; kw < k; ++kw) {
                                        int wi = wi0 + kw;
                                        if (wi < 0 || wi >= W) continue;
                                        wp[kh * k + kw] += g * ip[hi * W + wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int co = 0; co < Co; ++co) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) {
                    const double* gp = go + ((std::int64_t)n * Co + co) * Ho * Wo;
                    for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
                }
                pb->grad[co] += acc;
            }
        }
    };
    return make_op(std::move(out_shape), std::move(out), {input, weight, bias}, back);
}

Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
    if (input.shape().size() != 4) throw ShapeError("group_norm: input must be [N,C,H,W]");
    const auto& is = input.shape();
    int N = is[0], C = is[1], H = is[2], W = is[3];
    if (groups < 1 || C % groups != 0)
        throw ConfigError("group_norm: channels " + std::to_string(C) +
                          " not divisible by groups " + std::to_string(groups));
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw ShapeError("group_norm: gamma/beta must be [C]");

    int cg = C / groups;
    std::int64_t gsize = (std::int64_t)cg * H * W;
    std::int64_t hw = (std::int64_t)H * W;
    std::vector<double> out(input.size());
    // cached per-(n,g) statistics for the backward pass
    auto mu = std::make_shared<std::vector<double>>(N * groups);
    auto inv_sigma = std::make_shared<std::vector<double>>(N * groups);

    const double* in = input.data().data();
    const double* gm = gamma.data().data();
    const double* bt = beta.data().data();
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const double* base = in + ((std::int64_t)n * C + g * cg) * hw;
            double m = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) m += base[i];
            m /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) {
                double d = base[i] - m;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            double is_ = 1.0 / std::sqrt(var + eps);
            (*mu)[n * groups + g] = m;
            (*inv_sigma)[n * groups + g] = is_;
            double* ob = out.data() + ((std::int64_t)n * C + g * cg) * hw;
            for (int c = 0; c < cg; ++c) {
                double ga = gm[g * cg + c];
                double be = bt[g * cg + c];
                for (std::int64_t i = 0; i < hw; ++i)
                    ob[c * hw + i] = ga * (base[c * hw + i] - m) * is_ + be;
            }
        }
    }

    auto back = [N, C, groups, cg, hw, gsize, mu, inv_sigma](detail::Node& node) {
        auto& pin = node.parents[0];
        auto& pg = node.parents[1];
        auto& pb = node.parents[2];
        const double* go = node.grad.data();
        const double* in = pin->data.data();
        const double* gm = pg->data.data();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (pin->requires_grad) pin->ensure_grad();
        for (int n = 0; n < N; ++n) {
            for (int g = 0; g < groups; ++g) {
                double m = (*mu)[n * groups + g];
                double is_ = (*inv_sigma)[n * groups + g];
                const double* xb = in + ((std::int64_t)n * C + g * cg) * hw;
                const double* gb = go + ((std::int64_t)n * C + g * cg) * hw;
                // gamma/beta grads
                if (pg->requires_grad || pb->requires_grad) {
                    for (int c = 0; c < cg; ++c) {
                        double dg = 0.0, db = 0.0;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            double xhat = (xb[c * hw + i] - m) * is_;
                            dg += gb[c * hw + i] * xhat;
                            db += gb[c * hw + i];
                        }
                        if (pg->requires_grad) pg->grad[g * cg + c] += dg;
                        if (pb->requires_grad) pb->grad[g * cg + c] += db;
                    }
                }
                if (!pin->requires_grad) continue;
                // dL/dxhat = go * gamma; dx = is * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                double sum_dxh = 0.0, sum_dxh_xhat = 0.0;
                for (int c = 0; c < cg; ++c) {
                    double ga = gm[g * cg + c];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double dxh = gb[c * hw + i] * ga;
                        double xhat = (xb[c * hw + i] - m) * is_;
                        sum_dxh += dxh;
                        sum_dxh_xhat += dxh * xhat;
                    }
                }
                double mean_dxh = sum_dxh / static_cast<double>(gsize);
                double mean_dxh_xhat = sum_dxh_xhat / static_cast<double>(gsize);
                double* gi = pin->grad.data() + ((std::int64_t)n * C + g * cg) * hw;
                for (int c = 0; c < cg; ++c) {
                    double ga = gm[g * cg + c];
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double dxh = gb[c * hw + i] * ga;
                        double xhat = (xb[c * hw + i] - m) * is_;
                        gi[c * hw + i] += is_ * (dxh - mean_dxh - xhat * mean_dxh_xhat);
                    }
                }
            }
        }
    };
    return make_op(input.shape(), std::move(out), {input, gamma, beta}, back);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.shape().size() != 2 || weight.shape().size() != 2)
        throw ShapeError("linear: expects x [N,D], weight [D,M]");
    int N = x.shape()[0], D = x.shape()[1];
    int M = weight.shape()[1];
    if (weight.shape()[0] != D) throw ShapeError("linear: weight rows != input dim");
    if (bias.shape() != Shape{M}) throw ShapeError("linear: bias must be [M]");
    std::vector<double> out((std::int64_t)N * M);
    const auto& xd = x.data();
    const auto& wd = weight.data();
    const auto& bd = bias.data();
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) {
            double acc = bd[m];
            for (int d = 0; d < D; ++d) acc += xd[n * D + d] * wd[d * M + m];
            out[n * M + m] = acc;
        }
    }
    return make_op({N, M}, std::move(out), {x, weight, bias}, [N, D, M](detail::Node& node) {
        auto& px = node.parents[0];
        auto& pw = node.parents[1];
        auto& pb = node.parents[2];
        const double* go = node.grad.data();
        if (px->requires_grad) {
            px->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d) {
                    double acc = 0.0;
                    for (int m = 0; m < M; ++m) acc += go[n * M + m] * pw->data[d * M + m];
                    px->grad[n * D + d] += acc;
                }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (int d = 0; d < D; ++d)
                for (int m = 0; m < M; ++m) {
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) acc += px->data[n * D + d] * go[n * M + m];
                    pw->grad[d * M + m] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int m = 0; m < M; ++m) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) acc += go[n * M + m];
                pb->grad[m] += acc;
            }
        }
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 4 || bias.shape().size() != 2)
        throw ShapeError("add_channel_bias: expects x [N,C,H,W], bias [N,C]");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (bias.shape()[0] != N || bias.shape()[1] != C)
        throw ShapeError("add_channel_bias: bias shape mismatch");
    std::int64_t hw = (std::int64_t)H * W;
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    const auto& bd = bias.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double b = bd[n * C + c];
            const double* xp = xd.data() + ((std::int64_t)n * C + c) * hw;
            double* op = out.data() + ((std::int64_t)n * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) op[i] = xp[i] + b;
        }
    return make_op(x.shape(), std::move(out), {x, bias}, [N, C, hw](detail::Node& node) {
        auto& px = node.parents[0];
        auto& pb = node.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < node.grad.size(); ++i) px->grad[i] += node.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = node.grad.data() + ((std::int64_t)n * C + c) * hw;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) acc += gp[i];
                    pb->grad[n * C + c] += acc;
                }
        }
    });
}

Tensor upsample_nearest2(const Tensor& x) {
    if (x.shape().size() != 4) throw ShapeError("upsample_nearest2: expects [N,C,H,W]");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    Shape out_shape{N, C, 2 * H, 2 * W};
    std::vector<double> out(numel(out_shape));
    const auto& xd = x.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xd.data() + (std::int64_t)nc * H * W;
        double* op = out.data() + (std::int64_t)nc * 4 * H * W;
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double v = xp[h * W + w];
                op[(2 * h) * 2 * W + 2 * w] = v;
                op[(2 * h) * 2 * W + 2 * w + 1] = v;
                op[(2 * h + 1) * 2 * W + 2 * w] = v;
                op[(2 * h + 1) * 2 * W + 2 * w + 1] = v;
            }
    }
    return make_op(std::move(out_shape), std::move(out), {x}, [N, C, H, W](detail::Node& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            double* gp = p->grad.data() + (std::int64_t)nc * H * W;
            const double* go = node.grad.data() + (std::int64_t)nc * 4 * H * W;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    gp[h * W + w] += go[(2 * h) * 2 * W + 2 * w] + go[(2 * h) * 2 * W + 2 * w + 1] +
                                     go[(2 * h + 1) * 2 * W + 2 * w] +
                                     go[(2 * h + 1) * 2 * W + 2 * w + 1];
        }
    });
}

namespace {
// index reflection without edge repeat: -1 -> 1, H -> H-2
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * (n - 1) - i;
    }
    return i;
}
}  // namespace

Tensor reflect_pad2d(const Tensor& x, int top, int bottom, int left, int right) {
    if (x.shape().size() != 4) throw ShapeError("reflect_pad2d: expects [N,C,H,W]");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (top >= H || bottom >= H || left >= W || right >= W)
        throw ConfigError("reflect_pad2d: padding must be smaller than the input extent");
    int Ho = H + top + bottom, Wo = W + left + right;
    Shape out_shape{N, C, Ho, Wo};
    std::vector<double> out(numel(out_shape));
    const auto& xd = x.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xd.data() + (std::int64_t)nc * H * W;
        double* op = out.data() + (std::int64_t)nc * Ho * Wo;
        for (int h = 0; h < Ho; ++h) {
            int hi = reflect_index(h - top, H);
            for (int w = 0; w < Wo; ++w) op[h * Wo + w] = xp[hi * W + reflect_index(w - left, W)];
        }
    }
    return make_op(std::move(out_shape), std::move(out), {x},
                   [N, C, H, W, top, left, Ho = H + top + bottom,
                    Wo = W + left + right](detail::Node& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            double* gp = p->grad.data() + (std::int64_t)nc * H * W;
            const double* go = node.grad.data() + (std::int64_t)nc * Ho * Wo;
            for (int h = 0; h < Ho; ++h) {
                int hi = reflect_index(h - top, H);
                for (int w = 0; w < Wo; ++w)
                    gp[hi * W + reflect_index(w - left, W)] += go[h * Wo + w];
            }
        }
    });
}

Tensor crop2d(const Tensor& x, int top, int left, int out_h, int out_w) {
    if (x.shape().size() != 4) throw ShapeError("crop2d: expects [N,C,H,W]");
    int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (top < 0 || left < 0 || top + out_h > H || left + out_w > W)
        throw ShapeError("crop2d: crop window outside input");
    Shape out_shape{N, C, out_h, out_w};
    std::vector<double> out(numel(out_shape));
    const auto& xd = x.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xd.data() + (std::int64_t)nc * H * W;
        double* op = out.data() + (std::int64_t)nc * out_h * out_w;
        for (int h = 0; h < out_h; ++h)
            for (int w = 0; w < out_w; ++w) op[h * out_w + w] = xp[(h + top) * W + (w + left)];
    }
    return make_op(std::move(out_shape), std::move(out), {x},
                   [N, C, W, top, left, out_h, out_w](detail::Node& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int nc = 0; nc < N * C; ++nc) {
            double* gp = p->grad.data() + (std::int64_t)nc * (p->shape[2] * p->shape[3]);
            const double* go = node.grad.data() + (std::int64_t)nc * out_h * out_w;
            for (int h = 0; h < out_h; ++h)
                for (int w = 0; w < out_w; ++w)
                    gp[(h + top) * W + (w + left)] += go[h * out_w + w];
        }
    });
}

Tensor scale_per_sample(const Tensor& x, const std::vector<double>& s) {
    if (x.shape().empty() || x.shape()[0] != static_cast<int>(s.size()))
        throw ShapeError("scale_per_sample: batch dim != scale count");
    std::int64_t per = x.size() / static_cast<std::int64_t>(s.size());
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t n = 0; n < s.size(); ++n)
        for (std::int64_t i = 0; i < per; ++i) out[n * per + i] = xd[n * per + i] * s[n];
    return make_op(x.shape(), std::move(out), {x}, [s, per](detail::Node& node) {
        auto& p = node.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t n = 0; n < s.size(); ++n)
            for (std::int64_t i = 0; i < per; ++i)
                p->grad[n * per + i] += node.grad[n * per + i] * s[n];
    });
}

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    // Node ids increase monotonically and parents precede children, so a
    // descending-id sweep over the reachable set is a valid reverse
    // topological order.
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{loss.node()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        nodes.push_back(n);
        for (auto& p : n->parents) stack.push_back(p);
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto& n : nodes) {
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
        // free the tape as we go; leaves keep their grads
        n->backprop = nullptr;
        n->parents.clear();
    }
}

void adam_step(std::map<std::string, Tensor>& params, AdamState& state) {
    const auto& cfg = state.config;
    state.step_count += 1;
    double t = static_cast<double>(state.step_count);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params) {
        auto& g = p.grad();
        for (double gv : g)
            if (!std::isfinite(gv))
                throw NonfiniteGradientError("nonfinite gradient in parameter '" + name + "'");
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        if (m.size() != g.size())
            throw ShapeError("adam_step: moment shape mismatch for '" + name + "'");
        auto& d = p.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            d[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
        p.zero_grad();
    }
}

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> point,
                  std::span<const double> analytic_grad, double eps) {
    if (point.size() != analytic_grad.size())
        throw ShapeError("grad_check: point/gradient length mismatch");
    std::vector<double> x(point.begin(), point.end());
    double max_err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double orig = x[i];
        x[i] = orig + eps;
        double fp = f(x);
        x[i] = orig - eps;
        double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: nonfinite function value");
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::abs(analytic_grad[i] - numeric) / std::max(1.0, std::abs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// ---- CRC-64 (ECMA-182, reflected) ----

namespace {

const std::uint64_t* crc64_table() {
    static std::uint64_t table[256];
    static bool init = [] {
        const std::uint64_t poly = 0xC96C5795D7870F42ULL;
        for (int i = 0; i < 256; ++i) {
            std::uint64_t c = static_cast<std::uint64_t>(i);
            for (int j = 0; j < 8; ++j) c = (c & 1) ? (c >> 1) ^ poly : c >> 1;
            table[i] = c;
        }
        return true;
    }();
    (void)init;
    return table;
}

}  // namespace

std::uint64_t crc64(const void* bytes, std::size_t len, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    const std::uint64_t* t = crc64_table();
    std::uint64_t c = ~seed;
    for (std::size_t i = 0; i < len; ++i) c = t[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return ~c;
}

// ---- PDCKPT1 checkpoint format ----
// magic "PDCKPT1" | records | u64 CRC-64 of all preceding bytes
// record: u32 name_len | name | u32 rank | u32 dims[rank] | f64 values (LE)

namespace {

constexpr char kCkptMagic[7] = {'P', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::string& buf, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.append(b, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& off) {
    if (off + sizeof(T) > buf.size()) throw TruncationError("checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save_checkpoint(const std::map<std::string, Tensor>& params, const std::string& path) {
    std::string buf(kCkptMagic, sizeof(kCkptMagic));
    for (const auto& [name, t] : params) {
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
        for (double v : t.data()) put<double>(buf, v);
    }
    put<std::uint64_t>(buf, crc64(buf.data(), buf.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kCkptMagic) + 8) throw TruncationError("checkpoint too short");
    if (std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
        throw BadMagicError("not a PDCKPT1 file");
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (crc64(buf.data(), buf.size() - 8) != stored)
        throw ChecksumError("checkpoint CRC mismatch");
    std::map<std::string, Tensor> params;
    std::size_t off = sizeof(kCkptMagic);
    std::size_t end = buf.size() - 8;
    while (off < end) {
        auto name_len = take<std::uint32_t>(buf, off);
        if (off + name_len > end) throw TruncationError("checkpoint truncated in name");
        std::string name(buf.data() + off, name_len);
        off += name_len;
        auto rank = take<std::uint32_t>(buf, off);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(take<std::uint32_t>(buf, off));
        std::int64_t n = numel(shape);
        std::vector<double> data(n);
        for (auto& v : data) v = take<double>(buf, off);
        params.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data), true));
    }
    return params;
}

}  // namespace precipdiff
