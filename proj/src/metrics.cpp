#include "precipdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "precipdiff/rng.hpp"

#include <json.hpp>

namespace precipdiff {

namespace {

void require_same_shape(const PrecipGrid& a, const PrecipGrid& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw ShapeError("metric: grid shapes differ (" + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
}

bool valid_pair(double a, double b) { return !std::isnan(a) && !std::isnan(b); }

}  // namespace

double rmse(const PrecipGrid& pred, const PrecipGrid& truth) {
    require_same_shape(pred, truth);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (!valid_pair(pred.values[i], truth.values[i])) continue;
        double d = pred.values[i] - truth.values[i];
        acc += d * d;
        ++n;
    }
    if (n == 0) throw EmptyComparisonError("rmse: no valid cell pairs");
    return std::sqrt(acc / n);
}

double crps_deterministic(const PrecipGrid& pred, const PrecipGrid& truth) {
    require_same_shape(pred, truth);
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (!valid_pair(pred.values[i], truth.values[i])) continue;
        acc += std::abs(pred.values[i] - truth.values[i]);
        ++n;
    }
    if (n == 0) throw EmptyComparisonError("crps: no valid cell pairs");
    return acc / n;
}

double crps_ensemble(const std::vector<PrecipGrid>& samples, const PrecipGrid& truth) {
    if (samples.empty()) throw std::invalid_argument("crps_ensemble: empty ensemble");
    for (const auto& s : samples) require_same_shape(s, truth);
    std::size_t m = samples.size();
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < truth.values.size(); ++i) {
        double y = truth.values[i];
        if (std::isnan(y)) continue;
        double term1 = 0.0, term2 = 0.0;
        bool any_nan = false;
        for (std::size_t a = 0; a < m; ++a) {
            double xa = samples[a].values[i];
            if (std::isnan(xa)) {
                any_nan = true;
                break;
            }
            term1 += std::abs(xa - y);
            for (std::size_t b = 0; b < m; ++b) term2 += std::abs(xa - samples[b].values[i]);
        }
        if (any_nan) continue;
        acc += term1 / m - 0.5 * term2 / (m * m);
        ++n;
    }
    if (n == 0) throw EmptyComparisonError("crps_ensemble: no valid cell pairs");
    return acc / n;
}

double pearson_cc(const PrecipGrid& pred, const PrecipGrid& truth) {
    require_same_shape(pred, truth);
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        double x = pred.values[i], y = truth.values[i];
        if (!valid_pair(x, y)) continue;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        ++n;
    }
    if (n == 0) throw EmptyComparisonError("pearson_cc: no valid cell pairs");
    double vx = sxx - sx * sx / n;
    double vy = syy - sy * sy / n;
    if (vx <= 0.0 || vy <= 0.0)
        throw UndefinedCorrelationError("pearson_cc: zero variance in a field");
    return (sxy - sx * sy / n) / std::sqrt(vx * vy);
}

namespace {

std::vector<double> gaussian_window(int window, double std) {
    std::vector<double> w(static_cast<std::size_t>(window) * window);
    int half = window / 2;
    double sum = 0.0;
    for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) {
            double d2 = double(i - half) * (i - half) + double(j - half) * (j - half);
            double v = std::exp(-d2 / (2.0 * std * std));
            w[i * window + j] = v;
            sum += v;
        }
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace

double ssim(const PrecipGrid& pred, const PrecipGrid& truth, int window, double data_range) {
    require_same_shape(pred, truth);
    if (window % 2 != 1 || window > std::min(pred.rows, pred.cols))
        throw std::invalid_argument("ssim: window must be odd and fit inside the grid");
    if (data_range <= 0.0) {
        double mx = 0.0;
        for (double v : pred.values)
            if (!std::isnan(v)) mx = std::max(mx, v);
        for (double v : truth.values)
            if (!std::isnan(v)) mx = std::max(mx, v);
        data_range = std::max(mx, 1.0);  // floor so near-zero scenes stay well-posed
    }
    double c1 = 0.01 * data_range;
    c1 *= c1;
    double c2 = 0.03 * data_range;
    c2 *= c2;

    auto w = gaussian_window(window, 1.5);
    double acc = 0.0;
    std::size_t n = 0;
    for (int r = 0; r + window <= pred.rows; ++r) {
        for (int c = 0; c + window <= pred.cols; ++c) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            bool missing = false;
            for (int i = 0; i < window && !missing; ++i)
                for (int j = 0; j < window; ++j) {
                    double x = pred.at(r + i, c + j), y = truth.at(r + i, c + j);
                    if (std::isnan(x) || std::isnan(y)) {
                        missing = true;
                        break;
                    }
                    double wij = w[i * window + j];
                    mx += wij * x;
                    my += wij * y;
                    mxx += wij * x * x;
                    myy += wij * y * y;
                    mxy += wij * x * y;
                }
            if (missing) continue;
            double vx = mxx - mx * mx;
            double vy = myy - my * my;
            double cov = mxy - mx * my;
            double num = (2 * mx * my + c1) * (2 * cov + c2);
            double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            ++n;
        }
    }
    if (n == 0) throw EmptyComparisonError("ssim: no fully valid windows");
    return acc / n;
}

namespace {

std::vector<BinError> bin_errors(const std::vector<double>& truth_vals,
                                 const std::vector<double>& errors,
                                 const std::vector<double>& edges) {
    if (edges.size() < 2) throw std::invalid_argument("error_distribution: need >= 2 bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i] > edges[i - 1]))
            throw std::invalid_argument("error_distribution: bin edges must increase");
    // bins: [e0,e1), ..., [e_{k-2},e_{k-1}), [e_{k-1}, inf)
    std::size_t nbins = edges.size();
    std::vector<double> sum(nbins, 0.0), sum2(nbins, 0.0);
    std::vector<std::size_t> count(nbins, 0);
    for (std::size_t i = 0; i < truth_vals.size(); ++i) {
        double t = truth_vals[i];
        auto it = std::upper_bound(edges.begin(), edges.end(), t);
        if (it == edges.begin()) continue;  // below the first edge
        std::size_t b = static_cast<std::size_t>(it - edges.begin()) - 1;
        sum[b] += errors[i];
        sum2[b] += errors[i] * errors[i];
        ++count[b];
    }
    std::vector<BinError> out(nbins);
    for (std::size_t b = 0; b < nbins; ++b) {
        out[b].bin_low = edges[b];
        out[b].bin_high = b + 1 < nbins ? edges[b + 1] : std::numeric_limits<double>::infinity();
        out[b].count = count[b];
        if (count[b] > 0) {
            double m = sum[b] / count[b];
            out[b].mean_error = m;
            out[b].std_error = std::sqrt(std::max(sum2[b] / count[b] - m * m, 0.0));
        }
    }
    return out;
}

}  // namespace

std::vector<BinError> error_distribution(const PrecipGrid& pred, const PrecipGrid& truth,
                                         const std::vector<double>& bin_edges) {
    require_same_shape(pred, truth);
    std::vector<double> tv, ev;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (!valid_pair(pred.values[i], truth.values[i])) continue;
        tv.push_back(truth.values[i]);
        ev.push_back(pred.values[i] - truth.values[i]);
    }
    return bin_errors(tv, ev, bin_edges);
}

std::vector<BinError> error_distribution_neighborhood(const PrecipGrid& pred,
                                                      const PrecipGrid& truth,
                                                      const std::vector<double>& bin_edges,
                                                      int factor, std::uint64_t seed) {
    require_same_shape(pred, truth);
    if (factor < 1) throw std::invalid_argument("error_distribution_neighborhood: bad factor");
    Rng rng(seed);
    std::vector<double> tv, ev;
    for (int r = 0; r < pred.rows; ++r)
        for (int c = 0; c < pred.cols; ++c) {
            // sample a random pixel within the same LR block
            int br = (r / factor) * factor, bc = (c / factor) * factor;
            int rr = br + static_cast<int>(rng.below(std::min(factor, pred.rows - br)));
            int cc = bc + static_cast<int>(rng.below(std::min(factor, pred.cols - bc)));
            double p = pred.at(rr, cc), t = truth.at(r, c);
            if (!valid_pair(p, t)) continue;
            tv.push_back(t);
            ev.push_back(p - t);
        }
    return bin_errors(tv, ev, bin_edges);
}

EvalReport evaluate_suite(const PrecipGrid& pred, const PrecipGrid& truth,
                          const EvalConfig& config) {
    EvalReport rep;
    rep.rmse = rmse(pred, truth);
    rep.crps = crps_deterministic(pred, truth);
    try {
        rep.cc = pearson_cc(pred, truth);
        rep.cc_defined = true;
    } catch (const UndefinedCorrelationError&) {
        rep.cc = std::numeric_limits<double>::quiet_NaN();
        rep.cc_defined = false;
    }
    rep.ssim = ssim(pred, truth, config.ssim_window, config.ssim_data_range);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.values.size(); ++i)
        if (valid_pair(pred.values[i], truth.values[i])) ++n;
    rep.n_pixels = n;
    rep.per_bin_errors = error_distribution(pred, truth, config.bin_edges);
    return rep;
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["rmse"] = report.rmse;
    j["crps"] = report.crps;
    if (report.cc_defined)
        j["cc"] = report.cc;
    else
        j["cc"] = nullptr;
    j["cc_defined"] = report.cc_defined;
    j["ssim"] = report.ssim;
    j["n_pixels"] = report.n_pixels;
    auto& bins = j["per_bin_errors"] = nlohmann::json::array();
    for (const auto& b : report.per_bin_errors) {
        nlohmann::json jb;
        jb["bin_low"] = b.bin_low;
        jb["bin_high"] = std::isinf(b.bin_high) ? nlohmann::json(nullptr) : nlohmann::json(b.bin_high);
        jb["mean_error"] = b.mean_error;
        jb["std_error"] = b.std_error;
        jb["count"] = b.count;
        bins.push_back(jb);
    }
    return j.dump(2);
}

void write_bins_csv(const std::vector<BinError>& bins, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "bin_low,bin_high,mean_err,std_err,count\n";
    for (const auto& b : bins) {
        out << b.bin_low << ',';
        if (std::isinf(b.bin_high))
            out << "inf";
        else
            out << b.bin_high;
        out << ',' << b.mean_error << ',' << b.std_error << ',' << b.count << '\n';
    }
}

}  // namespace precipdiff
