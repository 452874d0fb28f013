#include "precipdiff/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "precipdiff/tensor.hpp"  // crc64

namespace precipdiff {

PrecipGrid PrecipGrid::make(int rows, int cols, double cell_size_km) {
    PrecipGrid g;
    g.rows = rows;
    g.cols = cols;
    g.cell_size_km = cell_size_km;
    g.values.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    return g;
}

void PrecipGrid::validate() const {
    if (rows < 1 || cols < 1) throw ShapeError("grid: rows/cols must be positive");
    if (values.size() != static_cast<std::size_t>(rows) * cols)
        throw ShapeError("grid: values length != rows*cols");
    if (!(cell_size_km > 0.0)) throw ConfigError("grid: cell_size_km must be positive");
    for (double v : values)
        if (!std::isnan(v) && v < 0.0) throw ShapeError("grid: negative precipitation value");
}

namespace {

PrecipGrid coarsen_meta(const PrecipGrid& g, int factor) {
    if (factor < 1) throw std::invalid_argument("coarsen: factor must be >= 1");
    if (g.rows % factor != 0 || g.cols % factor != 0)
        throw ShapeError("coarsen: grid " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                         " not divisible by factor " + std::to_string(factor) + "; pad by " +
                         std::to_string((factor - g.rows % factor) % factor) + "x" +
                         std::to_string((factor - g.cols % factor) % factor));
    PrecipGrid out = PrecipGrid::make(g.rows / factor, g.cols / factor, g.cell_size_km * factor);
    out.origin_lat = g.origin_lat;
    out.origin_lon = g.origin_lon;
    out.timestamp = g.timestamp;
    return out;
}

PrecipGrid upsample_meta(const PrecipGrid& g, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
    PrecipGrid out = PrecipGrid::make(g.rows * factor, g.cols * factor, g.cell_size_km / factor);
    out.origin_lat = g.origin_lat;
    out.origin_lon = g.origin_lon;
    out.timestamp = g.timestamp;
    return out;
}

}  // namespace

PrecipGrid max_coarsen(const PrecipGrid& grid, int factor) {
    PrecipGrid out = coarsen_meta(grid, factor);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) {
            double best = std::numeric_limits<double>::quiet_NaN();
            bool any = false;
            for (int i = 0; i < factor; ++i)
                for (int j = 0; j < factor; ++j) {
                    double v = grid.at(r * factor + i, c * factor + j);
                    if (std::isnan(v)) continue;
                    if (!any || v > best) best = v;
                    any = true;
                }
            out.at(r, c) = best;
        }
    return out;
}

PrecipGrid mean_coarsen(const PrecipGrid& grid, int factor) {
    PrecipGrid out = coarsen_meta(grid, factor);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) {
            double acc = 0.0;
            int n = 0;
            for (int i = 0; i < factor; ++i)
                for (int j = 0; j < factor; ++j) {
                    double v = grid.at(r * factor + i, c * factor + j);
                    if (std::isnan(v)) continue;
                    acc += v;
                    ++n;
                }
            out.at(r, c) = n ? acc / n : std::numeric_limits<double>::quiet_NaN();
        }
    return out;
}

namespace {

// sample source coordinate for output index i: cell-center alignment
inline double src_coord(int i, int factor) {
    return (i + 0.5) / factor - 0.5;
}

// NaN-aware weighted blend; renormalizes over non-missing contributors.
double blend(const double* vals, const double* weights, int n) {
    double acc = 0.0, wsum = 0.0;
    for (int i = 0; i < n; ++i) {
        if (std::isnan(vals[i])) continue;
        acc += weights[i] * vals[i];
        wsum += weights[i];
    }
    if (wsum == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return acc / wsum;
}

}  // namespace

PrecipGrid linear_upsample(const PrecipGrid& grid, int factor) {
    PrecipGrid out = upsample_meta(grid, factor);
    for (int r = 0; r < out.rows; ++r) {
        double y = src_coord(r, factor);
        int y0 = static_cast<int>(std::floor(y));
        double fy = y - y0;
        int ya = std::clamp(y0, 0, grid.rows - 1);
        int yb = std::clamp(y0 + 1, 0, grid.rows - 1);
        for (int c = 0; c < out.cols; ++c) {
            double x = src_coord(c, factor);
            int x0 = static_cast<int>(std::floor(x));
            double fx = x - x0;
            int xa = std::clamp(x0, 0, grid.cols - 1);
            int xb = std::clamp(x0 + 1, 0, grid.cols - 1);
            double vals[4] = {grid.at(ya, xa), grid.at(ya, xb), grid.at(yb, xa), grid.at(yb, xb)};
            double w[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            double v = blend(vals, w, 4);
            out.at(r, c) = std::isnan(v) ? v : std::max(v, 0.0);
        }
    }
    return out;
}

namespace {

// Catmull-Rom weights for fractional offset t over taps at -1,0,1,2
inline void catmull_rom(double t, double w[4]) {
    double t2 = t * t, t3 = t2 * t;
    w[0] = 0.5 * (-t3 + 2 * t2 - t);
    w[1] = 0.5 * (3 * t3 - 5 * t2 + 2);
    w[2] = 0.5 * (-3 * t3 + 4 * t2 + t);
    w[3] = 0.5 * (t3 - t2);
}

}  // namespace

PrecipGrid bicubic_upsample(const PrecipGrid& grid, int factor) {
    PrecipGrid out = upsample_meta(grid, factor);
    for (int r = 0; r < out.rows; ++r) {
        double y = src_coord(r, factor);
        int y0 = static_cast<int>(std::floor(y));
        double wy[4];
        catmull_rom(y - y0, wy);
        for (int c = 0; c < out.cols; ++c) {
            double x = src_coord(c, factor);
            int x0 = static_cast<int>(std::floor(x));
            double wx[4];
            catmull_rom(x - x0, wx);
            double vals[16];
            double w[16];
            int n = 0;
            for (int i = 0; i < 4; ++i) {
                int yy = std::clamp(y0 - 1 + i, 0, grid.rows - 1);
                for (int j = 0; j < 4; ++j) {
                    int xx = std::clamp(x0 - 1 + j, 0, grid.cols - 1);
                    vals[n] = grid.at(yy, xx);
                    w[n] = wy[i] * wx[j];
                    ++n;
                }
            }
            double v = blend(vals, w, 16);
            out.at(r, c) = std::isnan(v) ? v : std::max(v, 0.0);
        }
    }
    return out;
}

namespace {

std::vector<int> tile_offsets(int extent, int size, int stride) {
    std::vector<int> offs;
    for (int o = 0; o + size < extent; o += stride) offs.push_back(o);
    int last = extent - size;
    if (offs.empty() || offs.back() != last) offs.push_back(last);
    return offs;
}

}  // namespace

std::vector<Patch> extract_patches(const PrecipGrid& grid, int size, int stride) {
    if (size < 1 || size > std::min(grid.rows, grid.cols))
        throw std::invalid_argument("extract_patches: size " + std::to_string(size) +
                                    " exceeds grid " + std::to_string(grid.rows) + "x" +
                                    std::to_string(grid.cols));
    if (stride < 1) throw std::invalid_argument("extract_patches: stride must be >= 1");
    auto row_offs = tile_offsets(grid.rows, size, stride);
    auto col_offs = tile_offsets(grid.cols, size, stride);
    std::vector<Patch> patches;
    patches.reserve(row_offs.size() * col_offs.size());
    for (int ro : row_offs)
        for (int co : col_offs) {
            Patch p;
            p.row_off = ro;
            p.col_off = co;
            p.grid = PrecipGrid::make(size, size, grid.cell_size_km);
            p.grid.origin_lat = grid.origin_lat;
            p.grid.origin_lon = grid.origin_lon;
            p.grid.timestamp = grid.timestamp;
            for (int r = 0; r < size; ++r)
                for (int c = 0; c < size; ++c) p.grid.at(r, c) = grid.at(ro + r, co + c);
            patches.push_back(std::move(p));
        }
    return patches;
}

PrecipGrid stitch_patches(const std::vector<Patch>& patches, int rows, int cols) {
    PrecipGrid out = PrecipGrid::make(rows, cols);
    std::vector<int> count(static_cast<std::size_t>(rows) * cols, 0);
    if (!patches.empty()) {
        out.cell_size_km = patches[0].grid.cell_size_km;
        out.origin_lat = patches[0].grid.origin_lat;
        out.origin_lon = patches[0].grid.origin_lon;
        out.timestamp = patches[0].grid.timestamp;
    }
    for (const auto& p : patches) {
        for (int r = 0; r < p.grid.rows; ++r)
            for (int c = 0; c < p.grid.cols; ++c) {
                int rr = p.row_off + r, cc = p.col_off + c;
                if (rr < 0 || rr >= rows || cc < 0 || cc >= cols)
                    throw CoverageError("stitch: patch cell outside target grid");
                out.at(rr, cc) += p.grid.at(r, c);
                ++count[static_cast<std::size_t>(rr) * cols + cc];
            }
    }
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            int n = count[static_cast<std::size_t>(r) * cols + c];
            if (n == 0)
                throw CoverageError("stitch: uncovered cell (" + std::to_string(r) + "," +
                                    std::to_string(c) + ")");
            out.at(r, c) /= n;
        }
    return out;
}

double rain_fraction(const PrecipGrid& grid) {
    std::size_t valid = 0, rainy = 0;
    for (double v : grid.values) {
        if (std::isnan(v)) continue;
        ++valid;
        if (v > 0.0) ++rainy;
    }
    if (valid == 0) throw EmptyComparisonError("rain_fraction: all cells missing");
    return static_cast<double>(rainy) / static_cast<double>(valid);
}

// ---- PGRID format ----
// "PGRID1\0" | u16 version | u32 rows | u32 cols | f64 cell_size_km |
// f64 origin_lat | f64 origin_lon | i64 timestamp | f32 values | u64 CRC-64

namespace {

constexpr char kGridMagic[7] = {'P', 'G', 'R', 'I', 'D', '1', '\0'};

template <typename T>
void put(std::string& buf, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf.append(b, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& off) {
    if (off + sizeof(T) > buf.size()) throw TruncationError("PGRID truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void write_pgrid(const PrecipGrid& grid, const std::string& path) {
    std::string buf(kGridMagic, sizeof(kGridMagic));
    put<std::uint16_t>(buf, 1);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(grid.rows));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(grid.cols));
    put<double>(buf, grid.cell_size_km);
    put<double>(buf, grid.origin_lat);
    put<double>(buf, grid.origin_lon);
    put<std::int64_t>(buf, grid.timestamp);
    for (double v : grid.values) put<float>(buf, static_cast<float>(v));
    put<std::uint64_t>(buf, crc64(buf.data(), buf.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

PrecipGrid read_pgrid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kGridMagic)) throw TruncationError("PGRID file too short");
    if (std::memcmp(buf.data(), kGridMagic, sizeof(kGridMagic)) != 0)
        throw BadMagicError("not a PGRID1 file");

    std::size_t off = sizeof(kGridMagic);
    auto version = take<std::uint16_t>(buf, off);
    if (version != 1) throw ParseError("unsupported PGRID version " + std::to_string(version));
    PrecipGrid g;
    g.rows = static_cast<int>(take<std::uint32_t>(buf, off));
    g.cols = static_cast<int>(take<std::uint32_t>(buf, off));
    g.cell_size_km = take<double>(buf, off);
    g.origin_lat = take<double>(buf, off);
    g.origin_lon = take<double>(buf, off);
    g.timestamp = take<std::int64_t>(buf, off);
    std::size_t n = static_cast<std::size_t>(g.rows) * static_cast<std::size_t>(g.cols);
    if (off + n * 4 + 8 != buf.size()) throw TruncationError("PGRID payload size mismatch");

    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (crc64(buf.data(), buf.size() - 8) != stored) throw ChecksumError("PGRID CRC mismatch");
    g.values.resize(n);
    for (auto& v : g.values) v = static_cast<double>(take<float>(buf, off));
    return g;
}

void write_grid_csv(const PrecipGrid& grid, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "row,col,value\n";
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            double v = grid.at(r, c);
            out << r << ',' << c << ',';
            if (std::isnan(v))
                out << "nan";
            else
                out << v;
            out << '\n';
        }
}

}  // namespace precipdiff
