#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "precipdiff/errors.hpp"

namespace precipdiff {

// Georeferenced precipitation field, mm/h, row-major, NaN = missing.
struct PrecipGrid {
    int rows = 0;
    int cols = 0;
    double cell_size_km = 1.0;
    double origin_lat = 0.0;
    double origin_lon = 0.0;
    std::int64_t timestamp = 0;
    std::vector<double> values;

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }

    static PrecipGrid make(int rows, int cols, double cell_size_km = 1.0);
    void validate() const;
};

// Block-max coarsening; preserves peak intensity. NaN cells are ignored
// unless a whole block is missing.
PrecipGrid max_coarsen(const PrecipGrid& grid, int factor);
PrecipGrid mean_coarsen(const PrecipGrid& grid, int factor);

// Bilinear upsampling, cell-center aligned, edge replication, clamped >= 0.
PrecipGrid linear_upsample(const PrecipGrid& grid, int factor);
// Catmull-Rom bicubic, same alignment and clamping.
PrecipGrid bicubic_upsample(const PrecipGrid& grid, int factor);

struct Patch {
    PrecipGrid grid;
    int row_off = 0;
    int col_off = 0;
};

// Raster-order tiling; trailing patches shift inward so coverage is complete.
std::vector<Patch> extract_patches(const PrecipGrid& grid, int size, int stride);
// Inverse of extract_patches; overlaps averaged uniformly.
PrecipGrid stitch_patches(const std::vector<Patch>& patches, int rows, int cols);

// Fraction of non-missing cells with value > 0.
double rain_fraction(const PrecipGrid& grid);

// PGRID binary format (f32 payload, CRC-64 trailer).
void write_pgrid(const PrecipGrid& grid, const std::string& path);
PrecipGrid read_pgrid(const std::string& path);

// CSV export: header then row,col,value lines (NaN written as "nan").
void write_grid_csv(const PrecipGrid& grid, const std::string& path);

}  // namespace precipdiff
