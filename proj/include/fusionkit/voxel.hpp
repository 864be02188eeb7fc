#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fusionkit/geometry.hpp"

namespace fusionkit::voxel {

using geometry::PointCloud;

// Bird's-eye-view pillar grid. Pick bounds and counts whose cell sizes are
// exactly representable (the validate() identity nx * pillar_dx == x_max -
// x_min is checked bitwise).
struct PillarGrid {
    double x_min = 0.0, x_max = 0.0;
    double y_min = 0.0, y_max = 0.0;
    double pillar_dx = 0.0, pillar_dy = 0.0;
    int nx = 0, ny = 0;

    static PillarGrid from_bounds(double x_min, double x_max, double y_min, double y_max, int nx,
                                  int ny);
    // The default resolution: 512 x 512 pillars over [-75, 75)^2 meters.
    static PillarGrid standard();

    int num_pillars() const { return nx * ny; }
    void validate() const;
};

// Point -> pillar mapping with no per-pillar capacity: every in-range point is
// kept. Pillar index = iy * nx + ix.
struct VoxelAssignment {
    PillarGrid grid;
    std::vector<int32_t> pillar_of_point;            // -1 when out of range
    std::map<int32_t, std::vector<int32_t>> members;  // nonempty pillars only
    size_t assigned_count = 0;

    size_t unassigned_count() const { return pillar_of_point.size() - assigned_count; }
};

enum class Activation { relu, silu };

float apply_activation(Activation a, float x);

// x * sigmoid(x)
double silu(double x);

// Per-point input feature composition: [x y z intensity] when use_base, then
// extra decoration channels, then [x - cx, y - cy] offsets to the pillar
// center when use_offsets.
struct FeatureLayout {
    bool use_base = true;
    int extra_channels = 0;
    bool use_offsets = true;

    int input_dim() const { return (use_base ? 4 : 0) + extra_channels + (use_offsets ? 2 : 0); }
};

struct EncoderLayer {
    Eigen::MatrixXf weight;  // rows = out, cols = in
    Eigen::VectorXf bias;
};

// Point-wise MLP applied before max-pooling over a pillar's members. The
// activation follows every layer.
struct EncoderParams {
    std::vector<EncoderLayer> layers;
    Activation activation = Activation::silu;
    FeatureLayout layout;

    int output_dim() const { return static_cast<int>(layers.back().weight.rows()); }
    void validate() const;

    // Glorot-uniform weights, zero biases, deterministic in the seed.
    static EncoderParams random(const FeatureLayout& layout, const std::vector<int>& hidden_dims,
                                int out_dim, Activation activation, uint64_t seed);
    // The full-size recipe: 3 layers with hidden size 256 and SILU.
    static EncoderParams standard(const FeatureLayout& layout, int out_dim, uint64_t seed);
};

// Dense per-pillar feature grid; empty pillars hold zeros.
struct PseudoImage {
    int nx = 0, ny = 0;
    int channels = 0;
    std::vector<float> data;  // row-major, ny x nx x channels

    static PseudoImage zeros(int nx, int ny, int channels);

    std::span<const float> cell(int ix, int iy) const {
        return {data.data() + (static_cast<size_t>(iy) * nx + ix) * channels,
                static_cast<size_t>(channels)};
    }
    std::span<float> cell(int ix, int iy) {
        return {data.data() + (static_cast<size_t>(iy) * nx + ix) * channels,
                static_cast<size_t>(channels)};
    }

    geometry::FeatureMap to_feature_map(double scale = 1.0) const;
};

// Floor-division assignment over half-open cells; out-of-range points stay
// unassigned, nothing is truncated.
VoxelAssignment dynamic_voxelize(const PointCloud& points, const PillarGrid& grid);

// Footprint center of a pillar. Throws std::out_of_range for a bad index.
std::pair<double, double> pillar_center(int index, const PillarGrid& grid);

// Run the MLP on every assigned point and max-pool per pillar. `extras` either
// is empty or supplies layout.extra_channels decoration values per point.
PseudoImage encode_pillars(const PointCloud& points,
                           const std::vector<std::vector<float>>& extras,
                           const VoxelAssignment& assignment, const EncoderParams& params);
PseudoImage encode_pillars(const PointCloud& points, const VoxelAssignment& assignment,
                           const EncoderParams& params);

// Point-wise forward pass of the encoder MLP on one composed input vector.
Eigen::VectorXf encoder_forward(const EncoderParams& params, const Eigen::VectorXf& input);

// --- serialization ----------------------------------------------------------

// JSON with layer dims, row-major weights and the activation name.
std::string encoder_to_json_text(const EncoderParams& params);
EncoderParams encoder_from_json_text(const std::string& text);

std::string grid_to_json_text(const PillarGrid& grid);
PillarGrid grid_from_json_text(const std::string& text);

}  // namespace fusionkit::voxel
