#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fusionkit/geometry.hpp"
#include "fusionkit/random.hpp"

namespace fusionkit::augment {

using geometry::PointCloud;
using geometry::Vec3;

// Invertible scene transforms, all about the world origin.
struct RotateZ {
    double theta = 0.0;  // radians
};
struct WorldScale {
    double s = 1.0;  // > 0
};
struct Translate {
    Vec3 t;
};
struct FlipY {
    bool applied = false;  // y -> -y when true, identity otherwise
};

using GeometricOp = std::variant<RotateZ, WorldScale, Translate, FlipY>;

// Point-dropping transforms. These never enter an AugRecord: there is nothing
// to invert.
struct FrustumParams {
    double az_min = 0.0;    // azimuth interval, radians, 2*pi wraparound honored
    double az_max = 0.0;
    double incl_min = 0.0;  // inclination from +z, radians, no wraparound
    double incl_max = 0.0;
    double drop_p = 0.0;    // drop probability inside the frustum
};
struct RandomDropParams {
    double keep_p = 1.0;
};

using NonGeometricOp = std::variant<FrustumParams, RandomDropParams>;

// The saved augmentation parameters, in application order. Replaying the ops
// reproduces the augmented cloud; inverting them in reverse order recovers
// original coordinates.
struct AugRecord {
    std::vector<GeometricOp> ops;

    bool empty() const { return ops.empty(); }
};

struct AugConfig {
    bool rotation_enabled = true;
    double max_rotation = 0.7853981633974483;  // radians, theta ~ U[-max, max]

    bool scale_enabled = true;
    double scale_lo = 0.95;  // s ~ U[lo, hi]
    double scale_hi = 1.05;

    bool translate_enabled = true;
    Vec3 translate_sigma{0.2, 0.2, 0.2};  // per-axis Gaussian, meters

    bool flip_enabled = true;
    double flip_probability = 0.5;

    bool frustum_enabled = false;
    double frustum_az_width = 0.7853981633974483;   // radians
    double frustum_incl_width = 0.39269908169872414;
    double frustum_drop_p = 0.3;

    bool drop_enabled = false;
    double drop_keep_p = 0.95;

    void validate() const;

    static AugConfig disabled() {
        AugConfig cfg;
        cfg.rotation_enabled = cfg.scale_enabled = cfg.translate_enabled = cfg.flip_enabled = false;
        cfg.frustum_enabled = cfg.drop_enabled = false;
        return cfg;
    }
};

Vec3 apply_geometric_point(const Vec3& p, const GeometricOp& op);
PointCloud apply_geometric(const PointCloud& points, const GeometricOp& op);

// Exact inverse of a single op applied to a key point.
Vec3 invert_geometric(const Vec3& p, const GeometricOp& op);

// Replay a record forward over a whole cloud.
PointCloud apply_record(const PointCloud& points, const AugRecord& record);

// Map a key point from the augmented frame back to the original frame by
// inverting each recorded op in reverse order.
Vec3 inverse_aug(const Vec3& p, const AugRecord& record);

struct PipelineResult {
    PointCloud cloud;
    AugRecord record;
    // For each surviving point, its index in the input cloud. Geometric ops
    // keep all points; frustum/random dropout shrink this list.
    std::vector<int32_t> source_indices;
};

// The fixed augmentation order: RotateZ -> WorldScale -> Translate -> FlipY ->
// FrustumDropout -> RandomDropPoints. Enabled ops sample their parameters from
// the config distributions; sampled geometric parameters land in the record.
PipelineResult apply_pipeline(const PointCloud& points, const AugConfig& cfg, uint64_t seed);

// Drop points inside the frustum with probability drop_p. Azimuth is
// atan2(y, x), inclination the angle from +z; points at the origin count as
// inclination 0. Relative order preserved.
PointCloud frustum_dropout(const PointCloud& points, const FrustumParams& params, Rng& rng);

// Keep each point independently with probability keep_p, order preserved.
PointCloud random_drop_points(const PointCloud& points, double keep_p, Rng& rng);

// Multi-frame concatenation with training-time frame dropout. Frames with
// frame_id > 0 are dropped independently with probability drop_p during
// training; frame 0 survives always; inference concatenates everything.
PointCloud drop_frames(std::span<const PointCloud> frames, double drop_p, Rng& rng, bool training);

// --- serialization ----------------------------------------------------------

// AugRecord wire format: JSON array of {op, params} in application order.
std::string record_to_json_text(const AugRecord& record);
AugRecord record_from_json_text(const std::string& text);
void save_record_json(const AugRecord& record, const std::string& path);
AugRecord load_record_json(const std::string& path);

std::string config_to_json_text(const AugConfig& cfg);
AugConfig config_from_json_text(const std::string& text);

}  // namespace fusionkit::augment
