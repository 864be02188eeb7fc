#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusionkit/augment.hpp"
#include "fusionkit/fusion.hpp"
#include "fusionkit/geometry.hpp"

namespace fusionkit::harness {

using geometry::Vec3;

enum class FeatureGenerator {
    constant,
    // Channels 0,1 hold each cell's own pixel-center coordinates, so a sampled
    // feature reports where it was read from.
    coordinate_encoded,
    seeded_random,
};

struct SceneSpec {
    int num_points = 2000;
    Vec3 extent_min{8.0, -8.0, -1.0};
    Vec3 extent_max{28.0, 8.0, 3.0};

    Vec3 camera_position{0.0, 0.0, 1.5};
    Vec3 camera_look_at{18.0, 0.0, 1.0};
    double fx = 600.0, fy = 600.0;
    double cx = 640.0, cy = 480.0;
    int image_width = 1280, image_height = 960;

    int fm_width = 160, fm_height = 120, fm_channels = 4;
    FeatureGenerator generator = FeatureGenerator::coordinate_encoded;
    double constant_value = 1.0;

    uint64_t seed = 0;

    void validate() const;
};

// World-frame camera from a position and a look-at target; world +z is the
// reference up.
geometry::CameraModel look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy,
                                     double cx, double cy, int width, int height);

// Uniform points in the extent, exact ground-truth pixels for every visible
// point, feature map filled per the generator. Deterministic in the seed.
fusion::Scene generate_scene(const SceneSpec& spec);

struct AlignmentRow {
    std::string family;  // rotation | flip | custom
    double setting = 0.0;  // degrees or flip probability
    bool use_inverse_aug = true;
    double mean_px = 0.0;
    double median_px = 0.0;
    double p95_px = 0.0;
    // Points whose recovered location falls outside the frame, over all
    // trials. Lost points do not enter the error statistics.
    double lost_fraction = 0.0;
    int trials = 0;
};

struct AlignmentReport {
    std::vector<AlignmentRow> rows;
};

// Augment `trials` times, recover each surviving point's pixel through the
// record (or the identity record when use_inverse_aug is off) and compare to
// the ground-truth table. Per-trial seeds are seed + trial_index.
AlignmentRow alignment_error(const fusion::Scene& scene, const augment::AugConfig& cfg,
                             bool use_inverse_aug, int trials, uint64_t seed,
                             const std::string& family = "custom", double setting = 0.0);

// Rotation-only pipelines over the listed max rotations (degrees).
AlignmentReport rotation_experiment(const fusion::Scene& scene, const std::vector<double>& degrees,
                                    bool use_inverse_aug, int trials, uint64_t seed);

// Flip-only pipelines over the listed flip probabilities.
AlignmentReport flip_experiment(const fusion::Scene& scene,
                                const std::vector<double>& probabilities, bool use_inverse_aug,
                                int trials, uint64_t seed);

// Max relative backward-vs-finite-difference error for one random attention
// instance per seed.
std::vector<double> grad_check_experiment(int d_lidar, int d_camera, int n_features, int d_attn,
                                          int d_mlp, int seeds, uint64_t base_seed, double eps);

// --- serialization ----------------------------------------------------------

std::string report_to_csv(const AlignmentReport& report);
void save_report_csv(const AlignmentReport& report, const std::string& path);

SceneSpec spec_from_json_text(const std::string& text);
std::string spec_to_json_text(const SceneSpec& spec);
SceneSpec load_scene_spec(const std::string& path);

}  // namespace fusionkit::harness
