#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fusionkit/align.hpp"
#include "fusionkit/augment.hpp"
#include "fusionkit/geometry.hpp"
#include "fusionkit/random.hpp"
#include "fusionkit/voxel.hpp"

namespace fusionkit::fusion {

enum class Strategy { single_modal, input_fusion, late_fusion, deep_fusion };
enum class AlignKind { learned, mean };
// Key points handed to the camera-feature gather: the pillar's member points,
// or a single pillar center (z = mean member height).
enum class GatherSource { points, pillar_center };
enum class NoiseKind { multiplicative, additive };

struct Correspondence {
    int32_t point_index = 0;
    double u = 0.0, v = 0.0;
};

// One lidar+camera frame: the raw cloud, the calibration, a camera feature
// map, and (for synthetic data) the exact point -> pixel table.
struct Scene {
    geometry::PointCloud cloud;
    geometry::CameraModel camera;
    geometry::FeatureMap features;
    std::optional<std::vector<Correspondence>> correspondences;

    void validate() const;
};

// Deferred random initialization. Materialized against the scene so widths
// that depend on the camera feature channels resolve at run time.
struct EncoderInit {
    uint64_t seed = 0;
    std::vector<int> hidden{256, 256};
    int out = 64;
    voxel::Activation activation = voxel::Activation::silu;
    bool use_base = true;
    bool use_offsets = true;
};

struct AlignInit {
    uint64_t seed = 0;
    int d_attn = 256;
    int d_mlp = 192;
    double dropout_rate = 0.3;
    bool scale_affinity = false;
    bool dropout_pre_softmax = false;
};

struct FusionConfig {
    Strategy strategy = Strategy::deep_fusion;
    augment::AugConfig aug;
    voxel::PillarGrid grid = voxel::PillarGrid::from_bounds(-20.0, 20.0, -20.0, 20.0, 16, 16);

    // Each branch takes explicit weights or an init descriptor; exactly one
    // must be present where the strategy needs the branch.
    std::optional<voxel::EncoderParams> lidar_encoder;
    std::optional<EncoderInit> lidar_encoder_init = EncoderInit{};
    std::optional<voxel::EncoderParams> camera_encoder;  // late-fusion camera branch
    std::optional<EncoderInit> camera_encoder_init;
    std::optional<align::AlignParams> align_params;  // deep-fusion attention block
    std::optional<AlignInit> align_init;

    bool use_inverse_aug = true;
    AlignKind align_kind = AlignKind::learned;
    GatherSource gather_source = GatherSource::points;
    int max_camera_features = 32;
    uint64_t seed = 0;

    void validate() const;
};

struct PipelineOutput {
    voxel::PseudoImage image;
    augment::AugRecord record;
    size_t points_in = 0;
    size_t points_after_aug = 0;
    size_t nonempty_pillars = 0;
};

struct AttentionRow {
    int32_t pillar_index = 0;
    double u = 0.0, v = 0.0;
    double weight = 0.0;
};

// Augment -> voxelize -> encode, lidar only.
PipelineOutput single_modal(const Scene& scene, const FusionConfig& cfg);

// Decorate every raw point with its camera feature (original calibration,
// one-to-one), then run the lidar pipeline on the decorated points. Points
// with no visible pixel carry zero camera features.
PipelineOutput input_fusion(const Scene& scene, const FusionConfig& cfg);

// Lidar and camera features voxelized through separate encoders on the same
// grid, concatenated per pillar.
PipelineOutput late_fusion(const Scene& scene, const FusionConfig& cfg);

// Fuse camera features into the encoded pillar features through the
// cross-attention block. With use_inverse_aug off the gather runs with an
// identity record even though augmentation was applied (the misalignment
// ablation).
PipelineOutput deep_fusion(const Scene& scene, const FusionConfig& cfg,
                           std::vector<AttentionRow>* attention = nullptr);

PipelineOutput run_strategy(const Scene& scene, const FusionConfig& cfg,
                            std::vector<AttentionRow>* attention = nullptr);

// Intensity perturbation: i <- i * (1 + u), u ~ U[-magnitude, magnitude],
// clamped back to [0, 1]. The additive flavor adds u directly.
geometry::PointCloud laser_noise(const geometry::PointCloud& points, double magnitude, Rng& rng,
                                 NoiseKind kind = NoiseKind::multiplicative);

// Same perturbation per cell-channel of a feature map; no clamping, feature
// values are unbounded.
geometry::FeatureMap pixel_noise(const geometry::FeatureMap& fm, double magnitude, Rng& rng,
                                 NoiseKind kind = NoiseKind::multiplicative);

// --- serialization ----------------------------------------------------------

// Scene bundle directory: points.pclf, camera.json, features.fmap, optional
// correspondences.csv (point_index,u,v).
Scene load_scene(const std::string& dir);
void save_scene(const Scene& scene, const std::string& dir);

FusionConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const FusionConfig& cfg);
FusionConfig load_config_json(const std::string& path);

// Pipeline output directory: pseudo_image.fmap, record.json, metrics.json.
void save_pipeline_output(const PipelineOutput& out, const FusionConfig& cfg,
                          const std::string& dir);

void write_attention_csv(const std::vector<AttentionRow>& rows, const std::string& path);

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

}  // namespace fusionkit::fusion
