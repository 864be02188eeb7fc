#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fusionkit/augment.hpp"
#include "fusionkit/geometry.hpp"
#include "fusionkit/random.hpp"

namespace fusionkit::align {

using geometry::Vec3;

// Weights of the cross-attention fusion block: q/k/v embeddings, the MLP on
// the attended camera vector, and the squeeze layer mapping concat(lidar,
// mlp_out) back to the lidar width.
struct AlignParams {
    Eigen::MatrixXd w_q;  // d_attn x d_lidar
    Eigen::VectorXd b_q;
    Eigen::MatrixXd w_k;  // d_attn x d_camera
    Eigen::VectorXd b_k;
    Eigen::MatrixXd w_v;  // d_attn x d_camera
    Eigen::VectorXd b_v;
    Eigen::MatrixXd w_mlp;  // d_mlp x d_attn
    Eigen::VectorXd b_mlp;
    Eigen::MatrixXd w_squeeze;  // d_lidar x (d_lidar + d_mlp)
    Eigen::VectorXd b_squeeze;

    double dropout_rate = 0.3;
    // Multiply affinities by 1 / sqrt(d_attn). Off by default: the affinity is
    // a plain inner product.
    bool scale_affinity = false;
    // Mask affinities with -inf before the softmax instead of scaling the
    // normalized row afterwards.
    bool dropout_pre_softmax = false;

    int d_lidar() const { return static_cast<int>(w_q.cols()); }
    int d_camera() const { return static_cast<int>(w_k.cols()); }
    int d_attn() const { return static_cast<int>(w_q.rows()); }
    int d_mlp() const { return static_cast<int>(w_mlp.rows()); }

    void validate() const;

    // Glorot-uniform weights, zero biases, deterministic in the seed.
    static AlignParams random(int d_lidar, int d_camera, int d_attn, int d_mlp, uint64_t seed);
    // Full-size block: 256 attention filters, 192 MLP filters, 30% dropout.
    static AlignParams standard(int d_lidar, int d_camera, uint64_t seed);
};

// The N camera features matched to one voxel, with their source pixels.
struct CameraFeatureSet {
    Eigen::MatrixXd features;             // N x d_camera
    std::vector<geometry::Pixel> pixels;  // size N

    int size() const { return static_cast<int>(features.rows()); }
};

// Inverted-dropout mask over one attention row.
struct DropoutMask {
    std::vector<uint8_t> keep;  // length N
    double scale = 1.0;         // 1 / (1 - rate)

    static DropoutMask sample(int n, double rate, Rng& rng);
};

// Map pillar member key points (augmented frame) back through the record,
// project with the original calibration, and sample the camera feature map.
// Feature-map cells hit more than once are kept once (first member wins);
// when more than max_n features survive, a uniform subsample is drawn with a
// seed derived from pillar_index so reruns pick the same subset.
CameraFeatureSet gather_camera_features(std::span<const Vec3> members, const augment::AugRecord& record,
                                        const geometry::CameraModel& cam,
                                        const geometry::FeatureMap& fm, int max_n,
                                        int64_t pillar_index = 0);

// Forward pass with the intermediates the property checks and the attention
// dumps need.
struct AlignTrace {
    Eigen::VectorXd output;           // d_lidar
    Eigen::VectorXd weights;          // N, softmax row before any dropout
    Eigen::VectorXd applied_weights;  // N, the weights that multiplied the values
    Eigen::MatrixXd values;           // N x d_attn
    Eigen::VectorXd attended;         // d_attn
};

AlignTrace learnable_align_trace(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                 const AlignParams& params,
                                 const std::optional<DropoutMask>& mask = std::nullopt);

// q = W_q l + b_q; affinities a_i = q . k_i (optionally / sqrt(d_attn));
// w = softmax(a); o = sum w_i v_i; out = W_s [l; W_mlp o + b_mlp] + b_s.
// With no visible camera features the mlp branch is zero and the squeeze
// still runs.
Eigen::VectorXd learnable_align(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                const AlignParams& params,
                                const std::optional<DropoutMask>& mask = std::nullopt);

// The naive baseline: uniform 1/N weights, identical downstream path.
Eigen::VectorXd mean_pool_align(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                const AlignParams& params);

// Gradients of loss = sum(learnable_align(...)) on the deterministic
// (mask-free) path, for every parameter tensor and both inputs.
struct AlignGradients {
    Eigen::MatrixXd w_q, w_k, w_v, w_mlp, w_squeeze;
    Eigen::VectorXd b_q, b_k, b_v, b_mlp, b_squeeze;
    Eigen::VectorXd lidar_feature;
    Eigen::MatrixXd camera_features;  // N x d_camera
};

AlignGradients align_backward(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                              const AlignParams& params);

// Central finite differences against the hand-derived backward pass. Returns
// max over every scalar of |g_analytic - g_fd| / max(1, |g_fd|).
double align_grad_check(const AlignParams& params, const Eigen::VectorXd& lidar_feature,
                        const CameraFeatureSet& cams, double eps);

// --- serialization ----------------------------------------------------------

std::string align_params_to_json_text(const AlignParams& params);
AlignParams align_params_from_json_text(const std::string& text);

}  // namespace fusionkit::align
