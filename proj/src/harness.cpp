#include "fusionkit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fusionkit/align.hpp"
#include "fusionkit/log.hpp"
#include "fusionkit/random.hpp"

namespace fusionkit::harness {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

constexpr double kPi = 3.14159265358979323846;

Vec3 normalized(const Vec3& v) {
    const double n = v.norm();
    if (n <= 0.0) fail("cannot normalize a zero vector");
    return v * (1.0 / n);
}

}  // namespace

void SceneSpec::validate() const {
    if (num_points < 0) fail("scene spec: num_points must be >= 0");
    if (!(extent_max.x > extent_min.x) || !(extent_max.y > extent_min.y) ||
        !(extent_max.z > extent_min.z))
        fail("scene spec: extent must be positive along every axis");
    if (!(fx > 0.0) || !(fy > 0.0)) fail("scene spec: focal lengths must be positive");
    if (image_width <= 0 || image_height <= 0) fail("scene spec: image dimensions must be positive");
    if (fm_width <= 0 || fm_height <= 0 || fm_channels <= 0)
        fail("scene spec: feature map dimensions must be positive");
    if (generator == FeatureGenerator::coordinate_encoded && fm_channels < 2)
        fail("scene spec: coordinate-encoded maps need at least 2 channels");
    const double sx = static_cast<double>(image_width) / fm_width;
    const double sy = static_cast<double>(image_height) / fm_height;
    if (std::abs(sx - sy) > 1e-9)
        fail("scene spec: feature map aspect must match the camera frame");
}

geometry::CameraModel look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy,
                                     double cx, double cy, int width, int height) {
    const Vec3 gaze = target - position;
    if (gaze.norm() <= 0.0) fail("degenerate camera: look-at equals position");
    const Vec3 forward = normalized(gaze);

    Vec3 up_ref{0.0, 0.0, 1.0};
    if (forward.cross(up_ref).norm() < 1e-9) up_ref = {0.0, 1.0, 0.0};
    const Vec3 right = normalized(forward.cross(up_ref));
    const Vec3 down = forward.cross(right);

    geometry::CameraModel cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = cx;
    cam.cy = cy;
    cam.width = width;
    cam.height = height;
    for (int c = 0; c < 3; ++c) {
        cam.rotation(0, c) = c == 0 ? right.x : (c == 1 ? right.y : right.z);
        cam.rotation(1, c) = c == 0 ? down.x : (c == 1 ? down.y : down.z);
        cam.rotation(2, c) = c == 0 ? forward.x : (c == 1 ? forward.y : forward.z);
    }
    cam.translation = -cam.rotation.apply(position);
    cam.validate();
    return cam;
}

fusion::Scene generate_scene(const SceneSpec& spec) {
    spec.validate();

    fusion::Scene scene;
    scene.camera = look_at_camera(spec.camera_position, spec.camera_look_at, spec.fx, spec.fy,
                                  spec.cx, spec.cy, spec.image_width, spec.image_height);

    Rng point_rng(Rng::derive(spec.seed, 1));
    scene.cloud.frame_id = 0;
    scene.cloud.points.reserve(static_cast<size_t>(spec.num_points));
    for (int i = 0; i < spec.num_points; ++i) {
        geometry::LidarPoint p;
        p.position = {point_rng.uniform(spec.extent_min.x, spec.extent_max.x),
                      point_rng.uniform(spec.extent_min.y, spec.extent_max.y),
                      point_rng.uniform(spec.extent_min.z, spec.extent_max.z)};
        p.intensity = point_rng.uniform01();
        scene.cloud.points.push_back(p);
    }

    const double scale = static_cast<double>(spec.image_width) / spec.fm_width;
    scene.features = geometry::FeatureMap::zeros(spec.fm_width, spec.fm_height, spec.fm_channels,
                                                 scale);
    Rng fm_rng(Rng::derive(spec.seed, 2));
    for (int iy = 0; iy < spec.fm_height; ++iy) {
        for (int ix = 0; ix < spec.fm_width; ++ix) {
            auto cell = scene.features.cell(ix, iy);
            switch (spec.generator) {
                case FeatureGenerator::constant:
                    for (auto& f : cell) f = static_cast<float>(spec.constant_value);
                    break;
                case FeatureGenerator::coordinate_encoded:
                    cell[0] = static_cast<float>((ix + 0.5) * scale);
                    cell[1] = static_cast<float>((iy + 0.5) * scale);
                    break;
                case FeatureGenerator::seeded_random:
                    for (auto& f : cell) f = static_cast<float>(fm_rng.uniform01());
                    break;
            }
        }
    }

    std::vector<fusion::Correspondence> table;
    for (size_t i = 0; i < scene.cloud.size(); ++i) {
        const auto px = geometry::project_to_image(scene.cloud.points[i].position, scene.camera);
        if (px) table.push_back({static_cast<int32_t>(i), px->u, px->v});
    }
    scene.correspondences = std::move(table);
    scene.validate();
    log::debug("generated scene: %zu points, %zu visible", scene.cloud.size(),
               scene.correspondences->size());
    return scene;
}

namespace {

double nearest_rank(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const size_t rank = static_cast<size_t>(std::ceil(q * static_cast<double>(sorted.size())));
    return sorted[std::min(sorted.size() - 1, rank == 0 ? 0 : rank - 1)];
}

}  // namespace

AlignmentRow alignment_error(const fusion::Scene& scene, const augment::AugConfig& cfg,
                             bool use_inverse_aug, int trials, uint64_t seed,
                             const std::string& family, double setting) {
    if (!scene.correspondences) fail("alignment_error: scene has no correspondence table");
    if (trials < 1) fail("alignment_error: trials must be >= 1");
    cfg.validate();

    std::map<int32_t, geometry::Pixel> truth;
    for (const auto& c : *scene.correspondences) truth[c.point_index] = {c.u, c.v};

    std::vector<double> errors;
    size_t considered = 0;
    size_t lost = 0;
    const augment::AugRecord identity;

    for (int trial = 0; trial < trials; ++trial) {
        const auto res = augment::apply_pipeline(scene.cloud, cfg, seed + static_cast<uint64_t>(trial));
        const augment::AugRecord& record = use_inverse_aug ? res.record : identity;
        for (size_t j = 0; j < res.cloud.size(); ++j) {
            const auto it = truth.find(res.source_indices[j]);
            if (it == truth.end()) continue;
            ++considered;
            const Vec3 recovered = augment::inverse_aug(res.cloud.points[j].position, record);
            const auto px = geometry::project_to_image(recovered, scene.camera);
            if (!px) {
                ++lost;
                continue;
            }
            errors.push_back(std::hypot(px->u - it->second.u, px->v - it->second.v));
        }
    }

    AlignmentRow row;
    row.family = family;
    row.setting = setting;
    row.use_inverse_aug = use_inverse_aug;
    row.trials = trials;
    row.lost_fraction = considered > 0 ? static_cast<double>(lost) / considered : 0.0;
    if (!errors.empty()) {
        double sum = 0.0;
        for (double e : errors) sum += e;
        row.mean_px = sum / static_cast<double>(errors.size());
        std::sort(errors.begin(), errors.end());
        row.median_px = nearest_rank(errors, 0.5);
        row.p95_px = nearest_rank(errors, 0.95);
    }
    return row;
}

AlignmentReport rotation_experiment(const fusion::Scene& scene, const std::vector<double>& degrees,
                                    bool use_inverse_aug, int trials, uint64_t seed) {
    AlignmentReport report;
    for (double deg : degrees) {
        augment::AugConfig cfg = augment::AugConfig::disabled();
        cfg.rotation_enabled = true;
        cfg.max_rotation = deg * kPi / 180.0;
        report.rows.push_back(
            alignment_error(scene, cfg, use_inverse_aug, trials, seed, "rotation", deg));
    }
    return report;
}

AlignmentReport flip_experiment(const fusion::Scene& scene,
                                const std::vector<double>& probabilities, bool use_inverse_aug,
                                int trials, uint64_t seed) {
    AlignmentReport report;
    for (double p : probabilities) {
        augment::AugConfig cfg = augment::AugConfig::disabled();
        cfg.flip_enabled = true;
        cfg.flip_probability = p;
        report.rows.push_back(alignment_error(scene, cfg, use_inverse_aug, trials, seed, "flip", p));
    }
    return report;
}

std::vector<double> grad_check_experiment(int d_lidar, int d_camera, int n_features, int d_attn,
                                          int d_mlp, int seeds, uint64_t base_seed, double eps) {
    if (d_lidar < 1 || d_camera < 1 || n_features < 0) fail("grad check: bad dimensions");
    if (seeds < 1) fail("grad check: seeds must be >= 1");

    std::vector<double> errors;
    errors.reserve(static_cast<size_t>(seeds));
    for (int s = 0; s < seeds; ++s) {
        const uint64_t seed = base_seed + static_cast<uint64_t>(s);
        const auto params = align::AlignParams::random(d_lidar, d_camera, d_attn, d_mlp, seed);
        Rng rng(Rng::derive(seed, 3));
        Eigen::VectorXd lidar(d_lidar);
        for (int i = 0; i < d_lidar; ++i) lidar[i] = rng.uniform(-1.0, 1.0);
        align::CameraFeatureSet cams;
        cams.features.resize(n_features, d_camera);
        for (int i = 0; i < n_features; ++i)
            for (int c = 0; c < d_camera; ++c) cams.features(i, c) = rng.uniform(-1.0, 1.0);
        cams.pixels.assign(static_cast<size_t>(n_features), geometry::Pixel{});
        errors.push_back(align::align_grad_check(params, lidar, cams, eps));
    }
    return errors;
}

// --- serialization ----------------------------------------------------------

std::string report_to_csv(const AlignmentReport& report) {
    std::string buf = "family,setting,use_inverse_aug,mean_px,median_px,p95_px,lost_fraction,trials\n";
    char line[256];
    for (const auto& r : report.rows) {
        std::snprintf(line, sizeof(line), "%s,%.17g,%d,%.17g,%.17g,%.17g,%.17g,%d\n",
                      r.family.c_str(), r.setting, r.use_inverse_aug ? 1 : 0, r.mean_px,
                      r.median_px, r.p95_px, r.lost_fraction, r.trials);
        buf += line;
    }
    return buf;
}

void save_report_csv(const AlignmentReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out << report_to_csv(report);
}

std::string spec_to_json_text(const SceneSpec& spec) {
    json j;
    j["num_points"] = spec.num_points;
    j["extent"] = {{"min", {spec.extent_min.x, spec.extent_min.y, spec.extent_min.z}},
                   {"max", {spec.extent_max.x, spec.extent_max.y, spec.extent_max.z}}};
    j["camera"] = {{"position", {spec.camera_position.x, spec.camera_position.y, spec.camera_position.z}},
                   {"look_at", {spec.camera_look_at.x, spec.camera_look_at.y, spec.camera_look_at.z}},
                   {"fx", spec.fx},
                   {"fy", spec.fy},
                   {"cx", spec.cx},
                   {"cy", spec.cy},
                   {"width", spec.image_width},
                   {"height", spec.image_height}};
    const char* gen = spec.generator == FeatureGenerator::constant
                          ? "constant"
                          : (spec.generator == FeatureGenerator::coordinate_encoded
                                 ? "coordinate-encoded"
                                 : "seeded-random");
    j["feature_map"] = {{"width", spec.fm_width},
                        {"height", spec.fm_height},
                        {"channels", spec.fm_channels},
                        {"generator", gen},
                        {"constant_value", spec.constant_value}};
    j["seed"] = spec.seed;
    return j.dump(2) + "\n";
}

SceneSpec spec_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    SceneSpec spec;
    spec.num_points = j.value("num_points", spec.num_points);
    if (j.contains("extent")) {
        const auto lo = j.at("extent").at("min").get<std::vector<double>>();
        const auto hi = j.at("extent").at("max").get<std::vector<double>>();
        if (lo.size() != 3 || hi.size() != 3) fail("scene spec json: extent needs 3 numbers per bound");
        spec.extent_min = {lo[0], lo[1], lo[2]};
        spec.extent_max = {hi[0], hi[1], hi[2]};
    }
    if (j.contains("camera")) {
        const json& c = j.at("camera");
        if (c.contains("position")) {
            const auto p = c.at("position").get<std::vector<double>>();
            if (p.size() != 3) fail("scene spec json: camera position needs 3 numbers");
            spec.camera_position = {p[0], p[1], p[2]};
        }
        if (c.contains("look_at")) {
            const auto p = c.at("look_at").get<std::vector<double>>();
            if (p.size() != 3) fail("scene spec json: camera look_at needs 3 numbers");
            spec.camera_look_at = {p[0], p[1], p[2]};
        }
        spec.fx = c.value("fx", spec.fx);
        spec.fy = c.value("fy", spec.fy);
        spec.cx = c.value("cx", spec.cx);
        spec.cy = c.value("cy", spec.cy);
        spec.image_width = c.value("width", spec.image_width);
        spec.image_height = c.value("height", spec.image_height);
    }
    if (j.contains("feature_map")) {
        const json& f = j.at("feature_map");
        spec.fm_width = f.value("width", spec.fm_width);
        spec.fm_height = f.value("height", spec.fm_height);
        spec.fm_channels = f.value("channels", spec.fm_channels);
        if (f.contains("generator")) {
            const std::string gen = f.at("generator").get<std::string>();
            if (gen == "constant")
                spec.generator = FeatureGenerator::constant;
            else if (gen == "coordinate-encoded")
                spec.generator = FeatureGenerator::coordinate_encoded;
            else if (gen == "seeded-random")
                spec.generator = FeatureGenerator::seeded_random;
            else
                fail("scene spec json: unknown generator '" + gen + "'");
        }
        spec.constant_value = f.value("constant_value", spec.constant_value);
    }
    spec.seed = j.value("seed", spec.seed);
    spec.validate();
    return spec;
}

SceneSpec load_scene_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return spec_from_json_text(ss.str());
}

}  // namespace fusionkit::harness
