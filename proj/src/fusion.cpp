#include "fusionkit/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fusionkit/log.hpp"

namespace fusionkit::fusion {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

void Scene::validate() const {
    camera.validate();
    features.validate();
    for (const auto& p : cloud.points) {
        if (!p.position.finite()) fail("scene: point position not finite");
        if (!(p.intensity >= 0.0 && p.intensity <= 1.0)) fail("scene: intensity outside [0,1]");
    }
    if (correspondences) {
        for (const auto& c : *correspondences) {
            if (c.point_index < 0 || static_cast<size_t>(c.point_index) >= cloud.size())
                fail("scene: correspondence references a missing point");
            if (c.u < 0.0 || c.u >= camera.width || c.v < 0.0 || c.v >= camera.height)
                fail("scene: correspondence pixel outside the frame");
        }
    }
}

void FusionConfig::validate() const {
    aug.validate();
    grid.validate();
    if (max_camera_features < 1) fail("fusion config: max_camera_features must be >= 1");
    if (!lidar_encoder && !lidar_encoder_init) fail("fusion config: lidar encoder missing");
    if (strategy == Strategy::late_fusion && !camera_encoder && !camera_encoder_init)
        fail("fusion config: late fusion needs a camera encoder");
    if (strategy == Strategy::deep_fusion && !align_params && !align_init)
        fail("fusion config: deep fusion needs align params");
}

namespace {

voxel::EncoderParams materialize_encoder(const std::optional<voxel::EncoderParams>& given,
                                         const std::optional<EncoderInit>& init,
                                         int extra_channels, const char* what) {
    if (given) {
        if (given->layout.extra_channels != extra_channels)
            fail(std::string(what) + ": encoder input width does not match the decorated layout");
        given->validate();
        return *given;
    }
    if (!init) fail(std::string(what) + ": encoder missing");
    voxel::FeatureLayout layout;
    layout.use_base = init->use_base;
    layout.use_offsets = init->use_offsets;
    layout.extra_channels = extra_channels;
    return voxel::EncoderParams::random(layout, init->hidden, init->out, init->activation,
                                        init->seed);
}

align::AlignParams materialize_align(const FusionConfig& cfg, int d_lidar, int d_camera) {
    if (cfg.align_params) {
        cfg.align_params->validate();
        if (cfg.align_params->d_lidar() != d_lidar || cfg.align_params->d_camera() != d_camera)
            fail("fusion config: align params do not match encoder/camera widths");
        return *cfg.align_params;
    }
    if (!cfg.align_init) fail("fusion config: deep fusion needs align params");
    align::AlignParams p = align::AlignParams::random(d_lidar, d_camera, cfg.align_init->d_attn,
                                                      cfg.align_init->d_mlp, cfg.align_init->seed);
    p.dropout_rate = cfg.align_init->dropout_rate;
    p.scale_affinity = cfg.align_init->scale_affinity;
    p.dropout_pre_softmax = cfg.align_init->dropout_pre_softmax;
    return p;
}

// Per-point camera features from the original calibration: the one-to-one
// decoration. Invisible points (and pixels off the feature map) get zeros.
std::vector<std::vector<float>> decorate_points(const Scene& scene) {
    std::vector<std::vector<float>> extras(scene.cloud.size());
    const std::vector<float> zeros(static_cast<size_t>(scene.features.channels), 0.0f);
    for (size_t i = 0; i < scene.cloud.size(); ++i) {
        const auto px = geometry::project_to_image(scene.cloud.points[i].position, scene.camera);
        if (px && px->u < scene.features.pixel_width() && px->v < scene.features.pixel_height())
            extras[i] = geometry::bilinear_sample(scene.features, px->u, px->v);
        else
            extras[i] = zeros;
    }
    return extras;
}

std::vector<std::vector<float>> reorder_extras(const std::vector<std::vector<float>>& extras,
                                               const std::vector<int32_t>& source_indices) {
    std::vector<std::vector<float>> out;
    out.reserve(source_indices.size());
    for (int32_t idx : source_indices) out.push_back(extras[static_cast<size_t>(idx)]);
    return out;
}

PipelineOutput finish_output(voxel::PseudoImage image, augment::AugRecord record, size_t in,
                             size_t after, const voxel::VoxelAssignment& assignment) {
    PipelineOutput out;
    out.image = std::move(image);
    out.record = std::move(record);
    out.points_in = in;
    out.points_after_aug = after;
    out.nonempty_pillars = assignment.members.size();
    return out;
}

}  // namespace

PipelineOutput single_modal(const Scene& scene, const FusionConfig& cfg) {
    scene.validate();
    cfg.validate();
    const auto encoder = materialize_encoder(cfg.lidar_encoder, cfg.lidar_encoder_init, 0,
                                             "single_modal");
    auto aug = augment::apply_pipeline(scene.cloud, cfg.aug, cfg.seed);
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, cfg.grid);
    auto image = voxel::encode_pillars(aug.cloud, assignment, encoder);
    return finish_output(std::move(image), std::move(aug.record), scene.cloud.size(),
                         aug.cloud.size(), assignment);
}

PipelineOutput input_fusion(const Scene& scene, const FusionConfig& cfg) {
    scene.validate();
    cfg.validate();
    const auto encoder = materialize_encoder(cfg.lidar_encoder, cfg.lidar_encoder_init,
                                             scene.features.channels, "input_fusion");
    const auto extras = decorate_points(scene);
    auto aug = augment::apply_pipeline(scene.cloud, cfg.aug, cfg.seed);
    const auto aug_extras = reorder_extras(extras, aug.source_indices);
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, cfg.grid);
    auto image = voxel::encode_pillars(aug.cloud, aug_extras, assignment, encoder);
    return finish_output(std::move(image), std::move(aug.record), scene.cloud.size(),
                         aug.cloud.size(), assignment);
}

PipelineOutput late_fusion(const Scene& scene, const FusionConfig& cfg) {
    scene.validate();
    cfg.validate();
    const auto lidar_encoder =
        materialize_encoder(cfg.lidar_encoder, cfg.lidar_encoder_init, 0, "late_fusion/lidar");
    const auto camera_encoder = materialize_encoder(
        cfg.camera_encoder, cfg.camera_encoder_init, scene.features.channels, "late_fusion/camera");

    const auto extras = decorate_points(scene);
    auto aug = augment::apply_pipeline(scene.cloud, cfg.aug, cfg.seed);
    const auto aug_extras = reorder_extras(extras, aug.source_indices);
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, cfg.grid);

    const auto lidar_image = voxel::encode_pillars(aug.cloud, assignment, lidar_encoder);
    const auto camera_image = voxel::encode_pillars(aug.cloud, aug_extras, assignment, camera_encoder);
    if (lidar_image.nx != camera_image.nx || lidar_image.ny != camera_image.ny)
        fail("late_fusion: branch grids disagree");

    auto image = voxel::PseudoImage::zeros(lidar_image.nx, lidar_image.ny,
                                           lidar_image.channels + camera_image.channels);
    for (int iy = 0; iy < image.ny; ++iy) {
        for (int ix = 0; ix < image.nx; ++ix) {
            auto dst = image.cell(ix, iy);
            const auto a = lidar_image.cell(ix, iy);
            const auto b = camera_image.cell(ix, iy);
            std::copy(a.begin(), a.end(), dst.begin());
            std::copy(b.begin(), b.end(), dst.begin() + a.size());
        }
    }
    return finish_output(std::move(image), std::move(aug.record), scene.cloud.size(),
                         aug.cloud.size(), assignment);
}

PipelineOutput deep_fusion(const Scene& scene, const FusionConfig& cfg,
                           std::vector<AttentionRow>* attention) {
    scene.validate();
    cfg.validate();
    const auto encoder =
        materialize_encoder(cfg.lidar_encoder, cfg.lidar_encoder_init, 0, "deep_fusion");
    const auto params =
        materialize_align(cfg, encoder.output_dim(), scene.features.channels);

    auto aug = augment::apply_pipeline(scene.cloud, cfg.aug, cfg.seed);
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, cfg.grid);
    auto image = voxel::encode_pillars(aug.cloud, assignment, encoder);

    // The misalignment ablation: augmentation ran either way, but gathering pretends
    // nothing happened when the flag is off.
    const augment::AugRecord gather_record =
        cfg.use_inverse_aug ? aug.record : augment::AugRecord{};

    for (const auto& [pillar, member_ids] : assignment.members) {
        std::vector<geometry::Vec3> key_points;
        if (cfg.gather_source == GatherSource::points) {
            key_points.reserve(member_ids.size());
            for (int32_t id : member_ids)
                key_points.push_back(aug.cloud.points[static_cast<size_t>(id)].position);
        } else {
            const auto [cx, cy] = voxel::pillar_center(pillar, cfg.grid);
            double mean_z = 0.0;
            for (int32_t id : member_ids)
                mean_z += aug.cloud.points[static_cast<size_t>(id)].position.z;
            mean_z /= static_cast<double>(member_ids.size());
            key_points.push_back({cx, cy, mean_z});
        }

        const auto cams = align::gather_camera_features(key_points, gather_record, scene.camera,
                                                        scene.features, cfg.max_camera_features,
                                                        pillar);

        auto cell = image.cell(pillar % cfg.grid.nx, pillar / cfg.grid.nx);
        Eigen::VectorXd lidar_feature(encoder.output_dim());
        for (int c = 0; c < encoder.output_dim(); ++c) lidar_feature[c] = cell[static_cast<size_t>(c)];

        Eigen::VectorXd fused;
        Eigen::VectorXd weights;
        if (cfg.align_kind == AlignKind::learned) {
            const auto trace = align::learnable_align_trace(lidar_feature, cams, params);
            fused = trace.output;
            weights = trace.weights;
        } else {
            fused = align::mean_pool_align(lidar_feature, cams, params);
            weights = cams.size() > 0
                          ? Eigen::VectorXd::Constant(cams.size(), 1.0 / cams.size())
                          : Eigen::VectorXd(0);
        }
        for (int c = 0; c < encoder.output_dim(); ++c)
            cell[static_cast<size_t>(c)] = static_cast<float>(fused[c]);

        if (attention != nullptr)
            for (int i = 0; i < cams.size(); ++i)
                attention->push_back({pillar, cams.pixels[static_cast<size_t>(i)].u,
                                      cams.pixels[static_cast<size_t>(i)].v, weights[i]});
    }
    return finish_output(std::move(image), std::move(aug.record), scene.cloud.size(),
                         aug.cloud.size(), assignment);
}

PipelineOutput run_strategy(const Scene& scene, const FusionConfig& cfg,
                            std::vector<AttentionRow>* attention) {
    switch (cfg.strategy) {
        case Strategy::single_modal:
            return single_modal(scene, cfg);
        case Strategy::input_fusion:
            return input_fusion(scene, cfg);
        case Strategy::late_fusion:
            return late_fusion(scene, cfg);
        case Strategy::deep_fusion:
            return deep_fusion(scene, cfg, attention);
    }
    fail("run_strategy: unknown strategy");
}

geometry::PointCloud laser_noise(const geometry::PointCloud& points, double magnitude, Rng& rng,
                                 NoiseKind kind) {
    if (!(magnitude >= 0.0 && magnitude <= 1.0)) fail("laser_noise: magnitude outside [0,1]");
    geometry::PointCloud out = points;
    for (auto& p : out.points) {
        const double u = rng.uniform(-magnitude, magnitude);
        const double noisy =
            kind == NoiseKind::multiplicative ? p.intensity * (1.0 + u) : p.intensity + u;
        p.intensity = std::clamp(noisy, 0.0, 1.0);
    }
    return out;
}

geometry::FeatureMap pixel_noise(const geometry::FeatureMap& fm, double magnitude, Rng& rng,
                                 NoiseKind kind) {
    if (!(magnitude >= 0.0 && magnitude <= 1.0)) fail("pixel_noise: magnitude outside [0,1]");
    fm.validate();
    geometry::FeatureMap out = fm;
    for (auto& f : out.data) {
        const double u = rng.uniform(-magnitude, magnitude);
        const double noisy = kind == NoiseKind::multiplicative ? f * (1.0 + u) : f + u;
        f = static_cast<float>(noisy);
    }
    return out;
}

// --- serialization ----------------------------------------------------------

namespace {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out << text;
}

}  // namespace

Scene load_scene(const std::string& dir) {
    Scene scene;
    const auto clouds = geometry::load_point_clouds((fs::path(dir) / "points.pclf").string());
    if (clouds.size() != 1) fail("scene bundle: points.pclf must hold exactly one frame");
    scene.cloud = clouds.front();
    scene.camera = geometry::load_camera_json((fs::path(dir) / "camera.json").string());
    scene.features = geometry::load_feature_map((fs::path(dir) / "features.fmap").string());

    const fs::path corr = fs::path(dir) / "correspondences.csv";
    if (fs::exists(corr)) {
        std::ifstream in(corr);
        std::string line;
        if (!std::getline(in, line)) fail("scene bundle: empty correspondences.csv");
        std::vector<Correspondence> table;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            Correspondence c;
            char* end = nullptr;
            c.point_index = static_cast<int32_t>(std::strtol(line.c_str(), &end, 10));
            if (*end != ',') fail("scene bundle: malformed correspondences.csv");
            c.u = std::strtod(end + 1, &end);
            if (*end != ',') fail("scene bundle: malformed correspondences.csv");
            c.v = std::strtod(end + 1, &end);
            table.push_back(c);
        }
        scene.correspondences = std::move(table);
    }
    scene.validate();
    return scene;
}

void save_scene(const Scene& scene, const std::string& dir) {
    scene.validate();
    fs::create_directories(dir);
    geometry::save_point_clouds({&scene.cloud, 1}, (fs::path(dir) / "points.pclf").string());
    geometry::save_camera_json(scene.camera, (fs::path(dir) / "camera.json").string());
    geometry::save_feature_map(scene.features, (fs::path(dir) / "features.fmap").string());
    if (scene.correspondences) {
        std::string buf = "point_index,u,v\n";
        char line[128];
        for (const auto& c : *scene.correspondences) {
            std::snprintf(line, sizeof(line), "%d,%.17g,%.17g\n", c.point_index, c.u, c.v);
            buf += line;
        }
        write_file((fs::path(dir) / "correspondences.csv").string(), buf);
    }
}

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::single_modal: return "single";
        case Strategy::input_fusion: return "input";
        case Strategy::late_fusion: return "late";
        case Strategy::deep_fusion: return "deep";
    }
    return "unknown";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "single") return Strategy::single_modal;
    if (name == "input") return Strategy::input_fusion;
    if (name == "late") return Strategy::late_fusion;
    if (name == "deep") return Strategy::deep_fusion;
    fail("unknown strategy '" + name + "' (expected single|input|late|deep)");
}

namespace {

json encoder_init_to_json(const EncoderInit& init) {
    json j;
    j["seed"] = init.seed;
    j["hidden"] = init.hidden;
    j["out"] = init.out;
    j["activation"] = init.activation == voxel::Activation::relu ? "relu" : "silu";
    j["use_base"] = init.use_base;
    j["use_offsets"] = init.use_offsets;
    return j;
}

EncoderInit encoder_init_from_json(const json& j, bool camera_branch) {
    EncoderInit init;
    if (camera_branch) {
        init.use_base = false;
        init.use_offsets = false;
    }
    init.seed = j.value("seed", init.seed);
    if (j.contains("hidden")) init.hidden = j.at("hidden").get<std::vector<int>>();
    init.out = j.value("out", init.out);
    if (j.contains("activation")) {
        const std::string act = j.at("activation").get<std::string>();
        if (act == "relu")
            init.activation = voxel::Activation::relu;
        else if (act == "silu")
            init.activation = voxel::Activation::silu;
        else
            fail("fusion config: unknown activation '" + act + "'");
    }
    init.use_base = j.value("use_base", init.use_base);
    init.use_offsets = j.value("use_offsets", init.use_offsets);
    return init;
}

void encoder_block_to_json(json& j, const char* key,
                           const std::optional<voxel::EncoderParams>& params,
                           const std::optional<EncoderInit>& init) {
    if (params)
        j[key] = json::parse(voxel::encoder_to_json_text(*params));
    else if (init)
        j[key] = json{{"init", encoder_init_to_json(*init)}};
}

void encoder_block_from_json(const json& j, const char* key, bool camera_branch,
                             std::optional<voxel::EncoderParams>& params,
                             std::optional<EncoderInit>& init) {
    if (!j.contains(key)) return;
    const json& block = j.at(key);
    params.reset();
    init.reset();
    if (block.contains("init"))
        init = encoder_init_from_json(block.at("init"), camera_branch);
    else
        params = voxel::encoder_from_json_text(block.dump());
}

}  // namespace

std::string config_to_json_text(const FusionConfig& cfg) {
    json j;
    j["strategy"] = strategy_name(cfg.strategy);
    j["seed"] = cfg.seed;
    j["use_inverse_aug"] = cfg.use_inverse_aug;
    j["align_kind"] = cfg.align_kind == AlignKind::learned ? "learned" : "mean";
    j["gather_source"] = cfg.gather_source == GatherSource::points ? "points" : "pillar_center";
    j["max_camera_features"] = cfg.max_camera_features;
    j["aug"] = json::parse(augment::config_to_json_text(cfg.aug));
    j["grid"] = json::parse(voxel::grid_to_json_text(cfg.grid));
    encoder_block_to_json(j, "lidar_encoder", cfg.lidar_encoder, cfg.lidar_encoder_init);
    encoder_block_to_json(j, "camera_encoder", cfg.camera_encoder, cfg.camera_encoder_init);
    if (cfg.align_params)
        j["align"] = json::parse(align::align_params_to_json_text(*cfg.align_params));
    else if (cfg.align_init) {
        j["align"] = {{"init",
                       {{"seed", cfg.align_init->seed},
                        {"d_attn", cfg.align_init->d_attn},
                        {"d_mlp", cfg.align_init->d_mlp},
                        {"dropout_rate", cfg.align_init->dropout_rate},
                        {"scale_affinity", cfg.align_init->scale_affinity},
                        {"dropout_pre_softmax", cfg.align_init->dropout_pre_softmax}}}};
    }
    return j.dump(2) + "\n";
}

FusionConfig config_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    FusionConfig cfg;
    if (j.contains("strategy")) cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    cfg.seed = j.value("seed", cfg.seed);
    cfg.use_inverse_aug = j.value("use_inverse_aug", cfg.use_inverse_aug);
    if (j.contains("align_kind")) {
        const std::string kind = j.at("align_kind").get<std::string>();
        if (kind == "learned")
            cfg.align_kind = AlignKind::learned;
        else if (kind == "mean")
            cfg.align_kind = AlignKind::mean;
        else
            fail("fusion config: unknown align_kind '" + kind + "'");
    }
    if (j.contains("gather_source")) {
        const std::string src = j.at("gather_source").get<std::string>();
        if (src == "points")
            cfg.gather_source = GatherSource::points;
        else if (src == "pillar_center")
            cfg.gather_source = GatherSource::pillar_center;
        else
            fail("fusion config: unknown gather_source '" + src + "'");
    }
    cfg.max_camera_features = j.value("max_camera_features", cfg.max_camera_features);
    if (j.contains("aug")) cfg.aug = augment::config_from_json_text(j.at("aug").dump());
    if (j.contains("grid")) cfg.grid = voxel::grid_from_json_text(j.at("grid").dump());
    encoder_block_from_json(j, "lidar_encoder", false, cfg.lidar_encoder, cfg.lidar_encoder_init);
    encoder_block_from_json(j, "camera_encoder", true, cfg.camera_encoder, cfg.camera_encoder_init);
    if (j.contains("align")) {
        const json& block = j.at("align");
        cfg.align_params.reset();
        cfg.align_init.reset();
        if (block.contains("init")) {
            const json& init = block.at("init");
            AlignInit a;
            a.seed = init.value("seed", a.seed);
            a.d_attn = init.value("d_attn", a.d_attn);
            a.d_mlp = init.value("d_mlp", a.d_mlp);
            a.dropout_rate = init.value("dropout_rate", a.dropout_rate);
            a.scale_affinity = init.value("scale_affinity", a.scale_affinity);
            a.dropout_pre_softmax = init.value("dropout_pre_softmax", a.dropout_pre_softmax);
            cfg.align_init = a;
        } else {
            cfg.align_params = align::align_params_from_json_text(block.dump());
        }
    }
    cfg.validate();
    return cfg;
}

FusionConfig load_config_json(const std::string& path) {
    return config_from_json_text(read_file(path));
}

void save_pipeline_output(const PipelineOutput& out, const FusionConfig& cfg,
                          const std::string& dir) {
    fs::create_directories(dir);
    geometry::save_feature_map(out.image.to_feature_map(),
                               (fs::path(dir) / "pseudo_image.fmap").string());
    augment::save_record_json(out.record, (fs::path(dir) / "record.json").string());

    json metrics;
    metrics["strategy"] = strategy_name(cfg.strategy);
    metrics["seed"] = cfg.seed;
    metrics["use_inverse_aug"] = cfg.use_inverse_aug;
    metrics["points_in"] = out.points_in;
    metrics["points_after_aug"] = out.points_after_aug;
    metrics["nonempty_pillars"] = out.nonempty_pillars;
    metrics["nx"] = out.image.nx;
    metrics["ny"] = out.image.ny;
    metrics["channels"] = out.image.channels;
    metrics["record_ops"] = out.record.ops.size();
    write_file((fs::path(dir) / "metrics.json").string(), metrics.dump(2) + "\n");
    log::info("wrote pipeline output to %s", dir.c_str());
}

void write_attention_csv(const std::vector<AttentionRow>& rows, const std::string& path) {
    std::string buf = "pillar_index,u,v,weight\n";
    char line[160];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", r.pillar_index, r.u, r.v,
                      r.weight);
        buf += line;
    }
    write_file(path, buf);
}

}  // namespace fusionkit::fusion
