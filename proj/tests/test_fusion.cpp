#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "fusionkit/fusion.hpp"
#include "fusionkit/harness.hpp"
#include "fusionkit/random.hpp"

using namespace fusionkit;
using fusion::FusionConfig;
using fusion::Scene;
using fusion::Strategy;
using geometry::Vec3;

namespace {

constexpr double kPi = 3.14159265358979323846;

harness::SceneSpec base_spec(harness::FeatureGenerator gen, int points = 600) {
    harness::SceneSpec spec;
    spec.num_points = points;
    spec.generator = gen;
    spec.fm_channels = 3;
    spec.seed = 7;
    return spec;
}

FusionConfig base_config() {
    FusionConfig cfg;
    cfg.grid = voxel::PillarGrid::from_bounds(0, 32, -16, 16, 16, 16);
    cfg.aug = augment::AugConfig::disabled();
    fusion::EncoderInit enc;
    enc.hidden = {12};
    enc.out = 6;
    enc.seed = 3;
    cfg.lidar_encoder_init = enc;
    fusion::AlignInit al;
    al.d_attn = 8;
    al.d_mlp = 5;
    al.seed = 4;
    cfg.align_init = al;
    cfg.seed = 11;
    return cfg;
}

// Squeeze = [I | X], zero biases everywhere: zero camera features leave the
// lidar feature untouched, so deep fusion collapses onto the single-modal image.
align::AlignParams passthrough_align(int d_lidar, int d_camera, uint64_t seed) {
    align::AlignParams p = align::AlignParams::random(d_lidar, d_camera, 8, 5, seed);
    p.b_v.setZero();
    p.b_mlp.setZero();
    p.b_squeeze.setZero();
    p.w_squeeze.leftCols(d_lidar) = Eigen::MatrixXd::Identity(d_lidar, d_lidar);
    return p;
}

std::filesystem::path temp_dir(const char* name) {
    const auto dir = std::filesystem::temp_directory_path() / "fusionkit_fusion_test" / name;
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("laser noise respects the relative bound") {
    Rng rng(1);
    geometry::PointCloud cloud;
    for (int i = 0; i < 100000; ++i)
        cloud.points.push_back({{0, 0, 0}, 0.2 + 0.6 * rng.uniform01()});

    SUBCASE("magnitude zero is the identity") {
        Rng r(2);
        const auto out = fusion::laser_noise(cloud, 0.0, r);
        for (size_t i = 0; i < cloud.size(); ++i)
            CHECK(out.points[i].intensity == cloud.points[i].intensity);
    }
    SUBCASE("2.5% magnitude never deviates more") {
        Rng r(2);
        const auto out = fusion::laser_noise(cloud, 0.025, r);
        double worst = 0.0;
        for (size_t i = 0; i < cloud.size(); ++i) {
            const double rel =
                std::abs(out.points[i].intensity - cloud.points[i].intensity) /
                cloud.points[i].intensity;
            worst = std::max(worst, rel);
            CHECK(out.points[i].position.x == cloud.points[i].position.x);
        }
        CHECK(worst <= 0.025 + 1e-12);
    }
    SUBCASE("zero intensity is a fixed point of multiplicative noise") {
        geometry::PointCloud dark;
        for (int i = 0; i < 50; ++i) dark.points.push_back({{0, 0, 0}, 0.0});
        Rng r(2);
        const auto out = fusion::laser_noise(dark, 0.5, r);
        for (const auto& p : out.points) CHECK(p.intensity == 0.0);
    }
    SUBCASE("clamping keeps intensities in range") {
        geometry::PointCloud bright;
        for (int i = 0; i < 1000; ++i) bright.points.push_back({{0, 0, 0}, 1.0});
        Rng r(2);
        const auto out = fusion::laser_noise(bright, 1.0, r);
        for (const auto& p : out.points) {
            CHECK(p.intensity <= 1.0);
            CHECK(p.intensity >= 0.0);
        }
    }
}

TEST_CASE("pixel noise respects the relative bound without clamping") {
    Rng rng(5);
    geometry::FeatureMap fm = geometry::FeatureMap::zeros(100, 100, 10, 1.0);
    for (auto& f : fm.data) f = static_cast<float>(rng.uniform(0.5, 4.0));

    SUBCASE("magnitude zero is the identity") {
        Rng r(6);
        CHECK(fusion::pixel_noise(fm, 0.0, r).data == fm.data);
    }
    SUBCASE("bound holds over 1e5 cells") {
        Rng r(6);
        const auto out = fusion::pixel_noise(fm, 0.025, r);
        double worst = 0.0;
        for (size_t i = 0; i < fm.data.size(); ++i)
            worst = std::max(worst,
                             std::abs(out.data[i] - static_cast<double>(fm.data[i])) / fm.data[i]);
        CHECK(worst <= 0.025 + 1e-6);
    }
    SUBCASE("a zero map stays zero") {
        geometry::FeatureMap zeros = geometry::FeatureMap::zeros(16, 16, 2, 1.0);
        Rng r(6);
        CHECK(fusion::pixel_noise(zeros, 0.5, r).data == zeros.data);
    }
    SUBCASE("additive noise shifts the zero map") {
        geometry::FeatureMap zeros = geometry::FeatureMap::zeros(16, 16, 2, 1.0);
        Rng r(6);
        const auto out = fusion::pixel_noise(zeros, 0.5, r, fusion::NoiseKind::additive);
        double peak = 0.0;
        for (float f : out.data) peak = std::max(peak, std::abs(static_cast<double>(f)));
        CHECK(peak > 0.0);
        CHECK(peak <= 0.5);
    }
}

TEST_CASE("pipelines are deterministic in scene and config") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::seeded_random));
    FusionConfig cfg = base_config();
    cfg.aug = augment::AugConfig{};  // every geometric op enabled
    cfg.strategy = Strategy::deep_fusion;

    const auto a = fusion::run_strategy(scene, cfg);
    const auto b = fusion::run_strategy(scene, cfg);
    CHECK(a.image.data == b.image.data);
    CHECK(a.points_after_aug == b.points_after_aug);

    cfg.seed += 1;
    const auto c = fusion::run_strategy(scene, cfg);
    CHECK(a.image.data != c.image.data);
}

TEST_CASE("deep fusion with augmentation disabled ignores the inverse-aug flag") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::seeded_random));
    FusionConfig cfg = base_config();

    cfg.use_inverse_aug = true;
    const auto with_ia = fusion::deep_fusion(scene, cfg);
    cfg.use_inverse_aug = false;
    const auto without_ia = fusion::deep_fusion(scene, cfg);
    CHECK(with_ia.image.data == without_ia.image.data);  // bit-exact
}

TEST_CASE("zero camera features collapse every strategy onto the single-modal image") {
    auto spec = base_spec(harness::FeatureGenerator::constant);
    spec.constant_value = 0.0;
    const auto scene = harness::generate_scene(spec);

    FusionConfig cfg = base_config();
    cfg.aug = augment::AugConfig{};
    cfg.strategy = Strategy::single_modal;
    const auto single = fusion::run_strategy(scene, cfg);

    SUBCASE("input fusion matches through the zero-padded encoder") {
        // Materialize the single-modal encoder and splice zero columns where
        // the decoration channels sit (after x, y, z, intensity).
        voxel::FeatureLayout plain_layout;
        const auto plain =
            voxel::EncoderParams::random(plain_layout, cfg.lidar_encoder_init->hidden,
                                         cfg.lidar_encoder_init->out,
                                         cfg.lidar_encoder_init->activation,
                                         cfg.lidar_encoder_init->seed);
        voxel::EncoderParams padded = plain;
        padded.layout.extra_channels = scene.features.channels;
        auto& first = padded.layers.front().weight;
        Eigen::MatrixXf widened =
            Eigen::MatrixXf::Zero(first.rows(), first.cols() + scene.features.channels);
        widened.leftCols(4) = first.leftCols(4);
        widened.rightCols(2) = first.rightCols(2);
        first = widened;
        padded.validate();

        FusionConfig input_cfg = cfg;
        input_cfg.strategy = Strategy::input_fusion;
        input_cfg.lidar_encoder = padded;
        input_cfg.lidar_encoder_init.reset();
        const auto fused = fusion::run_strategy(scene, input_cfg);

        REQUIRE(fused.image.data.size() == single.image.data.size());
        for (size_t i = 0; i < fused.image.data.size(); ++i)
            CHECK(std::abs(fused.image.data[i] - single.image.data[i]) <= 1e-6);
    }

    SUBCASE("late fusion: lidar half equals the single-modal image, camera half is zero") {
        FusionConfig late_cfg = cfg;
        late_cfg.strategy = Strategy::late_fusion;
        fusion::EncoderInit cam_enc;
        cam_enc.hidden = {8};
        cam_enc.out = 4;
        cam_enc.seed = 9;
        cam_enc.use_base = false;
        cam_enc.use_offsets = false;
        late_cfg.camera_encoder_init = cam_enc;
        const auto fused = fusion::run_strategy(scene, late_cfg);

        REQUIRE(fused.image.channels == single.image.channels + 4);
        for (int iy = 0; iy < fused.image.ny; ++iy)
            for (int ix = 0; ix < fused.image.nx; ++ix) {
                const auto full = fused.image.cell(ix, iy);
                const auto lidar_half = single.image.cell(ix, iy);
                for (int c = 0; c < single.image.channels; ++c)
                    CHECK(full[static_cast<size_t>(c)] == lidar_half[static_cast<size_t>(c)]);
                for (int c = single.image.channels; c < fused.image.channels; ++c)
                    CHECK(full[static_cast<size_t>(c)] == 0.0f);
            }
    }

    SUBCASE("deep fusion with a passthrough squeeze is bit-identical") {
        FusionConfig deep_cfg = cfg;
        deep_cfg.strategy = Strategy::deep_fusion;
        deep_cfg.align_params = passthrough_align(6, scene.features.channels, 21);
        deep_cfg.align_init.reset();
        const auto fused = fusion::run_strategy(scene, deep_cfg);
        CHECK(fused.image.data == single.image.data);
    }
}

TEST_CASE("input fusion decorates visible points with the constant feature") {
    auto spec = base_spec(harness::FeatureGenerator::constant, 200);
    spec.constant_value = 2.5;
    const auto scene = harness::generate_scene(spec);
    REQUIRE(scene.correspondences.has_value());
    // This camera sees the whole extent.
    REQUIRE(scene.correspondences->size() == scene.cloud.size());

    // One identity-ish layer that forwards only the decoration channels.
    voxel::EncoderParams probe;
    probe.activation = voxel::Activation::relu;
    probe.layout.extra_channels = 3;
    voxel::EncoderLayer layer;
    layer.weight = Eigen::MatrixXf::Zero(3, probe.layout.input_dim());
    layer.weight(0, 4) = 1.0f;
    layer.weight(1, 5) = 1.0f;
    layer.weight(2, 6) = 1.0f;
    layer.bias = Eigen::VectorXf::Zero(3);
    probe.layers.push_back(layer);
    probe.validate();

    FusionConfig cfg = base_config();
    cfg.strategy = Strategy::input_fusion;
    cfg.lidar_encoder = probe;
    cfg.lidar_encoder_init.reset();
    const auto out = fusion::run_strategy(scene, cfg);

    for (int iy = 0; iy < out.image.ny; ++iy)
        for (int ix = 0; ix < out.image.nx; ++ix) {
            const auto cell = out.image.cell(ix, iy);
            const bool empty = cell[0] == 0.0f && cell[1] == 0.0f && cell[2] == 0.0f;
            if (empty) continue;
            for (int c = 0; c < 3; ++c) CHECK(cell[static_cast<size_t>(c)] == doctest::Approx(2.5));
        }
}

TEST_CASE("late fusion halves equal the isolated branches") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::seeded_random));
    FusionConfig cfg = base_config();
    cfg.strategy = Strategy::late_fusion;
    cfg.aug = augment::AugConfig{};
    fusion::EncoderInit cam_enc;
    cam_enc.hidden = {8};
    cam_enc.out = 4;
    cam_enc.seed = 9;
    cam_enc.use_base = false;
    cam_enc.use_offsets = false;
    cfg.camera_encoder_init = cam_enc;

    const auto fused = fusion::run_strategy(scene, cfg);

    // Isolated lidar branch matches the single-modal run with the same seed.
    FusionConfig single_cfg = cfg;
    single_cfg.strategy = Strategy::single_modal;
    const auto lidar_branch = fusion::run_strategy(scene, single_cfg);

    // Isolated camera branch, recomputed directly through the voxel API.
    voxel::FeatureLayout cam_layout;
    cam_layout.use_base = false;
    cam_layout.use_offsets = false;
    cam_layout.extra_channels = scene.features.channels;
    const auto cam_params = voxel::EncoderParams::random(cam_layout, cam_enc.hidden, cam_enc.out,
                                                         cam_enc.activation, cam_enc.seed);
    const auto aug = augment::apply_pipeline(scene.cloud, cfg.aug, cfg.seed);
    std::vector<std::vector<float>> extras;
    for (int32_t src : aug.source_indices) {
        const auto px =
            geometry::project_to_image(scene.cloud.points[static_cast<size_t>(src)].position,
                                       scene.camera);
        if (px)
            extras.push_back(geometry::bilinear_sample(scene.features, px->u, px->v));
        else
            extras.push_back(std::vector<float>(static_cast<size_t>(scene.features.channels), 0.0f));
    }
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, cfg.grid);
    const auto camera_branch = voxel::encode_pillars(aug.cloud, extras, assignment, cam_params);

    REQUIRE(fused.image.channels == lidar_branch.image.channels + camera_branch.channels);
    for (int iy = 0; iy < fused.image.ny; ++iy)
        for (int ix = 0; ix < fused.image.nx; ++ix) {
            const auto cell = fused.image.cell(ix, iy);
            const auto a = lidar_branch.image.cell(ix, iy);
            const auto b = camera_branch.cell(ix, iy);
            for (int c = 0; c < lidar_branch.image.channels; ++c)
                CHECK(cell[static_cast<size_t>(c)] == a[static_cast<size_t>(c)]);
            for (int c = 0; c < camera_branch.channels; ++c)
                CHECK(cell[static_cast<size_t>(lidar_branch.image.channels + c)] ==
                      b[static_cast<size_t>(c)]);
        }
}

TEST_CASE("late fusion with nothing visible zeroes the camera half") {
    auto spec = base_spec(harness::FeatureGenerator::seeded_random, 200);
    spec.camera_position = {100.0, 0.0, 1.5};
    spec.camera_look_at = {200.0, 0.0, 1.5};  // looking away from the extent
    const auto scene = harness::generate_scene(spec);
    REQUIRE(scene.correspondences->empty());

    FusionConfig cfg = base_config();
    cfg.strategy = Strategy::late_fusion;
    fusion::EncoderInit cam_enc;
    cam_enc.hidden = {8};
    cam_enc.out = 4;
    cam_enc.use_base = false;
    cam_enc.use_offsets = false;
    cfg.camera_encoder_init = cam_enc;
    const auto fused = fusion::run_strategy(scene, cfg);
    for (int iy = 0; iy < fused.image.ny; ++iy)
        for (int ix = 0; ix < fused.image.nx; ++ix) {
            const auto cell = fused.image.cell(ix, iy);
            for (int c = 6; c < 10; ++c) CHECK(cell[static_cast<size_t>(c)] == 0.0f);
        }
}

TEST_CASE("deep fusion gathering recovers the unaugmented pixels per pillar") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::coordinate_encoded));
    augment::AugConfig aug_cfg = augment::AugConfig::disabled();
    aug_cfg.rotation_enabled = true;
    aug_cfg.max_rotation = kPi / 6;  // 30 degrees

    const auto aug = augment::apply_pipeline(scene.cloud, aug_cfg, 5);
    const auto grid = voxel::PillarGrid::from_bounds(-32, 32, -32, 32, 16, 16);
    const auto assignment = voxel::dynamic_voxelize(aug.cloud, grid);
    REQUIRE(assignment.members.size() > 4);

    for (const auto& [pillar, member_ids] : assignment.members) {
        std::vector<Vec3> augmented;
        std::vector<Vec3> original;
        for (int32_t id : member_ids) {
            augmented.push_back(aug.cloud.points[static_cast<size_t>(id)].position);
            original.push_back(
                scene.cloud.points[static_cast<size_t>(aug.source_indices[static_cast<size_t>(id)])]
                    .position);
        }
        const auto recovered = align::gather_camera_features(augmented, aug.record, scene.camera,
                                                             scene.features, 4096, pillar);
        const auto expected = align::gather_camera_features(original, {}, scene.camera,
                                                            scene.features, 4096, pillar);
        REQUIRE(recovered.size() == expected.size());
        for (int i = 0; i < recovered.size(); ++i) {
            CHECK(std::abs(recovered.pixels[static_cast<size_t>(i)].u -
                           expected.pixels[static_cast<size_t>(i)].u) < 1e-9);
            CHECK(std::abs(recovered.pixels[static_cast<size_t>(i)].v -
                           expected.pixels[static_cast<size_t>(i)].v) < 1e-9);
        }
    }
}

TEST_CASE("mean and learned alignment agree when every gathered feature is identical") {
    auto spec = base_spec(harness::FeatureGenerator::constant);
    spec.constant_value = 1.25;
    const auto scene = harness::generate_scene(spec);

    FusionConfig cfg = base_config();
    cfg.strategy = Strategy::deep_fusion;
    cfg.align_kind = fusion::AlignKind::learned;
    const auto learned = fusion::run_strategy(scene, cfg);
    cfg.align_kind = fusion::AlignKind::mean;
    const auto mean = fusion::run_strategy(scene, cfg);

    REQUIRE(learned.image.data.size() == mean.image.data.size());
    for (size_t i = 0; i < learned.image.data.size(); ++i)
        CHECK(std::abs(learned.image.data[i] - mean.image.data[i]) <= 1e-6);
}

TEST_CASE("pillar-center gathering produces at most one feature per pillar") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::seeded_random));
    FusionConfig cfg = base_config();
    cfg.gather_source = fusion::GatherSource::pillar_center;
    std::vector<fusion::AttentionRow> rows;
    const auto out = fusion::deep_fusion(scene, cfg, &rows);
    CHECK(out.nonempty_pillars > 0);
    std::map<int32_t, int> per_pillar;
    for (const auto& r : rows) per_pillar[r.pillar_index]++;
    for (const auto& [pillar, count] : per_pillar) CHECK(count == 1);
    for (const auto& r : rows) CHECK(r.weight == doctest::Approx(1.0));
}

TEST_CASE("deep fusion without align params is rejected") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::seeded_random));
    FusionConfig cfg = base_config();
    cfg.align_init.reset();
    cfg.align_params.reset();
    CHECK_THROWS_AS(fusion::deep_fusion(scene, cfg), std::invalid_argument);

    FusionConfig mismatched = base_config();
    mismatched.align_params = align::AlignParams::random(5, 3, 8, 5, 1);  // encoder emits 6
    mismatched.align_init.reset();
    CHECK_THROWS_AS(fusion::deep_fusion(scene, mismatched), std::invalid_argument);
}

TEST_CASE("scene bundle round trip") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::coordinate_encoded, 150));
    const auto dir = temp_dir("bundle");
    fusion::save_scene(scene, dir.string());
    const auto back = fusion::load_scene(dir.string());

    REQUIRE(back.cloud.size() == scene.cloud.size());
    for (size_t i = 0; i < scene.cloud.size(); ++i) {
        CHECK(back.cloud.points[i].position.x == scene.cloud.points[i].position.x);
        CHECK(back.cloud.points[i].intensity == scene.cloud.points[i].intensity);
    }
    CHECK(back.camera.fx == scene.camera.fx);
    CHECK(back.camera.rotation.m == scene.camera.rotation.m);
    CHECK(back.features.data == scene.features.data);
    REQUIRE(back.correspondences.has_value());
    REQUIRE(back.correspondences->size() == scene.correspondences->size());
    for (size_t i = 0; i < back.correspondences->size(); ++i) {
        CHECK((*back.correspondences)[i].point_index == (*scene.correspondences)[i].point_index);
        CHECK((*back.correspondences)[i].u == (*scene.correspondences)[i].u);
    }
}

TEST_CASE("scene bundles with several frames are rejected") {
    const auto scene = harness::generate_scene(base_spec(harness::FeatureGenerator::constant, 40));
    const auto dir = temp_dir("multiframe");
    fusion::save_scene(scene, dir.string());

    geometry::PointCloud past = scene.cloud;
    past.frame_id = 1;
    const std::vector<geometry::PointCloud> frames{scene.cloud, past};
    geometry::save_point_clouds(frames, (dir / "points.pclf").string());
    CHECK_THROWS_AS(fusion::load_scene(dir.string()), std::invalid_argument);
}

TEST_CASE("fusion config json round trip") {
    FusionConfig cfg = base_config();
    cfg.strategy = Strategy::late_fusion;
    cfg.use_inverse_aug = false;
    cfg.align_kind = fusion::AlignKind::mean;
    cfg.max_camera_features = 12;
    fusion::EncoderInit cam_enc;
    cam_enc.out = 4;
    cam_enc.use_base = false;
    cam_enc.use_offsets = false;
    cfg.camera_encoder_init = cam_enc;

    const auto text = fusion::config_to_json_text(cfg);
    const auto back = fusion::config_from_json_text(text);
    CHECK(back.strategy == Strategy::late_fusion);
    CHECK_FALSE(back.use_inverse_aug);
    CHECK(back.align_kind == fusion::AlignKind::mean);
    CHECK(back.max_camera_features == 12);
    CHECK(back.grid.nx == cfg.grid.nx);
    REQUIRE(back.lidar_encoder_init.has_value());
    CHECK(back.lidar_encoder_init->out == 6);
    REQUIRE(back.camera_encoder_init.has_value());
    CHECK_FALSE(back.camera_encoder_init->use_base);
    REQUIRE(back.align_init.has_value());
    CHECK(back.align_init->d_attn == 8);

    // Materialized align params survive the round trip too.
    FusionConfig with_params = base_config();
    with_params.align_params = passthrough_align(6, 3, 2);
    with_params.align_init.reset();
    const auto back2 = fusion::config_from_json_text(fusion::config_to_json_text(with_params));
    REQUIRE(back2.align_params.has_value());
    CHECK((back2.align_params->w_squeeze - with_params.align_params->w_squeeze)
              .cwiseAbs()
              .maxCoeff() == 0.0);
}
