#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fusionkit/random.hpp"
#include "fusionkit/voxel.hpp"

using namespace fusionkit;
using geometry::PointCloud;
using voxel::EncoderParams;
using voxel::PillarGrid;

namespace {

PointCloud random_cloud_in(double lo, double hi, int n, Rng& rng) {
    PointCloud cloud;
    for (int i = 0; i < n; ++i)
        cloud.points.push_back(
            {{rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(-2, 2)}, rng.uniform01()});
    return cloud;
}

// O(points * pillars) scan testing each point against every pillar's bounds.
std::vector<int32_t> brute_force_assign(const PointCloud& cloud, const PillarGrid& grid) {
    std::vector<int32_t> out(cloud.size(), -1);
    for (size_t i = 0; i < cloud.size(); ++i) {
        const auto& p = cloud.points[i].position;
        for (int iy = 0; iy < grid.ny && out[i] < 0; ++iy) {
            for (int ix = 0; ix < grid.nx; ++ix) {
                const double x0 = grid.x_min + ix * grid.pillar_dx;
                const double x1 = grid.x_min + (ix + 1) * grid.pillar_dx;
                const double y0 = grid.y_min + iy * grid.pillar_dy;
                const double y1 = grid.y_min + (iy + 1) * grid.pillar_dy;
                if (p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1) {
                    out[i] = iy * grid.nx + ix;
                    break;
                }
            }
        }
    }
    return out;
}

// Plain-loop forward pass, independent of the Eigen path.
std::vector<float> reference_mlp(const EncoderParams& params, const std::vector<float>& input) {
    std::vector<float> v = input;
    for (const auto& layer : params.layers) {
        std::vector<float> next(static_cast<size_t>(layer.weight.rows()));
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
            float acc = layer.bias[r];
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
                acc += layer.weight(r, c) * v[static_cast<size_t>(c)];
            next[static_cast<size_t>(r)] = voxel::apply_activation(params.activation, acc);
        }
        v = std::move(next);
    }
    return v;
}

}  // namespace

TEST_CASE("dynamic_voxelize floor arithmetic and half-open bounds") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 4, 0, 4, 4, 4);

    PointCloud cloud;
    cloud.points.push_back({{2.5, 0.5, 1.0}, 0.1});
    cloud.points.push_back({{4.0, 0.0, 0.0}, 0.2});   // x == x_max: out
    cloud.points.push_back({{-0.01, 1.0, 0.0}, 0.3});  // below x_min: out
    cloud.points.push_back({{0.0, 0.0, -5.0}, 0.4});   // boundary corner: pillar 0

    const auto assignment = voxel::dynamic_voxelize(cloud, grid);
    CHECK(assignment.pillar_of_point[0] == 2);
    CHECK(assignment.pillar_of_point[1] == -1);
    CHECK(assignment.pillar_of_point[2] == -1);
    CHECK(assignment.pillar_of_point[3] == 0);
    CHECK(assignment.assigned_count == 2);
    CHECK(assignment.unassigned_count() == 2);
    REQUIRE(assignment.members.count(2) == 1);
    CHECK(assignment.members.at(2) == std::vector<int32_t>{0});
}

TEST_CASE("dynamic_voxelize matches the brute-force bounds scan") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 16, 0, 16, 16, 16);
    Rng rng(42);
    PointCloud cloud = random_cloud_in(-2.0, 18.0, 10000, rng);
    // Snap a slice of points onto exact cell edges.
    for (size_t i = 0; i < cloud.size(); i += 13) {
        cloud.points[i].position.x = static_cast<double>(rng.below(17));
        if (i % 26 == 0) cloud.points[i].position.y = static_cast<double>(rng.below(17));
    }

    const auto assignment = voxel::dynamic_voxelize(cloud, grid);
    const auto expected = brute_force_assign(cloud, grid);
    REQUIRE(assignment.pillar_of_point.size() == expected.size());
    for (size_t i = 0; i < expected.size(); ++i) CHECK(assignment.pillar_of_point[i] == expected[i]);

    // Member lists partition the assigned points.
    size_t member_total = 0;
    for (const auto& [pillar, ids] : assignment.members) {
        for (int32_t id : ids) CHECK(assignment.pillar_of_point[static_cast<size_t>(id)] == pillar);
        member_total += ids.size();
    }
    CHECK(member_total == assignment.assigned_count);
    CHECK(assignment.assigned_count + assignment.unassigned_count() == cloud.size());
}

TEST_CASE("pillar_center corners and voxelize round trip") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 4, 0, 4, 4, 4);
    const auto [x0, y0] = voxel::pillar_center(0, grid);
    CHECK(x0 == 0.5);
    CHECK(y0 == 0.5);
    const auto [x1, y1] = voxel::pillar_center(grid.num_pillars() - 1, grid);
    CHECK(x1 == 3.5);
    CHECK(y1 == 3.5);
    CHECK_THROWS_AS(voxel::pillar_center(-1, grid), std::out_of_range);
    CHECK_THROWS_AS(voxel::pillar_center(16, grid), std::out_of_range);

    const PillarGrid fine = PillarGrid::from_bounds(-8, 8, -4, 12, 32, 8);
    for (int index = 0; index < fine.num_pillars(); ++index) {
        const auto [cx, cy] = voxel::pillar_center(index, fine);
        PointCloud probe;
        probe.points.push_back({{cx, cy, 0.0}, 0.0});
        const auto assignment = voxel::dynamic_voxelize(probe, fine);
        CHECK(assignment.pillar_of_point[0] == index);
    }
}

TEST_CASE("grid invariants") {
    PillarGrid broken = PillarGrid::from_bounds(0, 4, 0, 4, 4, 4);
    broken.pillar_dx = 1.5;  // 4 * 1.5 != 4
    CHECK_THROWS_AS(broken.validate(), std::invalid_argument);
    CHECK_THROWS_AS(PillarGrid::from_bounds(0, 0, 0, 1, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(PillarGrid::from_bounds(0, 1, 0, 1, 0, 1), std::invalid_argument);
    const PillarGrid standard = PillarGrid::standard();
    CHECK(standard.nx == 512);
    CHECK(standard.pillar_dx * standard.nx == 150.0);
}

TEST_CASE("silu values") {
    CHECK(voxel::silu(0.0) == 0.0);
    CHECK(std::abs(voxel::silu(20.0) - 20.0) < 1e-6);
    CHECK(voxel::silu(-1.0) == doctest::Approx(-0.2689414213699951).epsilon(1e-12));
    CHECK(voxel::silu(-30.0) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("encode_pillars singleton pillar equals the point's own encoding") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 4, 0, 4, 4, 4);
    PointCloud cloud;
    cloud.points.push_back({{1.25, 2.75, 0.5}, 0.6});

    const auto params = EncoderParams::random({}, {8}, 5, voxel::Activation::silu, 3);
    const auto assignment = voxel::dynamic_voxelize(cloud, grid);
    const auto image = voxel::encode_pillars(cloud, assignment, params);

    const auto [cx, cy] = voxel::pillar_center(assignment.pillar_of_point[0], grid);
    const std::vector<float> input{1.25f, 2.75f, 0.5f, 0.6f, static_cast<float>(1.25 - cx),
                                   static_cast<float>(2.75 - cy)};
    const auto expected = reference_mlp(params, input);
    const auto cell = image.cell(1, 2);
    for (int c = 0; c < 5; ++c) CHECK(cell[static_cast<size_t>(c)] == expected[static_cast<size_t>(c)]);
}

TEST_CASE("transparent one-layer relu encoder pools the raw features") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 4, 0, 4, 2, 2);
    // Both points in pillar (0,0) whose center is (1,1); keep coordinates at or
    // above the center so offsets stay nonnegative.
    PointCloud cloud;
    cloud.points.push_back({{1.5, 1.0, 0.25}, 0.9});
    cloud.points.push_back({{1.0, 1.75, 0.5}, 0.4});

    EncoderParams params;
    params.activation = voxel::Activation::relu;
    params.layout = {};
    voxel::EncoderLayer layer;
    layer.weight = Eigen::MatrixXf::Identity(6, 6);
    layer.bias = Eigen::VectorXf::Zero(6);
    params.layers.push_back(layer);
    params.validate();

    const auto assignment = voxel::dynamic_voxelize(cloud, grid);
    const auto image = voxel::encode_pillars(cloud, assignment, params);
    const auto cell = image.cell(0, 0);
    CHECK(cell[0] == 1.5f);   // max x
    CHECK(cell[1] == 1.75f);  // max y
    CHECK(cell[2] == 0.5f);   // max z
    CHECK(cell[3] == 0.9f);   // max intensity
    CHECK(cell[4] == 0.5f);   // max x-offset
    CHECK(cell[5] == 0.75f);  // max y-offset

    // Empty pillars hold zeros.
    const auto empty = image.cell(1, 1);
    for (float f : empty) CHECK(f == 0.0f);
}

TEST_CASE("encode_pillars matches the straight-line oracle") {
    const PillarGrid grid = PillarGrid::from_bounds(-4, 4, -4, 4, 4, 4);
    Rng rng(17);
    PointCloud cloud;
    cloud.points.push_back({{1.1, 2.2, -0.5}, 0.3});
    cloud.points.push_back({{1.3, 2.1, 0.8}, 0.7});  // same pillar as the first

    const auto params = EncoderParams::random({}, {16, 16}, 7, voxel::Activation::silu, 5);
    const auto assignment = voxel::dynamic_voxelize(cloud, grid);
    REQUIRE(assignment.members.size() == 1);
    const int pillar = assignment.pillar_of_point[0];
    REQUIRE(assignment.pillar_of_point[1] == pillar);

    const auto image = voxel::encode_pillars(cloud, assignment, params);
    const auto [cx, cy] = voxel::pillar_center(pillar, grid);

    std::vector<float> pooled(7, -std::numeric_limits<float>::infinity());
    for (const auto& lp : cloud.points) {
        const std::vector<float> input{
            static_cast<float>(lp.position.x),      static_cast<float>(lp.position.y),
            static_cast<float>(lp.position.z),      static_cast<float>(lp.intensity),
            static_cast<float>(lp.position.x - cx), static_cast<float>(lp.position.y - cy)};
        const auto out = reference_mlp(params, input);
        for (int c = 0; c < 7; ++c)
            pooled[static_cast<size_t>(c)] = std::max(pooled[static_cast<size_t>(c)], out[static_cast<size_t>(c)]);
    }
    const auto cell = image.cell(pillar % grid.nx, pillar / grid.nx);
    for (int c = 0; c < 7; ++c) CHECK(cell[static_cast<size_t>(c)] == pooled[static_cast<size_t>(c)]);
}

TEST_CASE("pseudo image is invariant to point order") {
    const PillarGrid grid = PillarGrid::from_bounds(-8, 8, -8, 8, 8, 8);
    Rng rng(23);
    const PointCloud cloud = random_cloud_in(-9.0, 9.0, 300, rng);
    const auto params = EncoderParams::random({}, {12}, 6, voxel::Activation::silu, 11);

    const auto baseline =
        voxel::encode_pillars(cloud, voxel::dynamic_voxelize(cloud, grid), params);

    std::vector<size_t> order(cloud.size());
    std::iota(order.begin(), order.end(), 0);
    for (int shuffle = 0; shuffle < 100; ++shuffle) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.below(i))]);
        PointCloud shuffled;
        shuffled.frame_id = cloud.frame_id;
        for (size_t idx : order) shuffled.points.push_back(cloud.points[idx]);
        const auto image =
            voxel::encode_pillars(shuffled, voxel::dynamic_voxelize(shuffled, grid), params);
        REQUIRE(image.data.size() == baseline.data.size());
        CHECK(image.data == baseline.data);  // exact, max-pool is order-free
    }
}

TEST_CASE("adding a point max-merges into the pooled pillar") {
    const PillarGrid grid = PillarGrid::from_bounds(0, 8, 0, 8, 4, 4);
    Rng rng(29);
    PointCloud cloud = random_cloud_in(0.5, 1.5, 10, rng);  // all in pillar 0
    const auto params = EncoderParams::random({}, {10}, 4, voxel::Activation::silu, 13);

    const auto before = voxel::encode_pillars(cloud, voxel::dynamic_voxelize(cloud, grid), params);

    geometry::LidarPoint extra{{1.9, 0.1, 1.0}, 0.95};
    cloud.points.push_back(extra);
    const auto after = voxel::encode_pillars(cloud, voxel::dynamic_voxelize(cloud, grid), params);

    const auto [cx, cy] = voxel::pillar_center(0, grid);
    const std::vector<float> input{
        static_cast<float>(extra.position.x),      static_cast<float>(extra.position.y),
        static_cast<float>(extra.position.z),      static_cast<float>(extra.intensity),
        static_cast<float>(extra.position.x - cx), static_cast<float>(extra.position.y - cy)};
    const auto encoded = reference_mlp(params, input);

    const auto a = before.cell(0, 0);
    const auto b = after.cell(0, 0);
    for (int c = 0; c < 4; ++c)
        CHECK(b[static_cast<size_t>(c)] == std::max(a[static_cast<size_t>(c)], encoded[static_cast<size_t>(c)]));
}

TEST_CASE("encoder params json round trip and validation") {
    voxel::FeatureLayout layout;
    layout.extra_channels = 3;
    const auto params = EncoderParams::random(layout, {9, 7}, 5, voxel::Activation::relu, 31);
    const auto text = voxel::encoder_to_json_text(params);
    const auto back = voxel::encoder_from_json_text(text);
    CHECK(back.activation == voxel::Activation::relu);
    CHECK(back.layout.extra_channels == 3);
    REQUIRE(back.layers.size() == params.layers.size());
    for (size_t i = 0; i < back.layers.size(); ++i) {
        CHECK((back.layers[i].weight - params.layers[i].weight).cwiseAbs().maxCoeff() == 0.0f);
        CHECK((back.layers[i].bias - params.layers[i].bias).cwiseAbs().maxCoeff() == 0.0f);
    }

    EncoderParams bad = params;
    bad.layers[1].weight.resize(7, 4);  // breaks the chain
    bad.layers[1].weight.setZero();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    EncoderParams mismatch = params;
    mismatch.layout.extra_channels = 0;  // first layer no longer matches
    CHECK_THROWS_AS(mismatch.validate(), std::invalid_argument);
}

TEST_CASE("grid json round trip") {
    const PillarGrid grid = PillarGrid::from_bounds(-20, 20, -10, 30, 16, 16);
    const auto back = voxel::grid_from_json_text(voxel::grid_to_json_text(grid));
    CHECK(back.x_min == grid.x_min);
    CHECK(back.y_max == grid.y_max);
    CHECK(back.nx == grid.nx);
    CHECK(back.pillar_dx == grid.pillar_dx);
}
