#include "fusionkit/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "fusionkit/random.hpp"

namespace fusionkit::voxel {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

PillarGrid PillarGrid::from_bounds(double x_min, double x_max, double y_min, double y_max, int nx,
                                   int ny) {
    PillarGrid g;
    g.x_min = x_min;
    g.x_max = x_max;
    g.y_min = y_min;
    g.y_max = y_max;
    g.nx = nx;
    g.ny = ny;
    if (nx > 0) g.pillar_dx = (x_max - x_min) / nx;
    if (ny > 0) g.pillar_dy = (y_max - y_min) / ny;
    g.validate();
    return g;
}

PillarGrid PillarGrid::standard() { return from_bounds(-75.0, 75.0, -75.0, 75.0, 512, 512); }

void PillarGrid::validate() const {
    if (nx <= 0 || ny <= 0) fail("pillar grid: nx, ny must be positive");
    if (!(x_max > x_min) || !(y_max > y_min)) fail("pillar grid: empty extent");
    if (!(pillar_dx > 0.0) || !(pillar_dy > 0.0)) fail("pillar grid: cell sizes must be positive");
    if (nx * pillar_dx != x_max - x_min || ny * pillar_dy != y_max - y_min)
        fail("pillar grid: count * cell size must reproduce the extent exactly");
}

float apply_activation(Activation a, float x) {
    if (a == Activation::relu) return x > 0.0f ? x : 0.0f;
    return static_cast<float>(silu(x));
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

VoxelAssignment dynamic_voxelize(const PointCloud& points, const PillarGrid& grid) {
    grid.validate();
    VoxelAssignment out;
    out.grid = grid;
    out.pillar_of_point.assign(points.size(), -1);

    for (size_t i = 0; i < points.size(); ++i) {
        const auto& p = points.points[i].position;
        if (p.x < grid.x_min || p.x >= grid.x_max || p.y < grid.y_min || p.y >= grid.y_max)
            continue;
        int ix = static_cast<int>(std::floor((p.x - grid.x_min) / grid.pillar_dx));
        int iy = static_cast<int>(std::floor((p.y - grid.y_min) / grid.pillar_dy));
        ix = std::min(ix, grid.nx - 1);
        iy = std::min(iy, grid.ny - 1);
        const int32_t index = iy * grid.nx + ix;
        out.pillar_of_point[i] = index;
        out.members[index].push_back(static_cast<int32_t>(i));
        ++out.assigned_count;
    }
    return out;
}

std::pair<double, double> pillar_center(int index, const PillarGrid& grid) {
    if (index < 0 || index >= grid.num_pillars())
        throw std::out_of_range("pillar_center: index outside grid");
    const int ix = index % grid.nx;
    const int iy = index / grid.nx;
    return {grid.x_min + (ix + 0.5) * grid.pillar_dx, grid.y_min + (iy + 0.5) * grid.pillar_dy};
}

void EncoderParams::validate() const {
    if (layers.empty()) fail("encoder: at least one layer required");
    if (layers.front().weight.cols() != layout.input_dim())
        fail("encoder: first layer width does not match the feature layout");
    Eigen::Index prev = layers.front().weight.cols();
    for (const auto& layer : layers) {
        if (layer.weight.cols() != prev) fail("encoder: layer dimensions do not chain");
        if (layer.bias.size() != layer.weight.rows()) fail("encoder: bias size mismatch");
        if (!layer.weight.allFinite() || !layer.bias.allFinite())
            fail("encoder: weights must be finite");
        prev = layer.weight.rows();
    }
}

EncoderParams EncoderParams::random(const FeatureLayout& layout,
                                    const std::vector<int>& hidden_dims, int out_dim,
                                    Activation activation, uint64_t seed) {
    EncoderParams params;
    params.activation = activation;
    params.layout = layout;
    Rng rng(Rng::derive(seed, 0x7 /* encoder stream */));

    std::vector<int> dims;
    dims.push_back(layout.input_dim());
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(out_dim);

    for (size_t i = 0; i + 1 < dims.size(); ++i) {
        EncoderLayer layer;
        const int rows = dims[i + 1];
        const int cols = dims[i];
        const double limit = std::sqrt(6.0 / (rows + cols));
        layer.weight.resize(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                layer.weight(r, c) = static_cast<float>(rng.uniform(-limit, limit));
        layer.bias = Eigen::VectorXf::Zero(rows);
        params.layers.push_back(std::move(layer));
    }
    params.validate();
    return params;
}

EncoderParams EncoderParams::standard(const FeatureLayout& layout, int out_dim, uint64_t seed) {
    return random(layout, {256, 256}, out_dim, Activation::silu, seed);
}

PseudoImage PseudoImage::zeros(int nx, int ny, int channels) {
    PseudoImage img;
    img.nx = nx;
    img.ny = ny;
    img.channels = channels;
    img.data.assign(static_cast<size_t>(nx) * ny * channels, 0.0f);
    return img;
}

geometry::FeatureMap PseudoImage::to_feature_map(double scale) const {
    geometry::FeatureMap fm;
    fm.width = nx;
    fm.height = ny;
    fm.channels = channels;
    fm.scale = scale;
    fm.data = data;
    fm.validate();
    return fm;
}

Eigen::VectorXf encoder_forward(const EncoderParams& params, const Eigen::VectorXf& input) {
    Eigen::VectorXf v = input;
    for (const auto& layer : params.layers) {
        v = (layer.weight * v + layer.bias).eval();
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = apply_activation(params.activation, v[i]);
    }
    return v;
}

PseudoImage encode_pillars(const PointCloud& points, const std::vector<std::vector<float>>& extras,
                           const VoxelAssignment& assignment, const EncoderParams& params) {
    params.validate();
    if (assignment.pillar_of_point.size() != points.size())
        fail("encode_pillars: assignment does not match the cloud");
    if (!extras.empty() && extras.size() != points.size())
        fail("encode_pillars: extras must be empty or per-point");
    if (params.layout.extra_channels > 0 && extras.empty())
        fail("encode_pillars: layout expects decoration channels but none were given");

    const auto& grid = assignment.grid;
    PseudoImage image = PseudoImage::zeros(grid.nx, grid.ny, params.output_dim());

    Eigen::VectorXf input(params.layout.input_dim());
    for (const auto& [pillar, member_ids] : assignment.members) {
        const auto [cx, cy] = pillar_center(pillar, grid);
        Eigen::VectorXf pooled;
        for (int32_t id : member_ids) {
            const auto& lp = points.points[static_cast<size_t>(id)];
            int k = 0;
            if (params.layout.use_base) {
                input[k++] = static_cast<float>(lp.position.x);
                input[k++] = static_cast<float>(lp.position.y);
                input[k++] = static_cast<float>(lp.position.z);
                input[k++] = static_cast<float>(lp.intensity);
            }
            if (params.layout.extra_channels > 0) {
                const auto& e = extras[static_cast<size_t>(id)];
                if (static_cast<int>(e.size()) != params.layout.extra_channels)
                    fail("encode_pillars: extra feature width mismatch");
                for (float f : e) input[k++] = f;
            }
            if (params.layout.use_offsets) {
                input[k++] = static_cast<float>(lp.position.x - cx);
                input[k++] = static_cast<float>(lp.position.y - cy);
            }
            const Eigen::VectorXf encoded = encoder_forward(params, input);
            if (pooled.size() == 0)
                pooled = encoded;
            else
                pooled = pooled.cwiseMax(encoded);
        }
        auto cell = image.cell(pillar % grid.nx, pillar / grid.nx);
        for (int c = 0; c < image.channels; ++c) cell[static_cast<size_t>(c)] = pooled[c];
    }
    return image;
}

PseudoImage encode_pillars(const PointCloud& points, const VoxelAssignment& assignment,
                           const EncoderParams& params) {
    return encode_pillars(points, {}, assignment, params);
}

// --- serialization ----------------------------------------------------------

std::string encoder_to_json_text(const EncoderParams& params) {
    json j;
    j["activation"] = params.activation == Activation::relu ? "relu" : "silu";
    j["layout"] = {{"use_base", params.layout.use_base},
                   {"extra_channels", params.layout.extra_channels},
                   {"use_offsets", params.layout.use_offsets}};
    json layers = json::array();
    for (const auto& layer : params.layers) {
        json l;
        l["rows"] = layer.weight.rows();
        l["cols"] = layer.weight.cols();
        std::vector<float> w;
        w.reserve(static_cast<size_t>(layer.weight.size()));
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) w.push_back(layer.weight(r, c));
        l["weights"] = w;
        l["bias"] = std::vector<float>(layer.bias.data(), layer.bias.data() + layer.bias.size());
        layers.push_back(std::move(l));
    }
    j["layers"] = std::move(layers);
    return j.dump() + "\n";
}

EncoderParams encoder_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    EncoderParams params;
    const std::string act = j.at("activation").get<std::string>();
    if (act == "relu")
        params.activation = Activation::relu;
    else if (act == "silu")
        params.activation = Activation::silu;
    else
        fail("encoder json: unknown activation '" + act + "'");
    const json& layout = j.at("layout");
    params.layout.use_base = layout.at("use_base").get<bool>();
    params.layout.extra_channels = layout.at("extra_channels").get<int>();
    params.layout.use_offsets = layout.at("use_offsets").get<bool>();
    for (const auto& l : j.at("layers")) {
        EncoderLayer layer;
        const int rows = l.at("rows").get<int>();
        const int cols = l.at("cols").get<int>();
        const auto w = l.at("weights").get<std::vector<float>>();
        const auto b = l.at("bias").get<std::vector<float>>();
        if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows)
            fail("encoder json: weight block size mismatch");
        layer.weight.resize(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) layer.weight(r, c) = w[static_cast<size_t>(r) * cols + c];
        layer.bias = Eigen::Map<const Eigen::VectorXf>(b.data(), rows);
        params.layers.push_back(std::move(layer));
    }
    params.validate();
    return params;
}

std::string grid_to_json_text(const PillarGrid& grid) {
    json j;
    j["x_min"] = grid.x_min;
    j["x_max"] = grid.x_max;
    j["y_min"] = grid.y_min;
    j["y_max"] = grid.y_max;
    j["nx"] = grid.nx;
    j["ny"] = grid.ny;
    return j.dump(2) + "\n";
}

PillarGrid grid_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    return PillarGrid::from_bounds(j.at("x_min").get<double>(), j.at("x_max").get<double>(),
                                   j.at("y_min").get<double>(), j.at("y_max").get<double>(),
                                   j.at("nx").get<int>(), j.at("ny").get<int>());
}

}  // namespace fusionkit::voxel
