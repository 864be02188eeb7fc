#include "fusionkit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fusionkit::augment {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

bool in_unit(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void AugConfig::validate() const {
    if (!(max_rotation >= 0.0) || !std::isfinite(max_rotation))
        fail("aug config: max_rotation must be finite and >= 0");
    if (!(scale_lo > 0.0) || !(scale_lo <= scale_hi) || !std::isfinite(scale_hi))
        fail("aug config: scale range needs 0 < lo <= hi");
    if (!translate_sigma.finite() || translate_sigma.x < 0 || translate_sigma.y < 0 ||
        translate_sigma.z < 0)
        fail("aug config: translate_sigma must be finite and nonnegative");
    if (!in_unit(flip_probability)) fail("aug config: flip_probability must be in [0,1]");
    if (!in_unit(frustum_drop_p)) fail("aug config: frustum_drop_p must be in [0,1]");
    if (!in_unit(drop_keep_p)) fail("aug config: drop_keep_p must be in [0,1]");
    if (!(frustum_az_width >= 0.0) || !(frustum_incl_width >= 0.0))
        fail("aug config: frustum widths must be >= 0");
}

Vec3 apply_geometric_point(const Vec3& p, const GeometricOp& op) {
    return std::visit(
        [&](const auto& o) -> Vec3 {
            using T = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<T, RotateZ>) {
                return geometry::rotate_z(p, o.theta);
            } else if constexpr (std::is_same_v<T, WorldScale>) {
                return p * o.s;
            } else if constexpr (std::is_same_v<T, Translate>) {
                return p + o.t;
            } else {
                return o.applied ? Vec3{p.x, -p.y, p.z} : p;
            }
        },
        op);
}

PointCloud apply_geometric(const PointCloud& points, const GeometricOp& op) {
    PointCloud out = points;
    for (auto& p : out.points) p.position = apply_geometric_point(p.position, op);
    return out;
}

Vec3 invert_geometric(const Vec3& p, const GeometricOp& op) {
    return std::visit(
        [&](const auto& o) -> Vec3 {
            using T = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<T, RotateZ>) {
                return geometry::rotate_z(p, -o.theta);
            } else if constexpr (std::is_same_v<T, WorldScale>) {
                return p * (1.0 / o.s);
            } else if constexpr (std::is_same_v<T, Translate>) {
                return p - o.t;
            } else {
                return o.applied ? Vec3{p.x, -p.y, p.z} : p;  // self-inverse
            }
        },
        op);
}

PointCloud apply_record(const PointCloud& points, const AugRecord& record) {
    PointCloud out = points;
    for (const auto& op : record.ops)
        for (auto& p : out.points) p.position = apply_geometric_point(p.position, op);
    return out;
}

Vec3 inverse_aug(const Vec3& p, const AugRecord& record) {
    Vec3 q = p;
    for (auto it = record.ops.rbegin(); it != record.ops.rend(); ++it)
        q = invert_geometric(q, *it);
    return q;
}

namespace {

// Azimuth membership with 2*pi wraparound so intervals sampled near the seam
// still cover it.
bool azimuth_inside(double az, double lo, double hi) {
    return (az >= lo && az <= hi) || (az + 2 * kPi >= lo && az + 2 * kPi <= hi) ||
           (az - 2 * kPi >= lo && az - 2 * kPi <= hi);
}

bool inside_frustum(const Vec3& p, const FrustumParams& f) {
    const double az = std::atan2(p.y, p.x);
    const double r = p.norm();
    const double incl = r > 0.0 ? std::acos(std::clamp(p.z / r, -1.0, 1.0)) : 0.0;
    return azimuth_inside(az, f.az_min, f.az_max) && incl >= f.incl_min && incl <= f.incl_max;
}

std::vector<char> frustum_keep_mask(const PointCloud& points, const FrustumParams& params,
                                    Rng& rng) {
    std::vector<char> keep(points.size(), 1);
    for (size_t i = 0; i < points.size(); ++i)
        if (inside_frustum(points.points[i].position, params) && rng.bernoulli(params.drop_p))
            keep[i] = 0;
    return keep;
}

std::vector<char> random_keep_mask(size_t n, double keep_p, Rng& rng) {
    std::vector<char> keep(n, 0);
    for (size_t i = 0; i < n; ++i) keep[i] = rng.bernoulli(keep_p) ? 1 : 0;
    return keep;
}

PointCloud filter_cloud(const PointCloud& points, const std::vector<char>& keep) {
    PointCloud out;
    out.frame_id = points.frame_id;
    for (size_t i = 0; i < points.size(); ++i)
        if (keep[i]) out.points.push_back(points.points[i]);
    return out;
}

}  // namespace

PointCloud frustum_dropout(const PointCloud& points, const FrustumParams& params, Rng& rng) {
    if (!in_unit(params.drop_p)) fail("frustum_dropout: drop_p must be in [0,1]");
    return filter_cloud(points, frustum_keep_mask(points, params, rng));
}

PointCloud random_drop_points(const PointCloud& points, double keep_p, Rng& rng) {
    if (!in_unit(keep_p)) fail("random_drop_points: keep_p must be in [0,1]");
    return filter_cloud(points, random_keep_mask(points.size(), keep_p, rng));
}

PointCloud drop_frames(std::span<const PointCloud> frames, double drop_p, Rng& rng,
                       bool training) {
    if (frames.empty()) fail("drop_frames: frame list is empty");
    bool has_current = false;
    for (const auto& f : frames) has_current |= (f.frame_id == 0);
    if (!has_current) fail("drop_frames: frame 0 missing");
    if (!in_unit(drop_p)) fail("drop_frames: drop_p must be in [0,1]");

    PointCloud out;
    out.frame_id = 0;
    for (const auto& f : frames) {
        const bool dropped = training && f.frame_id > 0 && rng.bernoulli(drop_p);
        if (dropped) continue;
        out.points.insert(out.points.end(), f.points.begin(), f.points.end());
    }
    return out;
}

PipelineResult apply_pipeline(const PointCloud& points, const AugConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);

    PipelineResult result;
    result.cloud = points;
    result.source_indices.resize(points.size());
    std::iota(result.source_indices.begin(), result.source_indices.end(), 0);

    auto apply_and_record = [&](const GeometricOp& op) {
        result.cloud = apply_geometric(result.cloud, op);
        result.record.ops.push_back(op);
    };

    if (cfg.rotation_enabled)
        apply_and_record(RotateZ{rng.uniform(-cfg.max_rotation, cfg.max_rotation)});
    if (cfg.scale_enabled) apply_and_record(WorldScale{rng.uniform(cfg.scale_lo, cfg.scale_hi)});
    if (cfg.translate_enabled)
        apply_and_record(Translate{{rng.gaussian(cfg.translate_sigma.x),
                                    rng.gaussian(cfg.translate_sigma.y),
                                    rng.gaussian(cfg.translate_sigma.z)}});
    if (cfg.flip_enabled) apply_and_record(FlipY{rng.bernoulli(cfg.flip_probability)});

    auto drop_with_mask = [&](const std::vector<char>& keep) {
        std::vector<int32_t> surviving;
        for (size_t i = 0; i < keep.size(); ++i)
            if (keep[i]) surviving.push_back(result.source_indices[i]);
        result.cloud = filter_cloud(result.cloud, keep);
        result.source_indices = std::move(surviving);
    };

    if (cfg.frustum_enabled) {
        FrustumParams f;
        const double az_center = rng.uniform(-kPi, kPi);
        const double incl_center = rng.uniform(0.0, kPi);
        f.az_min = az_center - cfg.frustum_az_width / 2.0;
        f.az_max = az_center + cfg.frustum_az_width / 2.0;
        f.incl_min = std::max(0.0, incl_center - cfg.frustum_incl_width / 2.0);
        f.incl_max = std::min(kPi, incl_center + cfg.frustum_incl_width / 2.0);
        f.drop_p = cfg.frustum_drop_p;
        drop_with_mask(frustum_keep_mask(result.cloud, f, rng));
    }
    if (cfg.drop_enabled)
        drop_with_mask(random_keep_mask(result.cloud.size(), cfg.drop_keep_p, rng));

    return result;
}

// --- serialization ----------------------------------------------------------

namespace {

json op_to_json(const GeometricOp& op) {
    json j;
    std::visit(
        [&](const auto& o) {
            using T = std::decay_t<decltype(o)>;
            if constexpr (std::is_same_v<T, RotateZ>) {
                j["op"] = "rotate_z";
                j["params"] = {{"theta", o.theta}};
            } else if constexpr (std::is_same_v<T, WorldScale>) {
                j["op"] = "world_scale";
                j["params"] = {{"scale", o.s}};
            } else if constexpr (std::is_same_v<T, Translate>) {
                j["op"] = "translate";
                j["params"] = {{"t", {o.t.x, o.t.y, o.t.z}}};
            } else {
                j["op"] = "flip_y";
                j["params"] = {{"applied", o.applied}};
            }
        },
        op);
    return j;
}

GeometricOp op_from_json(const json& j) {
    const std::string name = j.at("op").get<std::string>();
    const json& p = j.at("params");
    if (name == "rotate_z") return RotateZ{p.at("theta").get<double>()};
    if (name == "world_scale") {
        const double s = p.at("scale").get<double>();
        if (!(s > 0.0)) fail("record json: world_scale needs scale > 0");
        return WorldScale{s};
    }
    if (name == "translate") {
        const auto t = p.at("t").get<std::vector<double>>();
        if (t.size() != 3) fail("record json: translate needs 3 numbers");
        return Translate{{t[0], t[1], t[2]}};
    }
    if (name == "flip_y") return FlipY{p.at("applied").get<bool>()};
    fail("record json: unknown op '" + name + "'");
}

}  // namespace

std::string record_to_json_text(const AugRecord& record) {
    json arr = json::array();
    for (const auto& op : record.ops) arr.push_back(op_to_json(op));
    return arr.dump(2) + "\n";
}

AugRecord record_from_json_text(const std::string& text) {
    const json arr = json::parse(text);
    if (!arr.is_array()) fail("record json: top level must be an array");
    AugRecord record;
    for (const auto& j : arr) record.ops.push_back(op_from_json(j));
    return record;
}

void save_record_json(const AugRecord& record, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out << record_to_json_text(record);
}

AugRecord load_record_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return record_from_json_text(ss.str());
}

std::string config_to_json_text(const AugConfig& cfg) {
    json j;
    j["rotation_enabled"] = cfg.rotation_enabled;
    j["max_rotation"] = cfg.max_rotation;
    j["scale_enabled"] = cfg.scale_enabled;
    j["scale_lo"] = cfg.scale_lo;
    j["scale_hi"] = cfg.scale_hi;
    j["translate_enabled"] = cfg.translate_enabled;
    j["translate_sigma"] = {cfg.translate_sigma.x, cfg.translate_sigma.y, cfg.translate_sigma.z};
    j["flip_enabled"] = cfg.flip_enabled;
    j["flip_probability"] = cfg.flip_probability;
    j["frustum_enabled"] = cfg.frustum_enabled;
    j["frustum_az_width"] = cfg.frustum_az_width;
    j["frustum_incl_width"] = cfg.frustum_incl_width;
    j["frustum_drop_p"] = cfg.frustum_drop_p;
    j["drop_enabled"] = cfg.drop_enabled;
    j["drop_keep_p"] = cfg.drop_keep_p;
    return j.dump(2) + "\n";
}

AugConfig config_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    AugConfig cfg;
    cfg.rotation_enabled = j.value("rotation_enabled", cfg.rotation_enabled);
    cfg.max_rotation = j.value("max_rotation", cfg.max_rotation);
    cfg.scale_enabled = j.value("scale_enabled", cfg.scale_enabled);
    cfg.scale_lo = j.value("scale_lo", cfg.scale_lo);
    cfg.scale_hi = j.value("scale_hi", cfg.scale_hi);
    cfg.translate_enabled = j.value("translate_enabled", cfg.translate_enabled);
    if (j.contains("translate_sigma")) {
        const auto s = j.at("translate_sigma").get<std::vector<double>>();
        if (s.size() != 3) fail("aug config json: translate_sigma needs 3 numbers");
        cfg.translate_sigma = {s[0], s[1], s[2]};
    }
    cfg.flip_enabled = j.value("flip_enabled", cfg.flip_enabled);
    cfg.flip_probability = j.value("flip_probability", cfg.flip_probability);
    cfg.frustum_enabled = j.value("frustum_enabled", cfg.frustum_enabled);
    cfg.frustum_az_width = j.value("frustum_az_width", cfg.frustum_az_width);
    cfg.frustum_incl_width = j.value("frustum_incl_width", cfg.frustum_incl_width);
    cfg.frustum_drop_p = j.value("frustum_drop_p", cfg.frustum_drop_p);
    cfg.drop_enabled = j.value("drop_enabled", cfg.drop_enabled);
    cfg.drop_keep_p = j.value("drop_keep_p", cfg.drop_keep_p);
    cfg.validate();
    return cfg;
}

}  // namespace fusionkit::augment
