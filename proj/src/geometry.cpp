#include "fusionkit/geometry.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fusionkit::geometry {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

bool Mat3::is_rotation(double tol) const {
    const Mat3 t = transposed();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += t(r, k) * (*this)(k, c);
            const double expect = (r == c) ? 1.0 : 0.0;
            if (std::abs(acc - expect) > tol) return false;
        }
    }
    return std::abs(determinant() - 1.0) <= tol;
}

void CameraModel::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) fail("camera: focal lengths must be positive");
    if (!std::isfinite(cx) || !std::isfinite(cy)) fail("camera: principal point not finite");
    if (width <= 0 || height <= 0) fail("camera: image dimensions must be positive");
    if (!translation.finite()) fail("camera: translation not finite");
    if (!rotation.is_rotation()) fail("camera: extrinsic rotation is not orthonormal with det +1");
}

FeatureMap FeatureMap::zeros(int width, int height, int channels, double scale) {
    FeatureMap fm;
    fm.width = width;
    fm.height = height;
    fm.channels = channels;
    fm.scale = scale;
    fm.data.assign(static_cast<size_t>(width) * height * channels, 0.0f);
    fm.validate();
    return fm;
}

void FeatureMap::validate() const {
    if (width <= 0 || height <= 0 || channels <= 0) fail("feature map: dimensions must be positive");
    if (!(scale > 0.0)) fail("feature map: scale must be positive");
    if (data.size() != static_cast<size_t>(width) * height * channels)
        fail("feature map: data length does not match height*width*channels");
}

Vec3 rotate_z(const Vec3& p, double theta) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    return {p.x * c - p.y * s, p.x * s + p.y * c, p.z};
}

std::optional<Pixel> project_to_image(const Vec3& p_world, const CameraModel& cam) {
    const Vec3 p_cam = cam.rotation.apply(p_world) + cam.translation;
    if (p_cam.z <= kDepthEpsilon) return std::nullopt;
    const double u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    const double v = cam.fy * p_cam.y / p_cam.z + cam.cy;
    if (u < 0.0 || u >= cam.width || v < 0.0 || v >= cam.height) return std::nullopt;
    return Pixel{u, v};
}

std::vector<float> bilinear_sample(const FeatureMap& fm, double u, double v) {
    fm.validate();
    if (u < 0.0 || u >= fm.pixel_width() || v < 0.0 || v >= fm.pixel_height())
        fail("bilinear_sample: pixel outside feature map bounds");

    // Cell-center coordinates; clamped so border samples reuse the edge cells.
    const double gx = std::clamp(u / fm.scale - 0.5, 0.0, static_cast<double>(fm.width - 1));
    const double gy = std::clamp(v / fm.scale - 0.5, 0.0, static_cast<double>(fm.height - 1));
    const int x0 = std::min(static_cast<int>(gx), fm.width - 1);
    const int y0 = std::min(static_cast<int>(gy), fm.height - 1);
    const int x1 = std::min(x0 + 1, fm.width - 1);
    const int y1 = std::min(y0 + 1, fm.height - 1);
    const double tx = gx - x0;
    const double ty = gy - y0;

    const auto c00 = fm.cell(x0, y0);
    const auto c10 = fm.cell(x1, y0);
    const auto c01 = fm.cell(x0, y1);
    const auto c11 = fm.cell(x1, y1);

    std::vector<float> out(static_cast<size_t>(fm.channels));
    for (int c = 0; c < fm.channels; ++c) {
        const double top = (1.0 - tx) * c00[c] + tx * c10[c];
        const double bot = (1.0 - tx) * c01[c] + tx * c11[c];
        out[static_cast<size_t>(c)] = static_cast<float>((1.0 - ty) * top + ty * bot);
    }
    return out;
}

// --- serialization ----------------------------------------------------------

std::string camera_to_json_text(const CameraModel& cam) {
    json j;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["rotation"] = cam.rotation.m;
    j["translation"] = {cam.translation.x, cam.translation.y, cam.translation.z};
    return j.dump(2) + "\n";
}

CameraModel camera_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    CameraModel cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    const auto rot = j.at("rotation").get<std::vector<double>>();
    if (rot.size() != 9) fail("camera json: rotation must hold 9 numbers");
    std::copy(rot.begin(), rot.end(), cam.rotation.m.begin());
    const auto t = j.at("translation").get<std::vector<double>>();
    if (t.size() != 3) fail("camera json: translation must hold 3 numbers");
    cam.translation = {t[0], t[1], t[2]};
    cam.validate();
    return cam;
}

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

CameraModel load_camera_json(const std::string& path) {
    return camera_from_json_text(read_text_file(path));
}

void save_camera_json(const CameraModel& cam, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out << camera_to_json_text(cam);
}

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("short write to " + path);
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
void append_raw(std::string& buf, const T& value) {
    const char* p = reinterpret_cast<const char*>(&value);
    buf.append(p, sizeof(T));
}

template <typename T>
T read_raw(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) fail("truncated binary file");
    T value;
    std::memcpy(&value, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return value;
}

struct PointRecord {
    double x, y, z, intensity;
    uint32_t frame;
};

std::vector<PointCloud> group_by_frame(const std::vector<PointRecord>& records) {
    std::vector<PointCloud> clouds;
    std::vector<uint32_t> frames;
    for (const auto& r : records)
        if (std::find(frames.begin(), frames.end(), r.frame) == frames.end())
            frames.push_back(r.frame);
    std::sort(frames.begin(), frames.end());
    for (uint32_t f : frames) {
        PointCloud cloud;
        cloud.frame_id = static_cast<int>(f);
        for (const auto& r : records)
            if (r.frame == f) cloud.points.push_back({{r.x, r.y, r.z}, r.intensity});
        clouds.push_back(std::move(cloud));
    }
    return clouds;
}

}  // namespace

std::vector<PointCloud> load_point_clouds(const std::string& path) {
    std::vector<PointRecord> records;
    if (has_suffix(path, ".csv")) {
        std::ifstream in(path);
        if (!in) fail("cannot open " + path);
        std::string line;
        if (!std::getline(in, line)) fail("empty point cloud file " + path);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            PointRecord r{};
            char* end = nullptr;
            const char* s = line.c_str();
            r.x = std::strtod(s, &end);
            if (*end != ',') fail("malformed csv row in " + path);
            r.y = std::strtod(end + 1, &end);
            if (*end != ',') fail("malformed csv row in " + path);
            r.z = std::strtod(end + 1, &end);
            if (*end != ',') fail("malformed csv row in " + path);
            r.intensity = std::strtod(end + 1, &end);
            if (*end != ',') fail("malformed csv row in " + path);
            r.frame = static_cast<uint32_t>(std::strtoul(end + 1, &end, 10));
            records.push_back(r);
        }
    } else {
        const std::string bytes = read_file(path);
        size_t off = 0;
        if (bytes.size() < 8 || bytes.compare(0, 4, "PCLF") != 0)
            fail(path + " is not a PCLF file");
        off = 4;
        const auto count = read_raw<uint32_t>(bytes, off);
        records.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            PointRecord r{};
            r.x = read_raw<double>(bytes, off);
            r.y = read_raw<double>(bytes, off);
            r.z = read_raw<double>(bytes, off);
            r.intensity = read_raw<double>(bytes, off);
            r.frame = read_raw<uint32_t>(bytes, off);
            records.push_back(r);
        }
    }
    return group_by_frame(records);
}

void save_point_clouds(std::span<const PointCloud> clouds, const std::string& path) {
    size_t total = 0;
    for (const auto& c : clouds) total += c.points.size();

    if (has_suffix(path, ".csv")) {
        std::string buf = "x,y,z,intensity,frame\n";
        char line[192];
        for (const auto& c : clouds) {
            for (const auto& p : c.points) {
                std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,%.17g,%d\n", p.position.x,
                              p.position.y, p.position.z, p.intensity, c.frame_id);
                buf += line;
            }
        }
        write_file(path, buf);
        return;
    }

    std::string buf = "PCLF";
    append_raw(buf, static_cast<uint32_t>(total));
    for (const auto& c : clouds) {
        for (const auto& p : c.points) {
            append_raw(buf, p.position.x);
            append_raw(buf, p.position.y);
            append_raw(buf, p.position.z);
            append_raw(buf, p.intensity);
            append_raw(buf, static_cast<uint32_t>(c.frame_id));
        }
    }
    write_file(path, buf);
}

FeatureMap load_feature_map(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 4 || bytes.compare(0, 4, "FMAP") != 0) fail(path + " is not an FMAP file");
    size_t off = 4;
    FeatureMap fm;
    fm.width = static_cast<int>(read_raw<uint32_t>(bytes, off));
    fm.height = static_cast<int>(read_raw<uint32_t>(bytes, off));
    fm.channels = static_cast<int>(read_raw<uint32_t>(bytes, off));
    fm.scale = read_raw<double>(bytes, off);
    const size_t n = static_cast<size_t>(fm.width) * fm.height * fm.channels;
    fm.data.resize(n);
    for (size_t i = 0; i < n; ++i) fm.data[i] = read_raw<float>(bytes, off);
    fm.validate();
    return fm;
}

void save_feature_map(const FeatureMap& fm, const std::string& path) {
    fm.validate();
    std::string buf = "FMAP";
    append_raw(buf, static_cast<uint32_t>(fm.width));
    append_raw(buf, static_cast<uint32_t>(fm.height));
    append_raw(buf, static_cast<uint32_t>(fm.channels));
    append_raw(buf, fm.scale);
    for (float f : fm.data) append_raw(buf, f);
    write_file(path, buf);
}

}  // namespace fusionkit::geometry
