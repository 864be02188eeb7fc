#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fusionkit::geometry {

// World frame: x forward, y left, z up. Units are meters.
struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    bool finite() const {
        return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
    }
};

// Row-major 3x3 matrix, just enough for camera extrinsics.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    double operator()(int r, int c) const { return m[static_cast<size_t>(r) * 3 + c]; }
    double& operator()(int r, int c) { return m[static_cast<size_t>(r) * 3 + c]; }

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 transposed() const {
        Mat3 t;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
        return t;
    }
    double determinant() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
    // True when R^T R = I and det = +1, both to `tol`.
    bool is_rotation(double tol = 1e-9) const;
};

struct LidarPoint {
    Vec3 position;
    double intensity = 0.0;  // reflectance in [0, 1]
};

struct PointCloud {
    std::vector<LidarPoint> points;
    int frame_id = 0;  // 0 = current acquisition, k = k frames in the past

    size_t size() const { return points.size(); }
};

struct Pixel {
    double u = 0.0;
    double v = 0.0;
};

// Pinhole camera: intrinsics in pixels plus a world-to-camera rigid transform.
// Camera frame: z forward, x right, y down.
struct CameraModel {
    double fx = 0.0, fy = 0.0;
    double cx = 0.0, cy = 0.0;
    Mat3 rotation;     // world -> camera
    Vec3 translation;  // world -> camera
    int width = 0, height = 0;

    // Throws std::invalid_argument when intrinsics or extrinsics are malformed.
    void validate() const;
};

// Dense 2D grid of feature vectors. `scale` is pixels per cell; the center of
// cell (ix, iy) corresponds to pixel ((ix + 0.5) * scale, (iy + 0.5) * scale).
struct FeatureMap {
    int width = 0;   // cells
    int height = 0;  // cells
    int channels = 0;
    double scale = 1.0;           // pixels per cell
    std::vector<float> data;      // row-major, height x width x channels

    static FeatureMap zeros(int width, int height, int channels, double scale = 1.0);

    std::span<const float> cell(int ix, int iy) const {
        return {data.data() + (static_cast<size_t>(iy) * width + ix) * channels,
                static_cast<size_t>(channels)};
    }
    std::span<float> cell(int ix, int iy) {
        return {data.data() + (static_cast<size_t>(iy) * width + ix) * channels,
                static_cast<size_t>(channels)};
    }
    double pixel_width() const { return width * scale; }
    double pixel_height() const { return height * scale; }

    void validate() const;
};

// Points at camera-plane depth below this are treated as behind the camera.
inline constexpr double kDepthEpsilon = 1e-6;

Vec3 rotate_z(const Vec3& p, double theta);

// World point -> pixel. Absent when the point is behind the camera plane or
// projects outside [0, width) x [0, height).
std::optional<Pixel> project_to_image(const Vec3& p_world, const CameraModel& cam);

// Bilinear read of the feature map at a pixel location. (u, v) must lie inside
// the map's pixel bounds; cell coordinates are clamped to [0, dim - 1] so
// samples near the border degrade to nearest-cell.
std::vector<float> bilinear_sample(const FeatureMap& fm, double u, double v);

// --- serialization ---------------------------------------------------------

// Calibration JSON: fx, fy, cx, cy, width, height, rotation (9 row-major
// numbers), translation (3 numbers).
CameraModel load_camera_json(const std::string& path);
void save_camera_json(const CameraModel& cam, const std::string& path);
CameraModel camera_from_json_text(const std::string& text);
std::string camera_to_json_text(const CameraModel& cam);

// Point cloud container, either CSV (header x,y,z,intensity,frame) or the
// little-endian PCLF binary (magic "PCLF", u32 count, then 4xf64 + u32 per
// point). Format picked by file extension: ".csv" => CSV, anything else PCLF.
// A file may carry several frames; clouds come back grouped by frame_id in
// ascending order, point order within a frame preserved.
std::vector<PointCloud> load_point_clouds(const std::string& path);
void save_point_clouds(std::span<const PointCloud> clouds, const std::string& path);

// FeatureMap binary: magic "FMAP", u32 width, u32 height, u32 channels,
// f64 scale, then f32 data.
FeatureMap load_feature_map(const std::string& path);
void save_feature_map(const FeatureMap& fm, const std::string& path);

}  // namespace fusionkit::geometry
