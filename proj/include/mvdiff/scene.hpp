#pragma once

#include <array>
#include <string>
#include <vector>

#include "mvdiff/rng.hpp"
#include "mvdiff/video.hpp"

namespace mvdiff {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

Vec3 mat3_apply(const Mat3& m, const Vec3& v);
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_transpose(const Mat3& m);
Mat3 mat3_identity();
Mat3 rot_z(double angle);
bool is_rotation(const Mat3& m, double tol = 1e-9);  // orthonormal with det +1

// Pinhole camera. `rotation`/`translation` map ego-frame points to camera
// coordinates (q = R p + t); camera axes are x right, y down, z forward.
struct CameraPose {
    Mat3 rotation = mat3_identity();
    Vec3 translation{0, 0, 0};
    double fx = 50, fy = 50, cx = 0, cy = 0;
    int width = 0, height = 0;  // image size in pixels

    void validate() const;
};

// Binary BEV raster centered on the ego vehicle. Cell (gx, gy) covers the
// ego-frame point x = (gx - cells_x/2 + 0.5) * meters_per_cell,
// y = (gy - cells_y/2 + 0.5) * meters_per_cell; layout is [gy][gx][channel].
struct RoadMapRaster {
    int cells_x = 0, cells_y = 0, channels = 0;
    double meters_per_cell = 1.0;
    std::vector<uint8_t> grid;  // 0/1

    uint8_t at(int gy, int gx, int ch) const {
        return grid[(static_cast<size_t>(gy) * cells_x + gx) * channels + ch];
    }
};

// 8 corners in the ego LiDAR frame, row-major 8x3. Corner i carries sign
// pattern (i&1 -> +x, i&2 -> +y, i&4 -> +z) of the local box axes.
struct Box3D {
    std::array<double, 24> corners{};
    int class_id = 0;

    Vec3 corner(int i) const { return {corners[i * 3], corners[i * 3 + 1], corners[i * 3 + 2]}; }
    Vec3 center() const;
    // opposite corners must mirror through the center (parallelepiped)
    bool valid_cuboid(double tol = 1e-6) const;
};

Box3D make_box(const Vec3& center, const Vec3& size, double yaw, int class_id);

struct TrackedBox {
    int object_id = 0;
    Box3D box;
};

// Rigid transform from the frame-t LiDAR frame to the frame-0 LiDAR frame.
struct EgoTransform {
    Mat3 rotation = mat3_identity();
    Vec3 translation{0, 0, 0};

    void validate() const;
    bool is_identity(double tol = 1e-12) const;
};

struct TextPrompt {
    std::vector<std::string> tokens;
};

struct SceneFrame {
    std::vector<CameraPose> cameras;  // fixed across the clip
    RoadMapRaster map;
    std::vector<TrackedBox> boxes;
    TextPrompt text;
    EgoTransform ego;
};

using Scene = std::vector<SceneFrame>;

Box3D apply_ego_transform(const Box3D& box, const EgoTransform& tr);

struct ProjectedBox {
    std::array<std::array<double, 2>, 8> px;  // (u, v) per corner
    std::array<double, 8> depth;
    bool visible = false;  // any corner with positive depth inside the image
};

ProjectedBox project_box(const Box3D& box, const CameraPose& cam);

// difficulty knobs for the procedural generator
struct SceneSpec {
    int min_boxes = 1;
    int max_boxes = 3;
    double scene_radius = 24.0;  // meters; also the encoder normalization radius
    int map_cells = 48;
    int map_channels = 4;
    double meters_per_cell = 1.0;
    int image_width = 56;
    int image_height = 32;
    double focal_px = 48.0;
    double box_speed_max = 2.0;  // m/s
    double ego_speed_max = 3.0;
    double fps = 4.0;
    int num_classes = 3;
};

Scene synth_scene(uint64_t seed, int64_t frames, int views, const SceneSpec& spec = {});

// Deterministic renderer: map bands at low intensity on the ground plane,
// visible boxes filled with class colors, text tokens shift brightness.
VideoClip rasterize(const Scene& scene, int view);
VideoClip rasterize_all(const Scene& scene);

// weather/time vocabulary used by generator and text encoder
const std::vector<std::string>& text_vocabulary();
double weather_brightness(const std::string& token);

// structured-text (JSON) clip serialization; schema documented in README
std::string scene_to_json(const Scene& scene, double fps);
Scene scene_from_json(const std::string& text, double* fps_out = nullptr);
void save_scene(const Scene& scene, double fps, const std::string& path);
Scene load_scene(const std::string& path, double* fps_out = nullptr);

}  // namespace mvdiff
