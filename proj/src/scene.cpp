#include "mvdiff/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace mvdiff {

using json = nlohmann::ordered_json;

// ---- small linear algebra -------------------------------------------------

Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            r[i * 3 + j] = s;
        }
    return r;
}

Mat3 mat3_transpose(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 rot_z(double a) {
    double c = std::cos(a), s = std::sin(a);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

bool is_rotation(const Mat3& m, double tol) {
    Mat3 mt = mat3_transpose(m);
    Mat3 id = mat3_mul(mt, m);
    Mat3 eye = mat3_identity();
    for (int i = 0; i < 9; ++i)
        if (std::fabs(id[i] - eye[i]) > tol) return false;
    double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                 m[2] * (m[3] * m[7] - m[4] * m[6]);
    return std::fabs(det - 1.0) <= 1e-6;
}

void CameraPose::validate() const {
    if (!is_rotation(rotation)) throw TensorError("camera: rotation is not orthonormal");
    if (fx <= 0 || fy <= 0 || width <= 0 || height <= 0)
        throw TensorError("camera: invalid intrinsics or image size");
}

Vec3 Box3D::center() const {
    Vec3 c{0, 0, 0};
    for (int i = 0; i < 8; ++i)
        for (int k = 0; k < 3; ++k) c[k] += corners[i * 3 + k] / 8.0;
    return c;
}

bool Box3D::valid_cuboid(double tol) const {
    Vec3 c = center();
    for (int i = 0; i < 4; ++i) {
        for (int k = 0; k < 3; ++k) {
            double mid = corners[i * 3 + k] + corners[(7 - i) * 3 + k];
            if (std::fabs(mid - 2.0 * c[k]) > tol) return false;
        }
    }
    return true;
}

Box3D make_box(const Vec3& center, const Vec3& size, double yaw, int class_id) {
    Box3D b;
    b.class_id = class_id;
    Mat3 r = rot_z(yaw);
    for (int i = 0; i < 8; ++i) {
        Vec3 local{(i & 1 ? 0.5 : -0.5) * size[0], (i & 2 ? 0.5 : -0.5) * size[1],
                   (i & 4 ? 0.5 : -0.5) * size[2]};
        Vec3 w = mat3_apply(r, local);
        for (int k = 0; k < 3; ++k) b.corners[i * 3 + k] = w[k] + center[k];
    }
    return b;
}

void EgoTransform::validate() const {
    if (!is_rotation(rotation)) throw TensorError("ego transform: rotation is not orthonormal");
}

bool EgoTransform::is_identity(double tol) const {
    Mat3 eye = mat3_identity();
    for (int i = 0; i < 9; ++i)
        if (std::fabs(rotation[i] - eye[i]) > tol) return false;
    for (int k = 0; k < 3; ++k)
        if (std::fabs(translation[k]) > tol) return false;
    return true;
}

Box3D apply_ego_transform(const Box3D& box, const EgoTransform& tr) {
    tr.validate();
    Box3D out;
    out.class_id = box.class_id;
    for (int i = 0; i < 8; ++i) {
        Vec3 p = box.corner(i);
        Vec3 q = mat3_apply(tr.rotation, p);
        for (int k = 0; k < 3; ++k) out.corners[i * 3 + k] = q[k] + tr.translation[k];
    }
    return out;
}

ProjectedBox project_box(const Box3D& box, const CameraPose& cam) {
    cam.validate();
    ProjectedBox out;
    for (int i = 0; i < 8; ++i) {
        Vec3 q = mat3_apply(cam.rotation, box.corner(i));
        for (int k = 0; k < 3; ++k) q[k] += cam.translation[k];
        out.depth[i] = q[2];
        if (q[2] > 1e-9) {
            out.px[i] = {cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy};
        } else {
            out.px[i] = {0.0, 0.0};
        }
        if (q[2] > 1e-9 && out.px[i][0] >= 0 && out.px[i][0] < cam.width && out.px[i][1] >= 0 &&
            out.px[i][1] < cam.height)
            out.visible = true;
    }
    return out;
}

// ---- procedural scenes ------------------------------------------------------

const std::vector<std::string>& text_vocabulary() {
    static const std::vector<std::string> vocab{"sunny", "cloudy", "rainy", "foggy",
                                                "night", "day",    "dusk"};
    return vocab;
}

double weather_brightness(const std::string& token) {
    if (token == "sunny") return 0.05;
    if (token == "cloudy") return -0.02;
    if (token == "rainy") return -0.05;
    if (token == "foggy") return -0.03;
    if (token == "night") return -0.12;
    if (token == "dusk") return -0.06;
    return 0.0;  // "day" and unknown tokens
}

namespace {

struct RoadLayout {
    double theta;    // road direction
    double y0;       // lateral offset of the center line
    double half_w;   // half road width
    double cross_l;  // crossing stripe position along the road
};

// analytic frame-0 map features, sampled into per-frame rasters
void fill_map(RoadMapRaster& m, const RoadLayout& road, const EgoTransform& ego,
              const SceneSpec& spec) {
    m.cells_x = spec.map_cells;
    m.cells_y = spec.map_cells;
    m.channels = spec.map_channels;
    m.meters_per_cell = spec.meters_per_cell;
    m.grid.assign(static_cast<size_t>(m.cells_x) * m.cells_y * m.channels, 0);
    double ct = std::cos(road.theta), st = std::sin(road.theta);
    for (int gy = 0; gy < m.cells_y; ++gy) {
        for (int gx = 0; gx < m.cells_x; ++gx) {
            Vec3 pt{(gx - m.cells_x / 2 + 0.5) * m.meters_per_cell,
                    (gy - m.cells_y / 2 + 0.5) * m.meters_per_cell, 0.0};
            Vec3 p0 = mat3_apply(ego.rotation, pt);
            for (int k = 0; k < 3; ++k) p0[k] += ego.translation[k];
            double d = -p0[0] * st + (p0[1] - road.y0) * ct;  // lateral
            double l = p0[0] * ct + (p0[1] - road.y0) * st;   // longitudinal
            uint8_t* cell =
                m.grid.data() + (static_cast<size_t>(gy) * m.cells_x + gx) * m.channels;
            if (std::fabs(d) <= road.half_w) cell[0] = 1;
            if (m.channels > 1 &&
                (std::fabs(d) <= 0.15 || std::fabs(std::fabs(d) - road.half_w / 2) <= 0.15))
                cell[1] = 1;
            if (m.channels > 2 && std::fabs(l - road.cross_l) <= 1.2 &&
                std::fabs(d) <= road.half_w)
                cell[2] = 1;
            if (m.channels > 3 && std::fabs(d) > road.half_w &&
                std::fabs(d) <= road.half_w + 0.5)
                cell[3] = 1;
        }
    }
}

CameraPose make_camera(double yaw, const SceneSpec& spec) {
    CameraPose cam;
    double c = std::cos(yaw), s = std::sin(yaw);
    // rows: right, down, forward (ego x forward, y left, z up)
    cam.rotation = {s, -c, 0, 0, 0, -1, c, s, 0};
    Vec3 pos{0.8, 0.0, 1.6};
    Vec3 rp = mat3_apply(cam.rotation, pos);
    cam.translation = {-rp[0], -rp[1], -rp[2]};
    cam.fx = cam.fy = spec.focal_px;
    cam.width = spec.image_width;
    cam.height = spec.image_height;
    cam.cx = spec.image_width / 2.0;
    cam.cy = spec.image_height / 2.0;
    return cam;
}

struct BoxTrack {
    int class_id;
    Vec3 size;
    Vec3 start;  // frame-0 coords
    double speed;
    double heading0, heading1;  // piecewise-linear velocity, switch at mid-clip
};

Vec3 track_position(const BoxTrack& trk, double t_sec, double switch_sec) {
    double t0 = std::min(t_sec, switch_sec);
    double t1 = std::max(0.0, t_sec - switch_sec);
    return {trk.start[0] + trk.speed * (t0 * std::cos(trk.heading0) + t1 * std::cos(trk.heading1)),
            trk.start[1] + trk.speed * (t0 * std::sin(trk.heading0) + t1 * std::sin(trk.heading1)),
            trk.start[2]};
}

}  // namespace

Scene synth_scene(uint64_t seed, int64_t frames, int views, const SceneSpec& spec) {
    if (frames < 1 || !(frames == 1 || frames % 8 == 0 || frames % 8 == 1))
        throw TensorError("synth_scene: frame count must be 1, 8n, or 8n+1; got " +
                          std::to_string(frames));
    if (views < 1) throw TensorError("synth_scene: need at least one view");
    Rng rng(seed, Rng::hash_str("synth-scene"));

    // per-clip text
    TextPrompt text;
    const auto& vocab = text_vocabulary();
    text.tokens.push_back(vocab[static_cast<size_t>(rng.uniform_int(0, 3))]);   // weather
    text.tokens.push_back(vocab[static_cast<size_t>(rng.uniform_int(4, 6))]);   // time of day

    // fixed camera rig
    std::vector<CameraPose> cameras;
    for (int v = 0; v < views; ++v) {
        double yaw = (v - (views - 1) / 2.0) * 0.6;
        cameras.push_back(make_camera(yaw, spec));
    }

    RoadLayout road;
    road.theta = rng.uniform(-0.25, 0.25);
    road.y0 = rng.uniform(-2.0, 2.0);
    road.half_w = rng.uniform(3.5, 6.0);
    road.cross_l = rng.uniform(8.0, 16.0);

    // ego motion: unicycle with constant speed and yaw rate
    double ego_speed = rng.uniform(0.3, 1.0) * spec.ego_speed_max;
    double yaw_rate = rng.uniform(-0.08, 0.08);
    double dt = 1.0 / spec.fps;

    // object tracks
    int n_boxes = static_cast<int>(rng.uniform_int(spec.min_boxes, spec.max_boxes));
    static const Vec3 class_sizes[3] = {{4.2, 1.9, 1.6}, {6.4, 2.5, 2.8}, {0.7, 0.7, 1.8}};
    std::vector<BoxTrack> tracks;
    for (int b = 0; b < n_boxes; ++b) {
        BoxTrack trk;
        trk.class_id = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
        Vec3 base = class_sizes[trk.class_id % 3];
        double jit = rng.uniform(0.9, 1.1);
        trk.size = {base[0] * jit, base[1] * jit, base[2] * jit};
        trk.start = {rng.uniform(7.0, 18.0), rng.uniform(-6.0, 6.0), trk.size[2] / 2.0};
        trk.speed = rng.uniform(0.2, spec.box_speed_max);
        trk.heading0 = rng.uniform(0.0, 2.0 * M_PI);
        trk.heading1 = trk.heading0 + rng.uniform(-0.6, 0.6);
        tracks.push_back(trk);
    }
    double switch_sec = frames / 2.0 * dt;

    Scene scene;
    scene.reserve(frames);
    Vec3 ego_pos{0, 0, 0};
    for (int64_t t = 0; t < frames; ++t) {
        double psi = yaw_rate * t * dt;
        EgoTransform ego;
        ego.rotation = t == 0 ? mat3_identity() : rot_z(psi);
        ego.translation = t == 0 ? Vec3{0, 0, 0} : ego_pos;

        SceneFrame frame;
        frame.cameras = cameras;
        frame.text = text;
        frame.ego = ego;
        fill_map(frame.map, road, ego, spec);

        Mat3 r_inv = mat3_transpose(ego.rotation);
        for (size_t b = 0; b < tracks.size(); ++b) {
            const BoxTrack& trk = tracks[b];
            Vec3 p0 = track_position(trk, t * dt, switch_sec);
            Vec3 rel{p0[0] - ego.translation[0], p0[1] - ego.translation[1],
                     p0[2] - ego.translation[2]};
            Vec3 pt = mat3_apply(r_inv, rel);
            double heading = t * dt < switch_sec ? trk.heading0 : trk.heading1;
            TrackedBox tb;
            tb.object_id = static_cast<int>(b);
            tb.box = make_box(pt, trk.size, heading - psi, trk.class_id);
            frame.boxes.push_back(tb);
        }
        scene.push_back(std::move(frame));

        // advance ego after recording the frame
        ego_pos[0] += ego_speed * dt * std::cos(psi);
        ego_pos[1] += ego_speed * dt * std::sin(psi);
    }
    return scene;
}

// ---- rasterizer ---------------------------------------------------------------

namespace {

using Pt = std::array<double, 2>;

double cross2(const Pt& o, const Pt& a, const Pt& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// monotone chain; returns CCW hull or empty when degenerate
std::vector<Pt> convex_hull(std::vector<Pt> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    size_t n = pts.size();
    if (n < 3) return {};
    std::vector<Pt> hull(2 * n);
    size_t k = 0;
    for (size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) k--;
        hull[k++] = pts[i];
    }
    size_t lower = k + 1;
    for (size_t i = n - 1; i-- > 0;) {
        while (k >= lower && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) k--;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull.size() >= 3 ? hull : std::vector<Pt>{};
}

bool inside_hull(const std::vector<Pt>& hull, const Pt& p) {
    for (size_t i = 0; i < hull.size(); ++i) {
        const Pt& a = hull[i];
        const Pt& b = hull[(i + 1) % hull.size()];
        if (cross2(a, b, p) < 0) return false;
    }
    return true;
}

struct Rgb {
    double r, g, b;
};

Rgb class_color(int cls) {
    switch (cls % 3) {
        case 0: return {0.95, 0.65, 0.40};
        case 1: return {0.45, 0.95, 0.55};
        default: return {0.95, 0.90, 0.45};
    }
}

}  // namespace

VideoClip rasterize(const Scene& scene, int view) {
    if (scene.empty()) throw TensorError("rasterize: empty scene");
    if (view < 0 || view >= static_cast<int>(scene[0].cameras.size()))
        throw TensorError("rasterize: view index out of range");
    const CameraPose& cam = scene[0].cameras[view];
    const int64_t T = static_cast<int64_t>(scene.size());
    const int64_t H = cam.height, W = cam.width;
    std::vector<double> out(T * H * W * 3, 0.0);

    Mat3 r_inv = mat3_transpose(cam.rotation);
    Vec3 origin =
        mat3_apply(r_inv, {-cam.translation[0], -cam.translation[1], -cam.translation[2]});

    for (int64_t t = 0; t < T; ++t) {
        const SceneFrame& fr = scene[t];
        double shift = 0.0;
        for (const auto& tok : fr.text.tokens) shift += weather_brightness(tok);

        double* img = out.data() + t * H * W * 3;
        for (int64_t v = 0; v < H; ++v) {
            for (int64_t u = 0; u < W; ++u) {
                Vec3 dc{(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0};
                Vec3 dw = mat3_apply(r_inv, dc);
                double r, g, b;
                double s = dw[2] < -1e-9 ? -origin[2] / dw[2] : -1.0;
                if (s > 0.0) {
                    r = 0.10, g = 0.10, b = 0.09;  // bare ground
                    double gx_m = origin[0] + s * dw[0];
                    double gy_m = origin[1] + s * dw[1];
                    const RoadMapRaster& m = fr.map;
                    int gx =
                        static_cast<int>(std::floor(gx_m / m.meters_per_cell + m.cells_x / 2.0));
                    int gy =
                        static_cast<int>(std::floor(gy_m / m.meters_per_cell + m.cells_y / 2.0));
                    if (gx >= 0 && gx < m.cells_x && gy >= 0 && gy < m.cells_y) {
                        static const Rgb band[4] = {{0.10, 0.10, 0.11},
                                                    {0.22, 0.22, 0.20},
                                                    {0.18, 0.10, 0.08},
                                                    {0.06, 0.10, 0.16}};
                        for (int ch = 0; ch < m.channels && ch < 4; ++ch) {
                            if (m.at(gy, gx, ch)) {
                                r += band[ch].r;
                                g += band[ch].g;
                                b += band[ch].b;
                            }
                        }
                    }
                } else {
                    // sky with a vertical gradient
                    double f = 1.0 - 0.3 * (static_cast<double>(v) / H);
                    r = 0.30 * f;
                    g = 0.34 * f;
                    b = 0.42 * f;
                }
                double* px = img + (v * W + u) * 3;
                px[0] = r;
                px[1] = g;
                px[2] = b;
            }
        }

        // boxes, far to near
        std::vector<std::pair<double, size_t>> order;
        for (size_t i = 0; i < fr.boxes.size(); ++i) {
            Vec3 c = fr.boxes[i].box.center();
            Vec3 q = mat3_apply(cam.rotation, c);
            order.push_back({q[2] + cam.translation[2], i});
        }
        std::stable_sort(order.begin(), order.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (const auto& [depth, bi] : order) {
            (void)depth;
            const Box3D& box = fr.boxes[bi].box;
            ProjectedBox pb = project_box(box, cam);
            std::vector<Pt> pts;
            for (int i = 0; i < 8; ++i)
                if (pb.depth[i] > 1e-6) pts.push_back(pb.px[i]);
            if (pts.size() < 3) continue;
            auto hull = convex_hull(pts);
            if (hull.empty()) continue;
            double u0 = W, u1 = 0, v0 = H, v1 = 0;
            for (const auto& p : hull) {
                u0 = std::min(u0, p[0]);
                u1 = std::max(u1, p[0]);
                v0 = std::min(v0, p[1]);
                v1 = std::max(v1, p[1]);
            }
            int iu0 = std::max(0, static_cast<int>(std::floor(u0)));
            int iu1 = std::min(static_cast<int>(W) - 1, static_cast<int>(std::ceil(u1)));
            int iv0 = std::max(0, static_cast<int>(std::floor(v0)));
            int iv1 = std::min(static_cast<int>(H) - 1, static_cast<int>(std::ceil(v1)));
            Rgb col = class_color(box.class_id);
            for (int v2 = iv0; v2 <= iv1; ++v2) {
                for (int u2 = iu0; u2 <= iu1; ++u2) {
                    if (!inside_hull(hull, {u2 + 0.5, v2 + 0.5})) continue;
                    double* px = img + (v2 * W + u2) * 3;
                    px[0] = col.r;
                    px[1] = col.g;
                    px[2] = col.b;
                }
            }
        }

        for (int64_t i = 0; i < H * W * 3; ++i) img[i] = std::clamp(img[i] + shift, 0.0, 1.0);
    }

    VideoClip clip;
    clip.pixels = Tensor({T, 1, H, W, 3}, std::move(out));
    return clip;
}

VideoClip rasterize_all(const Scene& scene) {
    if (scene.empty()) throw TensorError("rasterize: empty scene");
    const int64_t C = static_cast<int64_t>(scene[0].cameras.size());
    std::vector<Tensor> views;
    for (int64_t v = 0; v < C; ++v) views.push_back(rasterize(scene, static_cast<int>(v)).pixels);
    VideoClip clip;
    clip.pixels = concat(views, 1);
    return clip;
}

// ---- serialization --------------------------------------------------------------

namespace {

json mat3_json(const Mat3& m) { return std::vector<double>(m.begin(), m.end()); }
json vec3_json(const Vec3& v) { return std::vector<double>(v.begin(), v.end()); }

Mat3 mat3_from(const json& j) {
    if (!j.is_array() || j.size() != 9) throw TensorError("scene: rotation must have 9 entries");
    Mat3 m;
    for (int i = 0; i < 9; ++i) m[i] = j[i].get<double>();
    return m;
}

Vec3 vec3_from(const json& j) {
    if (!j.is_array() || j.size() != 3) throw TensorError("scene: vector must have 3 entries");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// run-length encoding: alternating zero/one run lengths, starting with zeros
std::vector<int64_t> rle_encode(const std::vector<uint8_t>& bits) {
    std::vector<int64_t> runs;
    uint8_t cur = 0;
    int64_t len = 0;
    for (uint8_t b : bits) {
        if (b == cur) {
            len++;
        } else {
            runs.push_back(len);
            cur = b;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

std::vector<uint8_t> rle_decode(const std::vector<int64_t>& runs, size_t expect) {
    std::vector<uint8_t> bits;
    bits.reserve(expect);
    uint8_t cur = 0;
    for (int64_t r : runs) {
        if (r < 0) throw TensorError("scene: negative RLE run");
        bits.insert(bits.end(), static_cast<size_t>(r), cur);
        cur = cur ? 0 : 1;
    }
    if (bits.size() != expect)
        throw TensorError("scene: RLE length " + std::to_string(bits.size()) +
                          " does not match raster size " + std::to_string(expect));
    return bits;
}

}  // namespace

std::string scene_to_json(const Scene& scene, double fps) {
    if (scene.empty()) throw TensorError("scene_to_json: empty scene");
    json j;
    j["format"] = "mvdiff-scene-v1";
    j["fps"] = fps;
    j["text"] = scene[0].text.tokens;
    json cams = json::array();
    for (const auto& c : scene[0].cameras) {
        json jc;
        jc["rotation"] = mat3_json(c.rotation);
        jc["translation"] = vec3_json(c.translation);
        jc["fx"] = c.fx;
        jc["fy"] = c.fy;
        jc["cx"] = c.cx;
        jc["cy"] = c.cy;
        jc["width"] = c.width;
        jc["height"] = c.height;
        cams.push_back(jc);
    }
    j["cameras"] = cams;
    const RoadMapRaster& m0 = scene[0].map;
    j["map"] = {{"cells_x", m0.cells_x},
                {"cells_y", m0.cells_y},
                {"channels", m0.channels},
                {"meters_per_cell", m0.meters_per_cell}};
    json frames = json::array();
    for (const auto& fr : scene) {
        json jf;
        jf["ego"] = {{"rotation", mat3_json(fr.ego.rotation)},
                     {"translation", vec3_json(fr.ego.translation)}};
        json rle = json::array();
        for (int ch = 0; ch < fr.map.channels; ++ch) {
            std::vector<uint8_t> bits(static_cast<size_t>(fr.map.cells_x) * fr.map.cells_y);
            for (int gy = 0; gy < fr.map.cells_y; ++gy)
                for (int gx = 0; gx < fr.map.cells_x; ++gx)
                    bits[static_cast<size_t>(gy) * fr.map.cells_x + gx] = fr.map.at(gy, gx, ch);
            rle.push_back(rle_encode(bits));
        }
        jf["map_rle"] = rle;
        json boxes = json::array();
        for (const auto& tb : fr.boxes) {
            json jb;
            jb["id"] = tb.object_id;
            jb["cls"] = tb.box.class_id;
            jb["corners"] = std::vector<double>(tb.box.corners.begin(), tb.box.corners.end());
            boxes.push_back(jb);
        }
        jf["boxes"] = boxes;
        frames.push_back(jf);
    }
    j["frames"] = frames;
    return j.dump();
}

Scene scene_from_json(const std::string& text, double* fps_out) {
    json j = json::parse(text);
    if (!j.contains("format") || j["format"] != "mvdiff-scene-v1")
        throw TensorError("scene: unknown format tag");
    double fps = j.value("fps", 12.0);
    if (fps_out) *fps_out = fps;

    std::vector<CameraPose> cameras;
    for (const auto& jc : j.at("cameras")) {
        CameraPose c;
        c.rotation = mat3_from(jc.at("rotation"));
        c.translation = vec3_from(jc.at("translation"));
        c.fx = jc.at("fx").get<double>();
        c.fy = jc.at("fy").get<double>();
        c.cx = jc.at("cx").get<double>();
        c.cy = jc.at("cy").get<double>();
        c.width = jc.at("width").get<int>();
        c.height = jc.at("height").get<int>();
        c.validate();
        cameras.push_back(c);
    }
    if (cameras.empty()) throw TensorError("scene: no cameras");

    TextPrompt prompt;
    for (const auto& tok : j.at("text")) prompt.tokens.push_back(tok.get<std::string>());

    const auto& jm = j.at("map");
    int cells_x = jm.at("cells_x").get<int>();
    int cells_y = jm.at("cells_y").get<int>();
    int channels = jm.at("channels").get<int>();
    double mpc = jm.at("meters_per_cell").get<double>();

    Scene scene;
    for (const auto& jf : j.at("frames")) {
        SceneFrame fr;
        fr.cameras = cameras;
        fr.text = prompt;
        fr.ego.rotation = mat3_from(jf.at("ego").at("rotation"));
        fr.ego.translation = vec3_from(jf.at("ego").at("translation"));
        fr.ego.validate();
        fr.map.cells_x = cells_x;
        fr.map.cells_y = cells_y;
        fr.map.channels = channels;
        fr.map.meters_per_cell = mpc;
        fr.map.grid.assign(static_cast<size_t>(cells_x) * cells_y * channels, 0);
        const auto& rle = jf.at("map_rle");
        if (static_cast<int>(rle.size()) != channels)
            throw TensorError("scene: map_rle channel count mismatch");
        for (int ch = 0; ch < channels; ++ch) {
            auto bits = rle_decode(rle[ch].get<std::vector<int64_t>>(),
                                   static_cast<size_t>(cells_x) * cells_y);
            for (int gy = 0; gy < cells_y; ++gy)
                for (int gx = 0; gx < cells_x; ++gx)
                    fr.map.grid[(static_cast<size_t>(gy) * cells_x + gx) * channels + ch] =
                        bits[static_cast<size_t>(gy) * cells_x + gx];
        }
        for (const auto& jb : jf.at("boxes")) {
            TrackedBox tb;
            tb.object_id = jb.at("id").get<int>();
            tb.box.class_id = jb.at("cls").get<int>();
            auto cs = jb.at("corners").get<std::vector<double>>();
            if (cs.size() != 24) throw TensorError("scene: box corners must have 24 entries");
            std::copy(cs.begin(), cs.end(), tb.box.corners.begin());
            if (!tb.box.valid_cuboid(1e-6))
                throw TensorError("scene: box corners do not form a cuboid");
            fr.boxes.push_back(tb);
        }
        scene.push_back(std::move(fr));
    }
    if (scene.empty()) throw TensorError("scene: no frames");
    if (!scene[0].ego.is_identity(1e-9))
        throw TensorError("scene: frame-0 ego transform must be identity");
    return scene;
}

void save_scene(const Scene& scene, double fps, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorError("scene: cannot open " + path + " for writing");
    f << scene_to_json(scene, fps);
}

Scene load_scene(const std::string& path, double* fps_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorError("scene: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return scene_from_json(text, fps_out);
}

}  // namespace mvdiff
