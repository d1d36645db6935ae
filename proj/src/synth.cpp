#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fuseloc/dataio.hpp"
#include "fuseloc/rng.hpp"

// Parametric scene generator: random boxes on a ground plane, two visits per
// scene. Clouds are full-sweep range samples in the sensor frame; images come
// from a forward-facing camera with a limited field of view, so a
// reverse-direction revisit shares geometry with the first pass but sees an
// almost disjoint image. Scene centers sit on a 120 m grid: revisit pairs
// stay within the positive-pair radius while anything across scenes clears
// the negative threshold.

namespace fuseloc {

namespace fs = std::filesystem;

namespace {

struct Box {
    double cx, cy;      // center on the ground
    double hx, hy;      // half extents
    double height;
    double yaw;
    float color[3];
    float luminance;
};

struct Scene {
    double cx, cy;  // scene center
    std::vector<Box> boxes;
};

struct Visit {
    double x, y;     // vehicle position
    double heading;  // radians
};

// shared palette: scenes differ mostly by geometry, not by color
constexpr float kPalette[6][3] = {
    {0.85f, 0.30f, 0.25f}, {0.25f, 0.55f, 0.85f}, {0.90f, 0.75f, 0.25f},
    {0.35f, 0.75f, 0.40f}, {0.70f, 0.45f, 0.80f}, {0.80f, 0.55f, 0.35f},
};

constexpr double kSensorHeight = 1.6;
constexpr double kMaxRange = 55.0;
constexpr double kMinRange = 0.75;
constexpr double kRangeNoise = 0.02;   // m, one sigma
constexpr float kPixelNoise = 1.5f / 255.0f;
constexpr int kAzimuthSteps = 768;     // even: a 180 degree flip is an exact grid shift
constexpr int kGroundRings = 36;       // elevations hitting ground within range
constexpr int kSkyRings = 8;           // elevations at/above horizon, box returns only
constexpr double kCamFovX = 100.0 * M_PI / 180.0;

struct Hit {
    double t = -1.0;
    const Box* box = nullptr;  // null: ground
};

// Ray vs oriented box (box z spans [0, height]).
bool ray_box(const Box& b, const double o[3], const double d[3], double* t_out) {
    const double c = std::cos(-b.yaw), s = std::sin(-b.yaw);
    const double ox = o[0] - b.cx, oy = o[1] - b.cy;
    const double lo[3] = {c * ox - s * oy, s * ox + c * oy, o[2]};
    const double ld[3] = {c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]};
    const double mins[3] = {-b.hx, -b.hy, 0.0};
    const double maxs[3] = {b.hx, b.hy, b.height};
    double tmin = 0.0, tmax = kMaxRange;
    for (int a = 0; a < 3; ++a) {
        if (std::fabs(ld[a]) < 1e-12) {
            if (lo[a] < mins[a] || lo[a] > maxs[a]) return false;
            continue;
        }
        double t0 = (mins[a] - lo[a]) / ld[a];
        double t1 = (maxs[a] - lo[a]) / ld[a];
        if (t0 > t1) std::swap(t0, t1);
        tmin = std::max(tmin, t0);
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return false;
    }
    if (tmin <= 0.0) return false;
    *t_out = tmin;
    return true;
}

Hit cast_ray(const Scene& scene, const double o[3], const double d[3]) {
    Hit hit;
    if (d[2] < -1e-9) {
        const double t = -o[2] / d[2];
        if (t >= kMinRange && t <= kMaxRange) hit.t = t;
    }
    for (const Box& b : scene.boxes) {
        double t;
        if (ray_box(b, o, d, &t) && t >= kMinRange && (hit.t < 0.0 || t < hit.t)) {
            hit.t = t;
            hit.box = &b;
        }
    }
    return hit;
}

Tensor<float> render_cloud(const Scene& scene, const Visit& v, Rng& noise, std::vector<float>* intensity) {
    const double o[3] = {v.x, v.y, kSensorHeight};
    std::vector<float> pts;
    pts.reserve(static_cast<std::size_t>((kGroundRings + kSkyRings) * kAzimuthSteps) * 3);
    intensity->clear();
    const double ch = std::cos(-v.heading), sh = std::sin(-v.heading);
    for (int ring = 0; ring < kGroundRings + kSkyRings; ++ring) {
        // -24 deg .. -2 deg ground rings, then -1.5 .. +4 deg
        const double elev_deg = ring < kGroundRings
                                    ? -24.0 + ring * (22.0 / (kGroundRings - 1))
                                    : -1.5 + (ring - kGroundRings) * (5.5 / (kSkyRings - 1));
        const double elev = elev_deg * M_PI / 180.0;
        const double ce = std::cos(elev), se = std::sin(elev);
        for (int az = 0; az < kAzimuthSteps; ++az) {
            const double a = v.heading + 2.0 * M_PI * az / kAzimuthSteps;
            const double d[3] = {ce * std::cos(a), ce * std::sin(a), se};
            const Hit hit = cast_ray(scene, o, d);
            if (hit.t < 0.0) continue;
            const double t = hit.t + kRangeNoise * noise.normal();
            const double pw[3] = {o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]};
            // sensor frame: translate to origin, undo the heading
            const double px = pw[0] - o[0], py = pw[1] - o[1];
            pts.push_back(static_cast<float>(ch * px - sh * py));
            pts.push_back(static_cast<float>(sh * px + ch * py));
            pts.push_back(static_cast<float>(pw[2] - o[2]));
            intensity->push_back(hit.box != nullptr ? hit.box->luminance : 0.15f);
        }
    }
    const int n = static_cast<int>(pts.size() / 3);
    return Tensor<float>::from({n, 3}, std::move(pts));
}

Tensor<float> render_image(const Scene& scene, const Visit& v, Rng& noise) {
    Tensor<float> img({kImageDimA, kImageDimB, 3});
    const double o[3] = {v.x, v.y, kSensorHeight};
    const double fwd[2] = {std::cos(v.heading), std::sin(v.heading)};
    const double right[2] = {std::sin(v.heading), -std::cos(v.heading)};
    const double fx = (kImageDimA / 2.0) / std::tan(kCamFovX / 2.0);
    const double fy = fx;
    for (int x = 0; x < kImageDimA; ++x) {
        const double u = (x + 0.5 - kImageDimA / 2.0) / fx;
        for (int y = 0; y < kImageDimB; ++y) {
            const double w = (kImageDimB / 2.0 - y - 0.5) / fy;
            double d[3] = {fwd[0] + u * right[0], fwd[1] + u * right[1], w};
            const double norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            d[0] /= norm;
            d[1] /= norm;
            d[2] /= norm;
            const Hit hit = cast_ray(scene, o, d);
            float r, g, b;
            if (hit.t < 0.0) {  // sky
                r = 0.62f;
                g = 0.72f;
                b = 0.88f;
            } else {
                const float shade = static_cast<float>(0.35 + 0.65 * std::exp(-hit.t / 35.0));
                if (hit.box != nullptr) {
                    r = hit.box->color[0] * shade;
                    g = hit.box->color[1] * shade;
                    b = hit.box->color[2] * shade;
                } else {
                    r = 0.30f * shade;
                    g = 0.29f * shade;
                    b = 0.27f * shade;
                }
            }
            img(x, y, 0) = std::clamp(r + kPixelNoise * static_cast<float>(noise.normal()), 0.0f, 1.0f);
            img(x, y, 1) = std::clamp(g + kPixelNoise * static_cast<float>(noise.normal()), 0.0f, 1.0f);
            img(x, y, 2) = std::clamp(b + kPixelNoise * static_cast<float>(noise.normal()), 0.0f, 1.0f);
        }
    }
    return img;
}

Scene make_scene(int index, Rng& rng, int grid_cols) {
    Scene scene;
    scene.cx = 120.0 * (index % grid_cols) + rng.uniform(-4.0, 4.0);
    scene.cy = 120.0 * (index / grid_cols) + rng.uniform(-4.0, 4.0);
    // per-scene signature: box count, a size scale, a 3-color palette subset
    // and a radial band differ scene to scene; the palette itself is shared
    const int n_boxes = 6 + static_cast<int>(rng.uniform_int(9));
    const double size_scale = rng.uniform(0.8, 1.4);
    const double r_lo = rng.uniform(5.0, 9.0);
    const double r_hi = r_lo + rng.uniform(8.0, 14.0);
    int colors[3];
    colors[0] = static_cast<int>(rng.uniform_int(6));
    colors[1] = static_cast<int>(rng.uniform_int(6));
    colors[2] = static_cast<int>(rng.uniform_int(6));
    for (int b = 0; b < n_boxes; ++b) {
        Box box;
        const double r = rng.uniform(r_lo, r_hi);
        const double a = rng.uniform(0.0, 2.0 * M_PI);
        box.cx = scene.cx + r * std::cos(a);
        box.cy = scene.cy + r * std::sin(a);
        box.hx = size_scale * rng.uniform(0.6, 2.2);
        box.hy = size_scale * rng.uniform(0.6, 2.2);
        box.height = size_scale * rng.uniform(1.5, 6.0);
        box.yaw = rng.uniform(0.0, 2.0 * M_PI);
        const float* c = kPalette[colors[rng.uniform_int(3)]];
        box.color[0] = c[0];
        box.color[1] = c[1];
        box.color[2] = c[2];
        box.luminance = 0.2126f * c[0] + 0.7152f * c[1] + 0.0722f * c[2];
        scene.boxes.push_back(box);
    }
    return scene;
}

void append_double(std::string& line, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    line.append(buf, res.ptr);
}

}  // namespace

DatasetManifest synth_generate(const std::string& out_dir, int n_scenes, RevisitMode mode,
                               std::uint64_t seed) {
    if (n_scenes < 2) throw ContractError("dataio", "synth: need at least 2 scenes");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "clouds", ec);
    if (ec) throw IoError("dataio", "cannot create dataset directory '" + out_dir + "'");

    const int grid_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_scenes))));
    Rng master(seed);
    std::string poses_text, manifest_text;
    for (int s = 0; s < n_scenes; ++s) {
        Rng scene_rng = master.fork(static_cast<std::uint64_t>(s) * 2 + 1);
        Scene scene = make_scene(s, scene_rng, grid_cols);
        Visit v0;
        v0.x = scene.cx + scene_rng.uniform(-1.0, 1.0);
        v0.y = scene.cy + scene_rng.uniform(-1.0, 1.0);
        v0.heading = scene_rng.uniform(0.0, 2.0 * M_PI);
        Visit v1 = v0;
        if (mode == RevisitMode::kSame) {
            v1.x += scene_rng.uniform(-0.6, 0.6);
            v1.y += scene_rng.uniform(-0.6, 0.6);
            v1.heading += scene_rng.uniform(-0.02, 0.02);
        } else {
            v1.heading += M_PI;  // same spot, opposite direction
        }
        const Visit visits[2] = {v0, v1};
        for (int visit = 0; visit < 2; ++visit) {
            const int id = s * 2 + visit;
            Rng noise = scene_rng.fork(static_cast<std::uint64_t>(100 + visit));
            std::vector<float> intensity;
            Tensor<float> cloud = render_cloud(scene, visits[visit], noise, &intensity);
            Tensor<float> image = render_image(scene, visits[visit], noise);
            char name[32];
            std::snprintf(name, sizeof(name), "%06d", id);
            write_cloud_bin((fs::path(out_dir) / "clouds" / (std::string(name) + ".bin")).string(), cloud,
                            &intensity);
            write_png_rgb((fs::path(out_dir) / "images" / (std::string(name) + ".png")).string(), image);
            std::string line = std::to_string(id) + " " + std::to_string(static_cast<long long>(id) * 1000000000LL) + " ";
            append_double(line, visits[visit].x);
            line += " ";
            append_double(line, visits[visit].y);
            line += " 0\n";
            poses_text += line;
            manifest_text += std::to_string(id) + (visit == 0 ? " db\n" : " query\n");
        }
    }
    {
        std::ofstream os(fs::path(out_dir) / "poses.txt", std::ios::trunc);
        os << poses_text;
        if (!os) throw IoError("dataio", "cannot write poses.txt");
    }
    {
        std::ofstream os(fs::path(out_dir) / "manifest.txt", std::ios::trunc);
        os << manifest_text;
        if (!os) throw IoError("dataio", "cannot write manifest.txt");
    }
    return load_manifest(out_dir);
}

}  // namespace fuseloc
