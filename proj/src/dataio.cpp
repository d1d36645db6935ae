#include "fuseloc/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <png.h>

#include "fuseloc/rng.hpp"

namespace fuseloc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG, 8-bit RGB
// ---------------------------------------------------------------------------

Tensor<float> read_png_rgb(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (fp == nullptr) throw IoError("dataio", "cannot open image '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (info == nullptr) {
        if (png != nullptr) png_destroy_read_struct(&png, nullptr, nullptr);
        std::fclose(fp);
        throw IoError("dataio", "libpng init failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("dataio", "corrupt PNG '" + path + "'");
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    pixels.resize(rowbytes * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Tensor<float> image({static_cast<int>(width), static_cast<int>(height), 3});
    for (png_uint_32 y = 0; y < height; ++y)
        for (png_uint_32 x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                image(static_cast<int>(x), static_cast<int>(y), c) =
                    static_cast<float>(pixels[y * rowbytes + 3 * x + static_cast<std::size_t>(c)]) / 255.0f;
    return image;
}

void write_png_rgb(const std::string& path, const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ContractError("dataio", "image must be [A,B,3], got " + image.shape_string());
    const int width = image.dim(0), height = image.dim(1);
    std::vector<png_byte> pixels(static_cast<std::size_t>(width) * height * 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = image(x, y, c);
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                pixels[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (fp == nullptr) throw IoError("dataio", "cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (info == nullptr) {
        if (png != nullptr) png_destroy_write_struct(&png, nullptr);
        std::fclose(fp);
        throw IoError("dataio", "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("dataio", "PNG write failed for '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_compression_level(png, 6);  // fixed level: byte-identical reruns
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y)
        rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// ---------------------------------------------------------------------------
// cloud binaries
// ---------------------------------------------------------------------------

Tensor<float> read_cloud_bin(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw IoError("dataio", "cannot open cloud '" + path + "'");
    const std::streamoff size = is.tellg();
    if (size == 0) throw FormatError("dataio", "empty cloud file '" + path + "'");
    if (size % 16 != 0)
        throw FormatError("dataio", "cloud file '" + path + "' has " + std::to_string(size) +
                                        " bytes, not a multiple of 16");
    const int n = static_cast<int>(size / 16);
    std::vector<float> raw(static_cast<std::size_t>(n) * 4);
    is.seekg(0);
    is.read(reinterpret_cast<char*>(raw.data()), size);
    if (!is) throw IoError("dataio", "short read on '" + path + "'");
    Tensor<float> cloud({n, 3});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) cloud(i, c) = raw[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(c)];
    return cloud;
}

void write_cloud_bin(const std::string& path, const Tensor<float>& xyz, const std::vector<float>* intensity) {
    if (xyz.rank() != 2 || xyz.dim(1) != 3)
        throw ContractError("dataio", "cloud must be [N,3], got " + xyz.shape_string());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("dataio", "cannot open '" + path + "' for writing");
    const int n = xyz.dim(0);
    std::vector<float> raw(static_cast<std::size_t>(n) * 4);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < 3; ++c) raw[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(c)] = xyz(i, c);
        raw[static_cast<std::size_t>(i) * 4 + 3] =
            intensity != nullptr ? (*intensity)[static_cast<std::size_t>(i)] : 0.0f;
    }
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!os) throw IoError("dataio", "write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// manifests
// ---------------------------------------------------------------------------

std::vector<PoseRecord> parse_poses(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("dataio", "cannot open poses '" + path + "'");
    std::vector<PoseRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        PoseRecord r;
        if (!(ss >> r.id >> r.timestamp_ns >> r.xyz[0] >> r.xyz[1] >> r.xyz[2]))
            throw FormatError("dataio", "bad pose line " + std::to_string(lineno) + " in '" + path + "'");
        out.push_back(r);
    }
    if (out.empty()) throw FormatError("dataio", "no pose entries in '" + path + "'");
    return out;
}

DatasetManifest load_manifest(const std::string& dir) {
    DatasetManifest m;
    m.root = dir;
    for (const PoseRecord& r : parse_poses((fs::path(dir) / "poses.txt").string())) {
        m.poses[r.id] = r.xyz;
        m.timestamps[r.id] = r.timestamp_ns;
    }
    const std::string mpath = (fs::path(dir) / "manifest.txt").string();
    std::ifstream is(mpath);
    if (!is) throw IoError("dataio", "cannot open manifest '" + mpath + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        int id = 0;
        std::string tag;
        if (!(ss >> id >> tag) || (tag != "db" && tag != "query"))
            throw FormatError("dataio", "bad manifest line " + std::to_string(lineno) + " in '" + mpath + "'");
        if (m.poses.find(id) == m.poses.end())
            throw FormatError("dataio", "manifest id " + std::to_string(id) + " has no pose entry");
        m.ids.push_back(id);
        m.split[id] = tag == "db" ? 'd' : 'q';
    }
    if (m.ids.empty()) throw FormatError("dataio", "no manifest entries in '" + mpath + "'");
    return m;
}

namespace {

std::string sample_file(const std::string& root, const char* subdir, int id, const char* ext) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.%s", id, ext);
    return (fs::path(root) / subdir / name).string();
}

}  // namespace

Sample load_sample(const DatasetManifest& manifest, int id) {
    auto pose = manifest.poses.find(id);
    if (pose == manifest.poses.end())
        throw ContractError("dataio", "sample id " + std::to_string(id) + " not in manifest");
    Sample s;
    s.id = id;
    s.timestamp_ns = manifest.timestamps.at(id);
    s.pose = pose->second;
    s.image = read_png_rgb(sample_file(manifest.root, "images", id, "png"));
    s.cloud = read_cloud_bin(sample_file(manifest.root, "clouds", id, "bin"));
    return s;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

Tensor<float> resize_bilinear(const Tensor<float>& image, int a, int b) {
    if (image.rank() != 3) throw ContractError("dataio", "resize expects [A,B,C]");
    const int sa = image.dim(0), sb = image.dim(1), ch = image.dim(2);
    if (sa == a && sb == b) return image;  // bit-exact identity
    Tensor<float> out({a, b, ch});
    const double scale_a = static_cast<double>(sa) / a;
    const double scale_b = static_cast<double>(sb) / b;
    for (int x = 0; x < a; ++x) {
        const double fx = (x + 0.5) * scale_a - 0.5;
        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, sa - 1);
        const int x1 = std::min(x0 + 1, sa - 1);
        const double wx = std::clamp(fx - x0, 0.0, 1.0);
        for (int y = 0; y < b; ++y) {
            const double fy = (y + 0.5) * scale_b - 0.5;
            const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, sb - 1);
            const int y1 = std::min(y0 + 1, sb - 1);
            const double wy = std::clamp(fy - y0, 0.0, 1.0);
            for (int c = 0; c < ch; ++c) {
                const double top = (1.0 - wx) * image(x0, y0, c) + wx * image(x1, y0, c);
                const double bot = (1.0 - wx) * image(x0, y1, c) + wx * image(x1, y1, c);
                out(x, y, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

Sample preprocess(Sample sample, std::uint64_t seed) {
    sample.image = resize_bilinear(sample.image, kImageDimA, kImageDimB);
    const int n = sample.cloud.dim(0);
    Rng rng(seed);
    std::vector<int> pick;
    pick.reserve(kCloudPoints);
    if (n >= kCloudPoints) {
        // partial Fisher-Yates: kCloudPoints distinct indices
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < kCloudPoints; ++i) {
            const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            pick.push_back(idx[static_cast<std::size_t>(i)]);
        }
    } else {
        for (int i = 0; i < n; ++i) pick.push_back(i);
        for (int i = n; i < kCloudPoints; ++i)
            pick.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    }
    Tensor<float> cloud({kCloudPoints, 3});
    for (int i = 0; i < kCloudPoints; ++i)
        for (int c = 0; c < 3; ++c) cloud(i, c) = sample.cloud(pick[static_cast<std::size_t>(i)], c);
    sample.cloud = std::move(cloud);
    return sample;
}

// ---------------------------------------------------------------------------
// timestamp association
// ---------------------------------------------------------------------------

std::vector<int> associate_by_timestamp(const std::vector<std::int64_t>& primary,
                                        const std::vector<std::int64_t>& secondary) {
    if (primary.empty() || secondary.empty())
        throw ContractError("dataio", "associate: both timestamp lists must be non-empty");
    if (!std::is_sorted(primary.begin(), primary.end()) ||
        !std::is_sorted(secondary.begin(), secondary.end()))
        throw ContractError("dataio", "associate: timestamp lists must be ascending");
    std::vector<int> out;
    out.reserve(primary.size());
    for (const std::int64_t t : primary) {
        auto it = std::lower_bound(secondary.begin(), secondary.end(), t);
        int best;
        if (it == secondary.begin()) {
            best = 0;
        } else if (it == secondary.end()) {
            best = static_cast<int>(secondary.size()) - 1;
        } else {
            const int hi = static_cast<int>(it - secondary.begin());
            const int lo = hi - 1;
            const std::int64_t dlo = t - secondary[static_cast<std::size_t>(lo)];
            const std::int64_t dhi = secondary[static_cast<std::size_t>(hi)] - t;
            best = dlo <= dhi ? lo : hi;  // tie -> earlier index
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace fuseloc
