#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fuseloc/common.hpp"
#include "fuseloc/tensor.hpp"

// Dataset ingestion and the synthetic scene generator.
//
// On-disk layout of a dataset directory:
//   images/%06d.png   8-bit RGB
//   clouds/%06d.bin   float32 LE (x,y,z,intensity) quadruplets
//   poses.txt         lines: id timestamp_ns x y z   (meters / nanoseconds)
//   manifest.txt      lines: id {db|query}
//
// Image tensors are indexed [x][y][channel]: the first tensor axis runs along
// the PNG width, so the canonical 320x96 input is a [320,96,3] tensor.

namespace fuseloc {

struct Sample {
    int id = 0;
    std::int64_t timestamp_ns = 0;
    Tensor<float> image;  // [A,B,3] in [0,1]
    Tensor<float> cloud;  // [N,3] meters, sensor frame
    std::array<double, 3> pose{};
};

struct DatasetManifest {
    std::string root;
    std::vector<int> ids;  // file order of manifest.txt
    std::map<int, char> split;  // 'd' = database, 'q' = query
    std::map<int, std::array<double, 3>> poses;
    std::map<int, std::int64_t> timestamps;

    std::vector<int> split_ids(bool db) const {
        std::vector<int> out;
        for (int id : ids)
            if ((split.at(id) == 'd') == db) out.push_back(id);
        return out;
    }
};

// Canonical preprocessing targets.
inline constexpr int kImageDimA = 320;  // first tensor axis (PNG width)
inline constexpr int kImageDimB = 96;   // second tensor axis (PNG height)
inline constexpr int kCloudPoints = 8192;

// --- PNG ---------------------------------------------------------------

Tensor<float> read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const Tensor<float>& image);

// --- point cloud binaries ------------------------------------------------

// Reads float32 LE (x,y,z,intensity) quadruplets; intensity is dropped.
Tensor<float> read_cloud_bin(const std::string& path);
void write_cloud_bin(const std::string& path, const Tensor<float>& xyz,
                     const std::vector<float>* intensity = nullptr);

// --- dataset directory -----------------------------------------------------

struct PoseRecord {
    int id = 0;
    std::int64_t timestamp_ns = 0;
    std::array<double, 3> xyz{};
};

std::vector<PoseRecord> parse_poses(const std::string& path);

DatasetManifest load_manifest(const std::string& dir);
Sample load_sample(const DatasetManifest& manifest, int id);

// Bilinear resize over the first two tensor axes; identity when the target
// equals the source size.
Tensor<float> resize_bilinear(const Tensor<float>& image, int a, int b);

// Canonical preprocessing: resize the image, draw exactly kCloudPoints points
// (without replacement when the cloud is large enough, padding by seeded
// resampling with replacement otherwise). Deterministic under `seed`.
Sample preprocess(Sample sample, std::uint64_t seed);

// Fixed per-id preprocessing stream so training and embedding see identical
// samples without threading a seed through every interface.
inline std::uint64_t preprocess_seed_for(int id) { return mix_seed(0x70726570ull, static_cast<std::uint64_t>(id)); }

// For each primary timestamp, the index of the secondary timestamp with the
// smallest |dt|; ties resolve to the earlier index. Both lists must be
// non-empty and ascending.
std::vector<int> associate_by_timestamp(const std::vector<std::int64_t>& primary,
                                        const std::vector<std::int64_t>& secondary);

// --- synthetic scenes -------------------------------------------------------

enum class RevisitMode { kSame, kReverse };

// Generates n_scenes parametric box-and-ground scenes, two visits each
// (visit 0 -> database, visit 1 -> query). Same-direction revisits perturb
// the pose slightly; reverse revisits keep the position and flip the heading
// by 180 degrees. Clouds are ray-cast surface samples in the sensor frame,
// images deterministic colored depth projections with a forward-facing
// camera. Byte-identical output for identical (n_scenes, mode, seed).
DatasetManifest synth_generate(const std::string& out_dir, int n_scenes, RevisitMode mode,
                               std::uint64_t seed);

}  // namespace fuseloc
