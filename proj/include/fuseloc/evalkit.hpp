#pragma once

#include <array>
#include <string>
#include <vector>

#include "fuseloc/dataio.hpp"
#include "fuseloc/nextvlad.hpp"
#include "fuseloc/tensor.hpp"

// Retrieval evaluation: an in-memory descriptor database, exhaustive top-1
// search, and the precision-recall sweep with its two summary numbers
// (maximum F1, recall at 100% precision).

namespace fuseloc {

struct DescriptorDB {
    std::vector<int> ids;
    Tensor<float> matrix;  // count x 768
    std::vector<std::array<double, 3>> poses;

    int count() const { return matrix.numel() == 0 ? 0 : matrix.dim(0); }
};

// Which 256-d segments of the global descriptor take part in distances.
// Masking is the ablation hook: image-only, concatenated image+point, or the
// fusion branch alone are all sub-vectors of the same stored descriptor.
struct BranchMask {
    bool img = true;
    bool pc = true;
    bool fus = true;

    static BranchMask parse(const std::string& spec);
    std::string describe() const;
};

// Builds the database from an FLD1 file and the pose records that describe
// the same samples in the same order.
DescriptorDB build_db(const std::string& descriptor_path, const std::vector<PoseRecord>& poses);

// Exhaustive Euclidean top-1 over the (masked) descriptor; ties resolve to
// the lowest id. Entries whose id equals exclude_id are skipped.
std::pair<int, double> query_nn(const DescriptorDB& db, const float* query, const BranchMask& mask = {},
                                int exclude_id = -1);

struct PRResult {
    std::vector<double> thresholds;
    std::vector<double> precision;
    std::vector<double> recall;
    double max_f1 = 0.0;
    double recall_at_p100 = 0.0;
};

// Top-1-with-threshold protocol: a query's best match is accepted iff its
// descriptor distance is <= tau; an accepted match counts as a true positive
// iff the matched pose lies within d_pos of the query pose. Queries without
// any ground-truth loop in the database are excluded. With an empty
// `thresholds` the sweep runs over the sorted set of observed top-1
// distances.
PRResult pr_curve(const DescriptorDB& db, const DescriptorDB& queries, double d_pos,
                  std::vector<double> thresholds = {}, const BranchMask& mask = {});

// Writes <path>.csv (threshold,precision,recall) and <path>.json
// ({"max_f1": ..., "recall_at_p100": ...}).
void export_results(const PRResult& pr, const std::string& path_prefix);

}  // namespace fuseloc
