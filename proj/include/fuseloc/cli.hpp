#pragma once

#include <string>
#include <vector>

#include "fuseloc/config.hpp"
#include "fuseloc/dataio.hpp"
#include "fuseloc/evalkit.hpp"
#include "fuseloc/network.hpp"

namespace fuseloc {

// Command-line front door. Returns the process exit code:
// 0 success, 1 contract or format error, 2 I/O error.
int run(int argc, const char* const* argv);

// Embeds one split of a dataset with the given model (inference mode,
// manifest order). Shared by `embed` and the test suites.
std::vector<Tensor<float>> embed_split(const ThreeBranchNetwork<float>& net,
                                       ParameterTable<float>& params, const DatasetManifest& manifest,
                                       bool db_split);

// Loads + preprocesses every manifest sample (manifest id order) and mines
// tuples against the configured thresholds; tuple ids are indices into the
// returned sample vector.
struct TrainingData {
    std::vector<TrainSample> samples;
    std::vector<int> sample_ids;
    std::vector<TripletTuple> tuples;
};
TrainingData prepare_training_data(const DatasetManifest& manifest, const TrainConfig& cfg);

void write_loss_csv(const std::vector<double>& history, const std::string& path);

}  // namespace fuseloc
