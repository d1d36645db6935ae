#pragma once

#include <string>

#include "fuseloc/metric.hpp"
#include "fuseloc/network.hpp"

// Experiment configuration: one key=value per line, '#' starts a comment.
// Keys cover the training schedule, the attention/aggregation dimensions and
// every embedding constant; unknown keys are rejected. Missing keys fall back
// to the canonical values.

namespace fuseloc {

struct AppConfig {
    NetworkConfig net;
    TrainConfig train;

    void validate() const {
        net.validate();
        train.validate();
    }
};

AppConfig parse_config_text(const std::string& text);
AppConfig parse_config_file(const std::string& path);

}  // namespace fuseloc
