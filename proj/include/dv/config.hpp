#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dv/metrics.hpp"
#include "dv/pipeline.hpp"
#include "dv/synth.hpp"
#include "dv/training.hpp"

namespace dv {

// Bad key, bad value, or unreadable file; maps to exit code 2 in the CLI.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key=value configuration covering every tunable default. Unknown keys
// are rejected by name.
struct Config {
    ModelConfig model;
    LossWeights loss;
    TrainConfig train;
    EvalConfig eval;
    SceneSpec synth;
    LabelSpec labels;

    // Fills the derived fields (eval/label anchors, label grid and depth
    // binning, synth image size) from the primary ones and validates.
    void finalize();
};

Config default_config();

// The model's shared y anchors: m points evenly spaced on [anchor_y_lo, anchor_y_hi].
std::vector<double> model_anchors(const ModelConfig& m);

// Parses "key=value"; throws ConfigError naming the key on unknown keys or
// unparsable values.
void apply_kv(Config& cfg, const std::string& key, const std::string& value);

// Reads a key=value file ('#' comments, blank lines ignored) on top of the
// defaults. Does not finalize.
Config load_config(const std::string& path);

// Every key with its current value, sorted, one per line.
std::string dump_config(const Config& cfg);

}  // namespace dv
