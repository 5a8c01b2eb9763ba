#pragma once

#include <string>
#include <vector>

#include "dv/backbone.hpp"
#include "dv/decoder.hpp"
#include "dv/query_gen.hpp"

namespace dv {

struct ModelConfig {
    BackboneConfig backbone;
    DecoderConfig decoder;
    GridSpec bev_grid;
    std::size_t n = 40;            // lane queries
    std::size_t m = 20;            // points per lane
    std::size_t num_classes = 15;  // background + 14 lane categories
    double anchor_y_lo = 5.0, anchor_y_hi = 95.0;
    double tau_nce = 0.07;
    double tau_gumbel = 1.0;

    void validate() const;
};

struct ForwardTrace {
    BffTrace bff;
    DualViewFeatures feats;
    ViewQueries pv, bev;
    UnifiedQueries uni;
    Tensor depth_logits;
    std::vector<DecoderLayer::Trace> layers;
};

// The full network: fused backbone, dual-view query generation, clustered
// unification, decoder stack, lane head.
class LaneModel {
  public:
    LaneModel(const ModelConfig& cfg, std::uint64_t param_seed);

    // hard: straight-through one-hot cluster assignment (inference);
    // soft assignment during training.
    LanePrediction forward(const Tensor& image, const PointCloud& cloud,
                           const CameraCalib& calib, RngState& rng, bool hard,
                           ForwardTrace* trace = nullptr) const;

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }
    const LaneHead& head() const { return head_; }
    const Backbone& backbone() const { return backbone_; }

  private:
    ModelConfig cfg_;
    nn::ParamStore params_;
    Backbone backbone_;
    IamHead iam_pv_, iam_bev_;
    Tensor e_points_;  // [M, C] learnable point embeddings, shared across layers
    nn::LayerNormLayer ln_c_;  // tames the scale of pooled queries
    std::vector<DecoderLayer> layers_;
    LaneHead head_;
};

}  // namespace dv
