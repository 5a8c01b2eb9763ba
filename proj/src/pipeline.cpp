#include "dv/pipeline.hpp"

#include <stdexcept>

namespace dv {

void ModelConfig::validate() const {
    backbone.validate();
    decoder.validate();
    bev_grid.validate();
    if (backbone.c != decoder.dim) {
        throw std::invalid_argument("ModelConfig: fused width must equal decoder dim");
    }
    if (n == 0 || m < 2) throw std::invalid_argument("ModelConfig: need n >= 1, m >= 2");
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: need background + lanes");
    if (!(anchor_y_lo < anchor_y_hi)) throw std::invalid_argument("ModelConfig: anchor span");
    if (!(tau_nce > 0.0) || !(tau_gumbel > 0.0)) {
        throw std::invalid_argument("ModelConfig: temperatures must be positive");
    }
}

LaneModel::LaneModel(const ModelConfig& cfg, std::uint64_t param_seed) : cfg_(cfg) {
    cfg_.validate();
    RngState rng(param_seed);
    backbone_ = Backbone(params_, cfg_.backbone, rng);
    iam_pv_ = IamHead(params_, "iam_pv", cfg_.backbone.c, cfg_.n, rng);
    iam_bev_ = IamHead(params_, "iam_bev", cfg_.backbone.c, cfg_.n, rng);
    e_points_ = params_.create("e_points", {cfg_.m, cfg_.decoder.dim}, 0.1, rng);
    ln_c_ = nn::LayerNormLayer(params_, "ln_c", cfg_.decoder.dim);
    layers_.reserve(cfg_.decoder.layers);
    for (std::size_t i = 0; i < cfg_.decoder.layers; ++i) {
        layers_.emplace_back(params_, "dec" + std::to_string(i), cfg_.decoder, rng);
    }
    head_ = LaneHead(params_, "head", cfg_.decoder.dim, cfg_.num_classes, cfg_.m,
                     cfg_.anchor_y_lo, cfg_.anchor_y_hi, rng);
}

LanePrediction LaneModel::forward(const Tensor& image, const PointCloud& cloud,
                                  const CameraCalib& calib, RngState& rng, bool hard,
                                  ForwardTrace* trace) const {
    DualViewFeatures feats =
        backbone_.bff(image, cloud, calib, cfg_.bev_grid, trace ? &trace->bff : nullptr);
    ViewQueries pv = iam_pv_.forward(feats.f_pv);
    ViewQueries bev = iam_bev_.forward(feats.f_bev);
    UnifiedQueries uni = cluster_unify(pv.q, bev.q, cfg_.tau_gumbel, hard, rng);
    // IAM pooling sums over the whole map, so the raw centers are far larger
    // than the embeddings; normalize before they enter the decoder
    Tensor c_hat = ln_c_.forward(uni.c_hat);
    Tensor q_points = build_point_queries(c_hat, e_points_);
    if (trace) {
        trace->feats = feats;
        trace->pv = pv;
        trace->bev = bev;
        trace->uni = uni;
        trace->depth_logits = backbone_.depth_logits(feats.f_pv);
        trace->layers.resize(layers_.size());
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (i > 0) q_points = build_point_queries(c_hat, q_points);
        q_points = layers_[i].forward(q_points, feats, calib,
                                      trace ? &trace->layers[i] : nullptr);
    }
    return head_.forward(q_points);
}

}  // namespace dv
