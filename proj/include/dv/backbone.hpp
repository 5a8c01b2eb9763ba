#pragma once

#include <cstddef>
#include <vector>

#include "dv/geometry.hpp"
#include "dv/nn.hpp"
#include "dv/tensor.hpp"

namespace dv {

struct BackboneConfig {
    std::size_t img_h = 96, img_w = 128;
    std::size_t c1 = 32;       // stage-1 width, both branches
    std::size_t c = 64;        // fused feature width
    std::size_t stride = 4;    // PV feature stride after stage 1
    std::size_t max_points_per_pillar = 16;
    std::size_t depth_bins = 48;
    double depth_min = 2.0, depth_max = 50.0;
    // Cross-modal branches; disabling one substitutes zeros so the
    // parameter shapes (and checkpoints) stay identical across ablations.
    bool fuse_lidar_to_cam = true;
    bool fuse_cam_to_lidar = true;

    std::size_t feat_h() const { return img_h / stride; }
    std::size_t feat_w() const { return img_w / stride; }
    void validate() const;
};

// Camera and LiDAR feature maps after bidirectional fusion.
struct DualViewFeatures {
    Tensor f_pv;   // [C, Hf, Wf]
    Tensor f_bev;  // [C, rows, cols]
    std::size_t stride = 4;
    GridSpec bev_grid;
};

// Intermediate fusion products, exposed for inspection.
struct BffTrace {
    Tensor f_pt2pv;                      // [C1, Hf, Wf] scattered point features
    Tensor f_pv2pt;                      // [K*S, C1] sampled PV features
    std::vector<std::int64_t> pix_row, pix_col;  // K*S feature-cell hits (-1 = miss)
};

struct PointStage1 {
    Pillars pillars;
    Tensor per_point;  // [K*S, C1] decorated-point embeddings (invalid slots present)
    Tensor canvas;     // [C1, rows, cols] pooled pillar features scattered to BEV
    bool empty = false;
};

class Backbone {
  public:
    Backbone() = default;
    Backbone(nn::ParamStore& ps, const BackboneConfig& cfg, RngState& rng);

    // Two stride-2 conv blocks; 3xHxW -> C1 x H/4 x W/4.
    Tensor pv_stage1(const Tensor& image) const;

    // Per-point MLP, masked max over pillar slots, scatter to the BEV canvas.
    PointStage1 pt_stage1(const PointCloud& cloud, const GridSpec& grid) const;

    // Bidirectional fusion: scatter point embeddings onto the PV grid,
    // sample PV features at projected point locations, then run the
    // second stage of each branch on the concatenated streams.
    DualViewFeatures bff(const Tensor& image, const PointCloud& cloud,
                         const CameraCalib& calib, const GridSpec& bev_grid,
                         BffTrace* trace = nullptr) const;

    Tensor depth_logits(const Tensor& f_pv) const;  // [B_d, Hf, Wf]
    std::vector<double> depth_bin_edges() const;    // B_d + 1 ascending meters
    std::size_t depth_bin_of(double depth) const;   // nearest bin, clamped

    const BackboneConfig& config() const { return cfg_; }

  private:
    BackboneConfig cfg_;
    nn::ConvLayer pv1a_, pv1b_;    // stage 1
    nn::ConvLayer pv2a_, pv2b_;    // stage 2 (after concat with scattered points)
    nn::LinearLayer pt1_;          // decorated point -> C1
    nn::LinearLayer pt2_;          // [point, sampled PV] -> C
    nn::ConvLayer bev2_;           // BEV spatial mixing
    nn::ConvLayer depth_;          // 1x1 head on F_pv
};

}  // namespace dv
