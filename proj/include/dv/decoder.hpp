#pragma once

#include <cstddef>
#include <vector>

#include "dv/backbone.hpp"
#include "dv/geometry.hpp"
#include "dv/nn.hpp"
#include "dv/tensor.hpp"

namespace dv {

struct DecoderConfig {
    std::size_t heads = 4;
    std::size_t samples = 8;   // per head
    std::size_t dim = 256;     // embed dim, matches the fused feature width
    std::size_t layers = 2;
    // 3D ROI the bounded reference head maps into
    double roi_x_lo = -10, roi_x_hi = 10;
    double roi_y_lo = 3, roi_y_hi = 103;
    double roi_z_lo = -5, roi_z_hi = 5;
    bool use_bev = true;  // PV-only sampling when false (ablation)

    void validate() const;
};

struct LanePrediction {
    Tensor x, z, vis_logits;  // [N, M]
    Tensor class_logits;      // [N, K] with background as class 0
    std::vector<double> y_anchors;  // M ascending meters
};

// One 3D dual-view deformable attention layer: a shared set of deformed 3D
// points is projected into both views, per-head attention aggregates the
// samples, and an SE gate fuses the two views before the residual update.
class DecoderLayer {
  public:
    DecoderLayer() = default;
    DecoderLayer(nn::ParamStore& ps, const std::string& prefix, const DecoderConfig& cfg,
                 RngState& rng);

    struct Deformed {
        Tensor ref3d;  // [N, M, 3]
        Tensor s3d;    // [N, M, HS, 3] with HS = heads * samples
    };
    Deformed deform_points(const Tensor& q_points) const;

    struct Trace {
        Deformed pts;
        Tensor pv_coords, bev_coords;  // [N*M*HS, 2] normalized sample locations
        Tensor d_pv, d_bev;            // [N*M, C] per-view aggregated samples
    };
    Tensor forward(const Tensor& q_points, const DualViewFeatures& feats,
                   const CameraCalib& calib, Trace* trace = nullptr) const;

    const DecoderConfig& config() const { return cfg_; }

  private:
    Tensor sample_view(const Tensor& value, const Tensor& coords_nm, const Tensor& attn,
                       std::size_t rows) const;

    DecoderConfig cfg_;
    nn::Mlp ref_, delta_;
    nn::LinearLayer attn_pv_, attn_bev_;
    nn::ConvLayer val_pv_, val_bev_;
    nn::SeFuse fuse_;
    nn::LayerNormLayer ln_attn_, ln_ffn_;
    nn::Mlp ffn_;
};

class LaneHead {
  public:
    LaneHead() = default;
    LaneHead(nn::ParamStore& ps, const std::string& prefix, std::size_t c,
             std::size_t num_classes, std::size_t m, double y_lo, double y_hi, RngState& rng);

    LanePrediction forward(const Tensor& q_points) const;  // [N,M,C]
    const std::vector<double>& y_anchors() const { return y_anchors_; }
    std::size_t num_classes() const { return k_; }

  private:
    std::size_t k_ = 0, m_ = 0;
    std::vector<double> y_anchors_;
    nn::Mlp point_;          // C -> (x, z, vis)
    nn::LinearLayer cls_;    // mean-pooled C -> K
};

}  // namespace dv
