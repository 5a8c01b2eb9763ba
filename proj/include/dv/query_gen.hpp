#pragma once

#include <cstdint>
#include <vector>

#include "dv/nn.hpp"
#include "dv/tensor.hpp"

namespace dv {

// Two-channel spatial localization features: channel 0 a column ramp,
// channel 1 a row ramp, both spanning [-1,1] corner to corner.
Tensor coord_features(std::size_t h, std::size_t w);  // [2,H,W]

struct ViewQueries {
    Tensor a;            // [N, H*W] sigmoid instance activation maps
    Tensor q;            // [N, C] pooled query features, Q = A x F^T
    Tensor mask_logits;  // [N, H, W] auxiliary segmentation head
    std::size_t h = 0, w = 0;
};

// Instance-activation-map query head for one view.
class IamHead {
  public:
    IamHead() = default;
    IamHead(nn::ParamStore& ps, const std::string& prefix, std::size_t c_in,
            std::size_t n, RngState& rng);
    ViewQueries forward(const Tensor& f) const;  // f: [C,H,W]
    std::size_t n() const { return n_; }

  private:
    std::size_t n_ = 0;
    nn::ConvLayer stem_, a_head_, mask_head_;
};

struct UnifiedQueries {
    Tensor c_hat;   // [N, C] unified centers
    Tensor assign;  // [N, N]: row = BEV query, col = center; rows sum to 1
};

// Lane-centric clustering: centers start at Q_pv, each BEV query is softly
// (or hard, straight-through) assigned to its most similar center, and the
// assigned BEV features are summed into the centers.
UnifiedQueries cluster_unify(const Tensor& q_pv, const Tensor& q_bev, double tau_g,
                             bool hard, RngState& rng);

// First layer: e_or_q is the [M,C] point embedding table; later layers pass
// the previous [N,M,C] point queries.
Tensor build_point_queries(const Tensor& c_hat, const Tensor& e_or_q);

// Cross-view contrastive loss over L2-normalized queries. gt ids use -1 for
// background; an anchor contributes only if its id appears in the other view.
Tensor infonce_loss(const Tensor& q_pv, const Tensor& q_bev,
                    const std::vector<std::int64_t>& ids_pv,
                    const std::vector<std::int64_t>& ids_bev, double tau);

}  // namespace dv
