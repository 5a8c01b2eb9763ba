#include "dv/decoder.hpp"

#include <stdexcept>

namespace dv {

void DecoderConfig::validate() const {
    if (heads == 0 || samples == 0 || dim == 0 || layers == 0) {
        throw std::invalid_argument("DecoderConfig: zero extent");
    }
    if (dim % heads != 0) {
        throw std::invalid_argument("DecoderConfig: embed dim must divide by heads");
    }
    if (!(roi_x_lo < roi_x_hi && roi_y_lo < roi_y_hi && roi_z_lo < roi_z_hi)) {
        throw std::invalid_argument("DecoderConfig: empty ROI");
    }
}

DecoderLayer::DecoderLayer(nn::ParamStore& ps, const std::string& prefix,
                           const DecoderConfig& cfg, RngState& rng)
    : cfg_(cfg) {
    cfg_.validate();
    const std::size_t c = cfg_.dim, hs = cfg_.heads * cfg_.samples;
    ref_ = nn::Mlp(ps, prefix + ".ref", c, c, 3, rng);
    delta_ = nn::Mlp(ps, prefix + ".delta", c, c, hs * 3, rng);
    attn_pv_ = nn::LinearLayer(ps, prefix + ".attn_pv", c, hs, rng);
    attn_bev_ = nn::LinearLayer(ps, prefix + ".attn_bev", c, hs, rng);
    val_pv_ = nn::ConvLayer(ps, prefix + ".val_pv", c, c, 1, 1, 0, rng);
    val_bev_ = nn::ConvLayer(ps, prefix + ".val_bev", c, c, 1, 1, 0, rng);
    fuse_ = nn::SeFuse(ps, prefix + ".fuse", c, rng);
    ln_attn_ = nn::LayerNormLayer(ps, prefix + ".ln_attn", c);
    ln_ffn_ = nn::LayerNormLayer(ps, prefix + ".ln_ffn", c);
    ffn_ = nn::Mlp(ps, prefix + ".ffn", c, 2 * c, c, rng);
}

DecoderLayer::Deformed DecoderLayer::deform_points(const Tensor& q_points) const {
    if (q_points.rank() != 3 || q_points.dim(2) != cfg_.dim) {
        throw std::invalid_argument("deform_points: expects [N,M,C]");
    }
    const std::size_t n = q_points.dim(0), m = q_points.dim(1);
    const std::size_t hs = cfg_.heads * cfg_.samples;
    Deformed out;
    // bounded reference: sigmoid into the configured ROI
    Tensor t = sigmoid(ref_.forward(q_points));  // [N,M,3] in (0,1)
    Tensor tx = narrow(t, 2, 0, 1), ty = narrow(t, 2, 1, 1), tz = narrow(t, 2, 2, 1);
    out.ref3d = concat({add_scalar(scale(tx, cfg_.roi_x_hi - cfg_.roi_x_lo), cfg_.roi_x_lo),
                        add_scalar(scale(ty, cfg_.roi_y_hi - cfg_.roi_y_lo), cfg_.roi_y_lo),
                        add_scalar(scale(tz, cfg_.roi_z_hi - cfg_.roi_z_lo), cfg_.roi_z_lo)},
                       2);
    Tensor delta = reshape(delta_.forward(q_points), {n, m, hs, 3});  // meters, unbounded
    out.s3d = add_bcast_lane(reshape(delta, {n * m, hs, 3}), reshape(out.ref3d, {n * m, 3}));
    out.s3d = reshape(out.s3d, {n, m, hs, 3});
    return out;
}

Tensor DecoderLayer::sample_view(const Tensor& value, const Tensor& coords_nm,
                                 const Tensor& attn, std::size_t rows) const {
    // value: [C,H,W]; coords_nm: [rows*HS, 2]; attn: [rows*heads, samples] softmaxed
    const std::size_t ch = cfg_.dim / cfg_.heads;
    const std::size_t s = cfg_.samples, h = cfg_.heads;
    Tensor coords = reshape(coords_nm, {rows, h, s * 2});
    Tensor attn3 = reshape(attn, {rows, h, s});
    std::vector<Tensor> per_head;
    for (std::size_t k = 0; k < h; ++k) {
        Tensor ck = reshape(narrow(coords, 1, k, 1), {rows * s, 2});
        Tensor vk = narrow(value, 0, k * ch, ch);
        Tensor samp = reshape(bilinear_sample(vk, ck), {rows, s, ch});
        Tensor wk = reshape(narrow(attn3, 1, k, 1), {rows, s});
        per_head.push_back(weighted_sum_slots(samp, wk));  // [rows, ch]
    }
    return concat(per_head, 1);  // [rows, C]
}

Tensor DecoderLayer::forward(const Tensor& q_points, const DualViewFeatures& feats,
                             const CameraCalib& calib, Trace* trace) const {
    const std::size_t n = q_points.dim(0), m = q_points.dim(1);
    const std::size_t rows = n * m, hs = cfg_.heads * cfg_.samples;
    Deformed pts = deform_points(q_points);
    Tensor flat_pts = reshape(pts.s3d, {rows * hs, 3});

    // the same deformed 3D points drive sampling in both views
    Tensor pv_coords = project_pv_norm(flat_pts, calib);
    Tensor bev_coords = project_bev_norm(flat_pts, feats.bev_grid);

    auto attn_of = [&](const nn::LinearLayer& head) {
        Tensor a = reshape(head.forward(q_points), {rows * cfg_.heads, cfg_.samples});
        return softmax(a, 1);
    };
    Tensor d_pv = sample_view(val_pv_.forward(feats.f_pv), pv_coords,
                              attn_of(attn_pv_), rows);
    Tensor d_bev = cfg_.use_bev
                       ? sample_view(val_bev_.forward(feats.f_bev), bev_coords,
                                     attn_of(attn_bev_), rows)
                       : Tensor::zeros({rows, cfg_.dim});
    if (trace) {
        trace->pts = pts;
        trace->pv_coords = pv_coords;
        trace->bev_coords = bev_coords;
        trace->d_pv = d_pv;
        trace->d_bev = d_bev;
    }
    Tensor fused = fuse_.forward(d_pv, d_bev);  // [rows, C]
    Tensor q = ln_attn_.forward(add(reshape(q_points, {rows, cfg_.dim}), fused));
    q = ln_ffn_.forward(add(q, ffn_.forward(q)));
    return reshape(q, {n, m, cfg_.dim});
}

LaneHead::LaneHead(nn::ParamStore& ps, const std::string& prefix, std::size_t c,
                   std::size_t num_classes, std::size_t m, double y_lo, double y_hi,
                   RngState& rng)
    : k_(num_classes), m_(m) {
    if (m < 2 || !(y_lo < y_hi)) throw std::invalid_argument("LaneHead: bad anchor span");
    if (num_classes < 2) throw std::invalid_argument("LaneHead: needs background + lanes");
    y_anchors_.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        y_anchors_[i] = y_lo + (y_hi - y_lo) * static_cast<double>(i) /
                                   static_cast<double>(m - 1);
    }
    point_ = nn::Mlp(ps, prefix + ".point", c, c, 3, rng);
    cls_ = nn::LinearLayer(ps, prefix + ".cls", c, num_classes, rng);
}

LanePrediction LaneHead::forward(const Tensor& q_points) const {
    if (q_points.rank() != 3 || q_points.dim(1) != m_) {
        throw std::invalid_argument("LaneHead: expects [N,M,C]");
    }
    const std::size_t n = q_points.dim(0);
    LanePrediction out;
    out.y_anchors = y_anchors_;
    Tensor pt = point_.forward(q_points);  // [N,M,3]
    out.x = reshape(narrow(pt, 2, 0, 1), {n, m_});
    out.z = reshape(narrow(pt, 2, 1, 1), {n, m_});
    out.vis_logits = reshape(narrow(pt, 2, 2, 1), {n, m_});
    Tensor pooled =
        weighted_sum_slots(q_points, Tensor::full({n, m_}, 1.0 / static_cast<double>(m_)));
    out.class_logits = cls_.forward(pooled);  // [N, K]
    return out;
}

}  // namespace dv
