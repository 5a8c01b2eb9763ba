#include "dv/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace dv {

void BackboneConfig::validate() const {
    if (stride == 0 || img_h % stride != 0 || img_w % stride != 0) {
        throw std::invalid_argument("BackboneConfig: image size must be divisible by stride");
    }
    if (c1 == 0 || c == 0 || depth_bins == 0) {
        throw std::invalid_argument("BackboneConfig: zero width");
    }
    if (!(depth_min < depth_max)) {
        throw std::invalid_argument("BackboneConfig: depth range empty");
    }
}

Backbone::Backbone(nn::ParamStore& ps, const BackboneConfig& cfg, RngState& rng) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.stride != 4) {
        throw std::invalid_argument("Backbone: stage-1 stack realizes stride 4 only");
    }
    pv1a_ = nn::ConvLayer(ps, "bb.pv1a", 3, cfg_.c1, 3, 2, 1, rng);
    pv1b_ = nn::ConvLayer(ps, "bb.pv1b", cfg_.c1, cfg_.c1, 3, 2, 1, rng);
    pv2a_ = nn::ConvLayer(ps, "bb.pv2a", 2 * cfg_.c1, cfg_.c, 3, 1, 1, rng);
    pv2b_ = nn::ConvLayer(ps, "bb.pv2b", cfg_.c, cfg_.c, 3, 1, 1, rng);
    pt1_ = nn::LinearLayer(ps, "bb.pt1", kPillarFeatureDim, cfg_.c1, rng);
    pt2_ = nn::LinearLayer(ps, "bb.pt2", 2 * cfg_.c1, cfg_.c, rng);
    bev2_ = nn::ConvLayer(ps, "bb.bev2", cfg_.c, cfg_.c, 3, 1, 1, rng);
    depth_ = nn::ConvLayer(ps, "bb.depth", cfg_.c, cfg_.depth_bins, 1, 1, 0, rng);
}

Tensor Backbone::pv_stage1(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.img_h ||
        image.dim(2) != cfg_.img_w) {
        throw std::invalid_argument("pv_stage1: image shape mismatch with configured size");
    }
    return relu(pv1b_.forward(relu(pv1a_.forward(image))));
}

PointStage1 Backbone::pt_stage1(const PointCloud& cloud, const GridSpec& grid) const {
    PointStage1 out;
    out.pillars = pillarize(cloud, grid, cfg_.max_points_per_pillar);
    const std::size_t k = out.pillars.cell_row.size();
    if (k == 0) {
        out.canvas = Tensor::zeros({cfg_.c1, grid.rows, grid.cols});
        out.empty = true;
        return out;
    }
    const std::size_t s = cfg_.max_points_per_pillar;
    Tensor flat = reshape(out.pillars.features, {k * s, kPillarFeatureDim});
    out.per_point = relu(pt1_.forward(flat));                       // [K*S, C1]
    Tensor pooled = masked_max_slots(reshape(out.per_point, {k, s, cfg_.c1}),
                                     out.pillars.slot_mask);        // [K, C1]
    out.canvas = scatter_reduce(pooled, out.pillars.cell_row, out.pillars.cell_col,
                                grid.rows, grid.cols, Reduce::Mean);
    return out;
}

DualViewFeatures Backbone::bff(const Tensor& image, const PointCloud& cloud,
                               const CameraCalib& calib, const GridSpec& bev_grid,
                               BffTrace* trace) const {
    if (calib.img_h != cfg_.img_h || calib.img_w != cfg_.img_w) {
        throw std::invalid_argument("bff: calibration image size disagrees with config");
    }
    const std::size_t hf = cfg_.feat_h(), wf = cfg_.feat_w();
    Tensor s1_pv = pv_stage1(image);
    PointStage1 pt = pt_stage1(cloud, bev_grid);

    Tensor f_pt2pv;   // [C1, Hf, Wf]
    Tensor f_pv2pt;   // [K*S, C1]
    const std::size_t k = pt.pillars.cell_row.size();
    const std::size_t s = cfg_.max_points_per_pillar;
    if (!pt.empty) {
        // recover each slot's xyz from the decorated features and project once
        std::vector<Vec3> xyz(k * s);
        const double* feat = pt.pillars.features.data();
        for (std::size_t i = 0; i < k * s; ++i) {
            xyz[i] = {feat[i * kPillarFeatureDim + 0], feat[i * kPillarFeatureDim + 1],
                      feat[i * kPillarFeatureDim + 2]};
        }
        PvProjection proj = project_to_pv(xyz, calib);

        // points -> pixels: scatter slot embeddings onto the stage-1 PV grid
        std::vector<std::int64_t> rows(k * s, -1), cols(k * s, -1);
        const double fstride = static_cast<double>(cfg_.stride);
        for (std::size_t i = 0; i < k * s; ++i) {
            if (!pt.pillars.slot_mask[i] || !proj.valid[i]) continue;
            rows[i] = static_cast<std::int64_t>(std::floor(proj.v[i] / fstride));
            cols[i] = static_cast<std::int64_t>(std::floor(proj.u[i] / fstride));
            if (rows[i] < 0 || rows[i] >= static_cast<std::int64_t>(hf) || cols[i] < 0 ||
                cols[i] >= static_cast<std::int64_t>(wf)) {
                rows[i] = cols[i] = -1;
            }
        }
        f_pt2pv = scatter_reduce(pt.per_point, rows, cols, hf, wf, Reduce::Mean);

        // pixels -> points: sample stage-1 PV features at the projections
        Tensor coords = Tensor::zeros({k * s, 2});
        for (std::size_t i = 0; i < k * s; ++i) {
            if (pt.pillars.slot_mask[i] && proj.valid[i]) {
                coords.data()[i * 2 + 0] = 2.0 * proj.u[i] / static_cast<double>(cfg_.img_w) - 1.0;
                coords.data()[i * 2 + 1] = 2.0 * proj.v[i] / static_cast<double>(cfg_.img_h) - 1.0;
            } else {
                coords.data()[i * 2 + 0] = coords.data()[i * 2 + 1] = -10.0;  // zero sample
            }
        }
        f_pv2pt = bilinear_sample(s1_pv, coords);
        if (trace) {
            trace->f_pt2pv = f_pt2pv;
            trace->f_pv2pt = f_pv2pt;
            trace->pix_row = rows;
            trace->pix_col = cols;
        }
    } else if (trace) {
        *trace = BffTrace{};
    }
    if (!cfg_.fuse_lidar_to_cam || pt.empty) {
        f_pt2pv = Tensor::zeros({cfg_.c1, hf, wf});
    }

    DualViewFeatures out;
    out.stride = cfg_.stride;
    out.bev_grid = bev_grid;
    out.f_pv = relu(pv2b_.forward(relu(pv2a_.forward(concat({s1_pv, f_pt2pv}, 0)))));

    if (pt.empty) {
        out.f_bev = relu(bev2_.forward(Tensor::zeros({cfg_.c, bev_grid.rows, bev_grid.cols})));
        return out;
    }
    if (!cfg_.fuse_cam_to_lidar) {
        f_pv2pt = Tensor::zeros({k * s, cfg_.c1});
    }
    Tensor per_point2 = relu(pt2_.forward(concat({pt.per_point, f_pv2pt}, 1)));  // [K*S, C]
    Tensor pooled = masked_max_slots(reshape(per_point2, {k, s, cfg_.c}), pt.pillars.slot_mask);
    Tensor canvas = scatter_reduce(pooled, pt.pillars.cell_row, pt.pillars.cell_col,
                                   bev_grid.rows, bev_grid.cols, Reduce::Mean);
    out.f_bev = relu(bev2_.forward(canvas));
    return out;
}

Tensor Backbone::depth_logits(const Tensor& f_pv) const { return depth_.forward(f_pv); }

std::vector<double> Backbone::depth_bin_edges() const {
    std::vector<double> edges(cfg_.depth_bins + 1);
    for (std::size_t i = 0; i <= cfg_.depth_bins; ++i) {
        edges[i] = cfg_.depth_min + (cfg_.depth_max - cfg_.depth_min) *
                                        static_cast<double>(i) /
                                        static_cast<double>(cfg_.depth_bins);
    }
    return edges;
}

std::size_t Backbone::depth_bin_of(double depth) const {
    const double t = (depth - cfg_.depth_min) / (cfg_.depth_max - cfg_.depth_min);
    auto b = static_cast<std::int64_t>(std::floor(t * static_cast<double>(cfg_.depth_bins)));
    if (b < 0) b = 0;
    if (b >= static_cast<std::int64_t>(cfg_.depth_bins)) b = cfg_.depth_bins - 1;
    return static_cast<std::size_t>(b);
}

}  // namespace dv
