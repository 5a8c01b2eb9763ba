#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dv/geometry.hpp"
#include "dv/metrics.hpp"
#include "dv/rng.hpp"
#include "dv/tensor.hpp"

namespace dv {

// Forward-facing beam sensor mounted above the ego origin.
struct LidarSpec {
    std::size_t beams = 32;          // elevation channels
    std::size_t rays_per_beam = 120; // azimuth samples across the fan
    double fov_deg = 120.0;          // azimuth fan, centered on +y
    double max_range = 120.0;        // meters
    double height = 1.8;             // sensor height above the ego origin
    double dropout = 0.0;            // per-ray drop probability
    double sigma = 0.0;              // Gaussian range noise, meters

    void validate() const;
};

struct SceneSpec {
    std::size_t lanes_lo = 2, lanes_hi = 4;
    double curvature_lo = -4e-4, curvature_hi = 4e-4;  // 1/m
    double max_slope = 0.01;        // |dz/dy| bound for the linear ground term
    double undulation_amp = 1.5;    // sinusoidal ground amplitude bound, m
    double lane_length = 100.0;     // lanes span y in [3, lane_length]
    double lane_spacing = 3.7;      // lateral offset between adjacent lanes
    std::vector<double> category_probs{0.4, 0.3, 0.2, 0.1};  // categories 1..K
    std::size_t img_h = 96, img_w = 160;
    double focal = 120.0;           // pixels
    double cam_height = 1.5;        // meters
    LidarSpec lidar;

    void validate() const;
};

// Shared ground elevation: z(y) = slope*y + amp*sin(2*pi*y/period + phase).
struct GroundProfile {
    double slope = 0.0, amp = 0.0, period = 100.0, phase = 0.0;

    double z(double y) const;
};

// Resolution and binning at which training labels are rendered.
struct LabelSpec {
    std::size_t stride = 4;          // PV masks at img/stride resolution
    GridSpec bev_grid;
    std::size_t depth_bins = 64;
    double depth_min = 2.0, depth_max = 50.0;
    std::vector<double> y_anchors;
    double stroke_pv_px = 4.0;       // lane stroke width in image pixels
    double stroke_bev_cells = 1.0;

    void validate() const;
};

struct SceneLabels {
    Tensor pv_masks;                  // [G, H/stride, W/stride]
    Tensor bev_masks;                 // [G, rows, cols]
    std::vector<std::int64_t> depth;  // per feature pixel, -1 = no LiDAR hit
    std::vector<AnchorLane> gts;      // lanes resampled onto y_anchors
};

struct Scene {
    std::vector<LanePolyline> lanes;  // ego frame, ordered by increasing y
    GroundProfile ground;
    CameraCalib calib;
    PointCloud cloud;
    Tensor image;                     // [3, H, W]
    SceneLabels labels;
};

// Lateral distance from (x, y) to the nearest lane centerline; +inf when y is
// outside every lane's span.
double nearest_lane_offset(const std::vector<LanePolyline>& lanes, double x, double y);

// Casts beams against the ground surface. Marking returns (within 0.3 m of a
// lane centerline) carry intensity 0.9, plain ground 0.2. Range noise is
// applied along the ray after the exact surface intersection.
PointCloud render_lidar(const std::vector<LanePolyline>& lanes, const GroundProfile& ground,
                        const LidarSpec& spec, RngState& rng);

// Deterministic raster: hashed ground texture below the horizon plus projected
// lane markings with distance shading.
Tensor render_image(const std::vector<LanePolyline>& lanes, const CameraCalib& calib);

SceneLabels make_labels(const std::vector<LanePolyline>& lanes, const PointCloud& cloud,
                        const CameraCalib& calib, const LabelSpec& spec);

Scene gen_scene(const SceneSpec& spec, const LabelSpec& labels, RngState& rng);

// Directory bundle: calib.json, cloud.bin, image.bin, pv_masks.bin,
// bev_masks.bin, labels.json, lanes.jsonl.
void save_scene_bundle(const std::string& dir, const Scene& scene);
Scene load_scene_bundle(const std::string& dir);

}  // namespace dv
