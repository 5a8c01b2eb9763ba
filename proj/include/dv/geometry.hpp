#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dv/rng.hpp"
#include "dv/tensor.hpp"

namespace dv {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

// Pinhole camera: intrinsics in pixels, extrinsic rigid transform ego->camera
// (row-major 4x4). Ego frame: x lateral-right, y forward, z up. Camera frame:
// x right, y down, z forward.
struct CameraCalib {
    double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
    std::array<double, 16> extrinsic{};  // row-major ego->camera
    std::size_t img_h = 0, img_w = 0;

    Vec3 to_camera(const Vec3& p) const;
    void validate() const;  // throws on bad intrinsics / non-rigid extrinsic
};

CameraCalib load_calib(const std::string& path);
void save_calib(const std::string& path, const CameraCalib& c);

// BEV discretization. Columns index x (lateral), rows index y (forward).
struct GridSpec {
    double origin_x = 0.0, origin_y = 0.0;  // meters at the corner of cell (0,0)
    double cell_x = 0.2, cell_y = 0.4;      // meters per cell
    std::size_t cols = 0, rows = 0;

    void validate() const;
    double extent_x() const { return cell_x * static_cast<double>(cols); }
    double extent_y() const { return cell_y * static_cast<double>(rows); }
};

struct PointCloud {
    std::vector<Vec3> xyz;
    std::vector<double> intensity;  // in [0,1], same length as xyz

    std::size_t size() const { return xyz.size(); }
};

void save_cloud(const std::string& path, const PointCloud& pc);
PointCloud load_cloud(const std::string& path);

struct PvProjection {
    std::vector<double> u, v, depth;  // pixels / meters, camera-frame depth
    std::vector<std::uint8_t> valid;  // depth > 0 and inside image
};
PvProjection project_to_pv(const std::vector<Vec3>& pts, const CameraCalib& calib);

struct BevProjection {
    std::vector<std::int64_t> row, col;  // cell indices (may be out of range)
    std::vector<double> nx, ny;          // normalized sampling coords in [-1,1]
    std::vector<std::uint8_t> valid;     // inside grid extents
};
BevProjection project_to_bev(const std::vector<Vec3>& pts, const GridSpec& grid);

// Per-point decorated features (x, y, z, intensity, offset to pillar mean x3,
// offset to cell center x2), grouped by BEV cell. Deterministic: pillars
// ordered by cell id, points by original index, truncated at max_points.
inline constexpr std::size_t kPillarFeatureDim = 9;
struct Pillars {
    Tensor features;                       // [K, S, 9]
    std::vector<std::uint8_t> slot_mask;   // K*S validity
    std::vector<std::int64_t> cell_row, cell_col;  // K
};
Pillars pillarize(const PointCloud& cloud, const GridSpec& grid, std::size_t max_points);

// Left-multiplies the extrinsic by a random rigid disturbance: rotation of
// uniform magnitude in rot_range_deg about a uniform axis, translation of
// uniform magnitude in trans_range_cm along a uniform direction.
CameraCalib perturb_calib(const CameraCalib& calib, double rot_lo_deg, double rot_hi_deg,
                          double trans_lo_cm, double trans_hi_cm, RngState& rng);

// Rotation angle (radians) of the relative rotation R_a * R_b^T.
double relative_rotation_angle(const CameraCalib& a, const CameraCalib& b);

// ---- differentiable projections for the decoder ----

// pts: [..., 3] ego-frame; output [..., 2] normalized image coords in [-1,1]
// (cell-center convention shared with bilinear_sample). Points with
// camera-frame depth below z_min are pushed far outside [-1,1] with zero
// gradient so downstream sampling returns zeros.
Tensor project_pv_norm(const Tensor& pts, const CameraCalib& calib, double z_min = 0.1);

// pts: [..., 3]; output [..., 2] normalized BEV coords (x->cols, y->rows).
Tensor project_bev_norm(const Tensor& pts, const GridSpec& grid);

}  // namespace dv
