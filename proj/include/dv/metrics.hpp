#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dv/geometry.hpp"

namespace dv {

// One-to-one assignment between two index sets.
struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col)
    std::vector<std::size_t> unmatched_rows, unmatched_cols;
    double total_cost = 0.0;
};

// Minimum-total-cost maximum-cardinality matching on an n x m cost matrix
// (row-major). Ties between equal-cost assignments break toward the
// lexicographically smallest pair list.
Assignment hungarian(const std::vector<double>& cost, std::size_t n, std::size_t m);

// ---- lane containers and files ----

struct LanePolyline {
    int category = 1;
    std::vector<Vec3> xyz;               // ordered along the lane
    std::vector<double> visibility;      // per vertex, in [0,1]
};

struct SceneLanes {
    std::string scene_id;
    std::vector<LanePolyline> lanes;
};

// JSON-lines, one scene per line:
// {"scene_id": ..., "lanes": [{"category", "xyz": [[x,y,z],...], "visibility": [...]}]}
void save_lanes_jsonl(const std::string& path, const std::vector<SceneLanes>& scenes);
std::vector<SceneLanes> load_lanes_jsonl(const std::string& path);

// A lane resampled onto shared y anchors.
struct AnchorLane {
    int category = 1;
    double score = 1.0;                 // prediction confidence; 1 for gt
    std::vector<double> x, z;           // per anchor
    std::vector<std::uint8_t> valid;    // anchor inside the lane's y-span
};

// Linear interpolation of x and z at each anchor; anchors outside the
// polyline's y-span are invalid. Throws on fewer than 2 points.
AnchorLane resample_lane(const LanePolyline& lane, const std::vector<double>& y_anchors);

struct EvalConfig {
    std::vector<double> d_thre{0.5, 1.5};  // meters
    std::vector<double> y_anchors;
    double near_far_split = 40.0;  // meters
    double min_match_fraction = 0.75;
    double confidence = 0.5;       // predictions below are dropped

    void validate() const;
};

struct LaneMatch {
    Assignment assign;                // over confidence-filtered preds x gts
    std::vector<std::uint8_t> is_tp;  // per pair: 75% rule satisfied
    std::vector<std::size_t> kept;    // original pred indices that passed confidence
};

// Per-anchor Euclidean distance in (x,z) over mutually valid anchors,
// clamped above d_thre; minimum-cost maximum-cardinality matching; a pair is
// a TP only if at least min_match_fraction of its mutual anchors are under
// d_thre.
LaneMatch match_lanes(const std::vector<AnchorLane>& preds,
                      const std::vector<AnchorLane>& gts, double d_thre,
                      const EvalConfig& cfg);

struct EvalReport {
    double f1 = 0.0, precision = 0.0, recall = 0.0;
    double category_accuracy = 0.0;
    double x_err_near = 0.0, x_err_far = 0.0;
    double z_err_near = 0.0, z_err_far = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
};

EvalReport evaluate(const std::vector<std::vector<AnchorLane>>& preds,
                    const std::vector<std::vector<AnchorLane>>& gts, double d_thre,
                    const EvalConfig& cfg);

std::string report_json(const EvalReport& r);

// F1 at each threshold; thresholds must be ascending.
std::vector<std::pair<double, double>> threshold_sweep(
    const std::vector<std::vector<AnchorLane>>& preds,
    const std::vector<std::vector<AnchorLane>>& gts, const std::vector<double>& thresholds,
    const EvalConfig& cfg);

// ---- calibration-noise robustness driver ----

struct NoiseSetting {
    std::string name = "N";
    double rot_lo_deg = 1.0, rot_hi_deg = 5.0;
    double trans_lo_cm = 0.5, trans_hi_cm = 1.0;

    NoiseSetting doubled() const;  // the stronger variant
};

struct RobustnessRow {
    double prob = 0.0;
    EvalReport report;
};

// Evaluates predict(scene, calib) under calibration perturbations applied
// with probability prob. Scenes share random draws across probability levels
// (common random numbers), so a scene perturbed at p=0.3 is perturbed with
// the same disturbance at every higher p.
std::vector<RobustnessRow> robustness_run(
    const std::function<std::vector<AnchorLane>(std::size_t, const CameraCalib&)>& predict,
    const std::vector<CameraCalib>& calibs,
    const std::vector<std::vector<AnchorLane>>& gts, double d_thre, const EvalConfig& cfg,
    const NoiseSetting& noise, const std::vector<double>& probs, std::uint64_t seed);

}  // namespace dv
