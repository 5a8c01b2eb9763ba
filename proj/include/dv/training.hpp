#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dv/metrics.hpp"
#include "dv/pipeline.hpp"

namespace dv {

// Raised when optimization produces a non-finite value; the message names
// the offending loss term.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double w_x = 2.0, w_z = 2.0, w_v = 1.0, w_c = 5.0;
    double w_seg = 1.0, w_depth = 0.5, w_nce = 1.0;
};

// Assigns gt masks to prediction masks. mask_logits: [N,H,W]; scores: [N,K]
// class probabilities (pass an undefined tensor to skip the class term);
// gt_masks: [G,H,W] binary. Cost per pair:
// lambda_dice * (1 - Dice(sigmoid(logit), gt)) + lambda_cls * (1 - score[gt class]).
Assignment mask_match(const Tensor& mask_logits, const Tensor& scores,
                      const Tensor& gt_masks, const std::vector<int>& gt_classes,
                      double lambda_dice = 2.0, double lambda_cls = 1.0);

// Assigns gt lanes to predicted lanes: mean visible-anchor L1 in (x,z) plus
// lambda_cls * (1 - predicted probability of the gt category).
Assignment lane_match(const LanePrediction& pred, const std::vector<AnchorLane>& gts,
                      double lambda_cls = 1.0);

// Multi-class focal loss, mean over rows with target >= 0. Background is
// class 0 and gets the (1 - alpha) weight.
Tensor focal_loss(const Tensor& logits, const std::vector<std::int64_t>& targets,
                  double gamma = 2.0, double alpha = 0.25);

struct LaneLosses {
    Tensor x, z, v, c;
};
LaneLosses lane_losses(const LanePrediction& pred, const std::vector<AnchorLane>& gts,
                       const Assignment& assign, double gamma = 2.0, double alpha = 0.25);

// Dice over matched pairs plus pixelwise BCE over every prediction mask
// (unmatched masks are pushed toward empty).
Tensor seg_loss(const Tensor& mask_logits, const Tensor& gt_masks,
                const Assignment& assign);

// Cross-entropy over depth bins at pixels with a LiDAR hit (label >= 0).
Tensor depth_loss(const Tensor& depth_logits, const std::vector<std::int64_t>& labels);

struct AuxLosses {
    Tensor seg, depth;
};
AuxLosses aux_losses(const ViewQueries& pv, const ViewQueries& bev,
                     const Tensor& gt_pv_masks, const Tensor& gt_bev_masks,
                     const Assignment& as_pv, const Assignment& as_bev,
                     const Tensor& depth_logits, const std::vector<std::int64_t>& depth_labels);

// Weighted sum; throws NumericError naming the first non-finite term.
Tensor total_loss(const LaneLosses& lane, const AuxLosses& aux, const Tensor& nce,
                  const LossWeights& w);

// Adam with decoupled weight decay.
class AdamW {
  public:
    explicit AdamW(double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);
    void step(nn::ParamStore& ps, double lr);

  private:
    struct Slot {
        std::vector<double> m, v;
    };
    double wd_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Slot> state_;
};

// Cosine annealing from base to 0 over total steps.
double cosine_lr(double base, std::size_t step, std::size_t total_steps);

struct TrainSample {
    Tensor image;
    PointCloud cloud;
    CameraCalib calib;
    std::vector<AnchorLane> gts;             // on the model's y anchors
    Tensor pv_masks, bev_masks;              // [G,Hf,Wf], [G,rows,cols]
    std::vector<std::int64_t> depth_labels;  // Hf*Wf, -1 = no LiDAR hit
};

struct TrainConfig {
    std::size_t epochs = 60;
    std::size_t batch = 4;
    double lr = 2e-4;
    double weight_decay = 0.01;
    LossWeights weights;
    std::uint64_t seed = 0;
    double noise_prob = 0.0;  // calibration perturbation during training
    NoiseSetting noise;
    double eval_d_thre = 0.5;     // threshold for the train-F1 log column
    double confidence = 0.5;
    std::string log_path;         // JSON-lines per epoch; empty disables
};

struct EpochLog {
    std::size_t epoch = 0;
    std::map<std::string, double> terms;  // mean per-sample loss terms
    double train_f1 = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
};

// Confidence = 1 - background probability; category = argmax over lane
// classes; anchor validity from thresholded visibility.
std::vector<AnchorLane> to_anchor_lanes(const LanePrediction& pred);

// Inference + evaluation of the model on a labeled set.
EvalReport evaluate_model(const LaneModel& model, const std::vector<TrainSample>& data,
                          double d_thre, double confidence, std::uint64_t seed = 1);

TrainResult train(LaneModel& model, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg);

}  // namespace dv
