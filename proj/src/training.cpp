#include "dv/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace dv {

namespace {

std::vector<double> softmax_row(const double* row, std::size_t k) {
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    std::vector<double> p(k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        p[j] = std::exp(row[j] - mx);
        s += p[j];
    }
    for (auto& v : p) v /= s;
    return p;
}

}  // namespace

Assignment mask_match(const Tensor& mask_logits, const Tensor& scores,
                      const Tensor& gt_masks, const std::vector<int>& gt_classes,
                      double lambda_dice, double lambda_cls) {
    if (mask_logits.rank() != 3) throw std::invalid_argument("mask_match: logits [N,H,W]");
    const std::size_t n = mask_logits.dim(0);
    const std::size_t hw = mask_logits.dim(1) * mask_logits.dim(2);
    const std::size_t g = gt_masks.defined() ? gt_masks.dim(0) : 0;
    if (g == 0) return hungarian({}, n, 0);
    if (gt_masks.dim(1) * gt_masks.dim(2) != hw) {
        throw std::invalid_argument("mask_match: mask shapes differ");
    }
    if (scores.defined() && gt_classes.size() != g) {
        throw std::invalid_argument("mask_match: need a class per gt mask");
    }
    std::vector<double> prob(n * hw);
    for (std::size_t i = 0; i < n * hw; ++i) {
        const double x = mask_logits.data()[i];
        prob[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    std::vector<double> cost(n * g);
    for (std::size_t i = 0; i < n; ++i) {
        const double* p = prob.data() + i * hw;
        double psum = std::accumulate(p, p + hw, 0.0);
        for (std::size_t j = 0; j < g; ++j) {
            const double* q = gt_masks.data() + j * hw;
            double inter = 0.0, qsum = 0.0;
            for (std::size_t k = 0; k < hw; ++k) {
                inter += p[k] * q[k];
                qsum += q[k];
            }
            const double dice = (2.0 * inter + 1.0) / (psum + qsum + 1.0);
            double c = lambda_dice * (1.0 - dice);
            if (scores.defined()) {
                c += lambda_cls *
                     (1.0 - scores.data()[i * scores.dim(1) +
                                          static_cast<std::size_t>(gt_classes[j])]);
            }
            cost[i * g + j] = c;
        }
    }
    return hungarian(cost, n, g);
}

Assignment lane_match(const LanePrediction& pred, const std::vector<AnchorLane>& gts,
                      double lambda_cls) {
    const std::size_t n = pred.x.dim(0), m = pred.x.dim(1), g = gts.size();
    const std::size_t k = pred.class_logits.dim(1);
    if (g == 0) return hungarian({}, n, 0);
    std::vector<double> cost(n * g, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p = softmax_row(pred.class_logits.data() + i * k, k);
        for (std::size_t j = 0; j < g; ++j) {
            const AnchorLane& gt = gts[j];
            double acc = 0.0;
            std::size_t cnt = 0;
            for (std::size_t a = 0; a < m && a < gt.valid.size(); ++a) {
                if (!gt.valid[a]) continue;
                acc += std::fabs(pred.x.data()[i * m + a] - gt.x[a]) +
                       std::fabs(pred.z.data()[i * m + a] - gt.z[a]);
                ++cnt;
            }
            double c = cnt ? acc / static_cast<double>(cnt) : 1e6;
            c += lambda_cls * (1.0 - p[static_cast<std::size_t>(gt.category)]);
            cost[i * g + j] = c;
        }
    }
    return hungarian(cost, n, g);
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::int64_t>& targets,
                  double gamma, double alpha) {
    if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
        throw std::invalid_argument("focal_loss: expects [R,K] with R targets");
    }
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    std::size_t counted = 0;
    for (auto t : targets) {
        if (t >= 0) ++counted;
    }
    if (counted == 0) return Tensor::scalar(0.0);
    const double inv = 1.0 / static_cast<double>(counted);
    Tensor out = make_node({1}, {logits}, [rows, k, targets, gamma, alpha, inv](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] < 0) continue;
            std::vector<double> prob = softmax_row(p->v.data() + r * k, k);
            const std::size_t t = static_cast<std::size_t>(targets[r]);
            const double at = t == 0 ? 1.0 - alpha : alpha;
            const double pt = std::max(prob[t], 1e-12);
            const double om = 1.0 - pt;
            // dL/dpt of -at * (1-pt)^g * log(pt)
            const double dldpt = at * (gamma * std::pow(om, gamma - 1.0) * std::log(pt) -
                                       std::pow(om, gamma) / pt);
            for (std::size_t j = 0; j < k; ++j) {
                const double d = (j == t ? 1.0 : 0.0) - prob[j];
                gp[r * k + j] += self.g[0] * inv * dldpt * pt * d;
            }
        }
    });
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0) continue;
        std::vector<double> prob = softmax_row(logits.data() + r * k, k);
        const std::size_t t = static_cast<std::size_t>(targets[r]);
        const double at = t == 0 ? 1.0 - alpha : alpha;
        const double pt = std::max(prob[t], 1e-12);
        loss += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    out.values()[0] = loss * inv;
    return out;
}

LaneLosses lane_losses(const LanePrediction& pred, const std::vector<AnchorLane>& gts,
                       const Assignment& assign, double gamma, double alpha) {
    const std::size_t n = pred.x.dim(0), m = pred.x.dim(1);
    std::vector<double> gx(n * m, 0.0), gz(n * m, 0.0), gv(n * m, 0.0);
    std::vector<double> w_pt(n * m, 0.0), w_vis(n * m, 0.0);
    std::vector<std::int64_t> cls(n, 0);  // background unless matched
    std::size_t pts = 0;
    for (const auto& [i, j] : assign.pairs) {
        const AnchorLane& gt = gts[j];
        cls[i] = gt.category;
        for (std::size_t a = 0; a < m && a < gt.valid.size(); ++a) {
            w_vis[i * m + a] = 1.0;
            gv[i * m + a] = gt.valid[a] ? 1.0 : 0.0;
            if (!gt.valid[a]) continue;
            gx[i * m + a] = gt.x[a];
            gz[i * m + a] = gt.z[a];
            w_pt[i * m + a] = 1.0;
            ++pts;
        }
    }
    LaneLosses out;
    if (pts > 0) {
        Tensor wm = Tensor::from_values({n, m}, w_pt);
        const double inv = 1.0 / static_cast<double>(pts);
        out.x = scale(sum(mul(abs(sub(pred.x, Tensor::from_values({n, m}, gx))), wm)), inv);
        out.z = scale(sum(mul(abs(sub(pred.z, Tensor::from_values({n, m}, gz))), wm)), inv);
    } else {
        out.x = Tensor::scalar(0.0);
        out.z = Tensor::scalar(0.0);
    }
    out.v = bce_with_logits(pred.vis_logits, gv, w_vis);
    out.c = focal_loss(pred.class_logits, cls, gamma, alpha);
    return out;
}

Tensor seg_loss(const Tensor& mask_logits, const Tensor& gt_masks,
                const Assignment& assign) {
    const std::size_t n = mask_logits.dim(0);
    const std::size_t hw = mask_logits.dim(1) * mask_logits.dim(2);
    std::vector<double> target(n * hw, 0.0);
    for (const auto& [i, j] : assign.pairs) {
        const double* q = gt_masks.data() + j * hw;
        std::copy(q, q + hw, target.begin() + static_cast<std::ptrdiff_t>(i * hw));
    }
    Tensor bce = bce_with_logits(mask_logits, target, {});
    if (assign.pairs.empty()) return bce;
    std::vector<Tensor> dices;
    for (const auto& [i, j] : assign.pairs) {
        Tensor p = sigmoid(narrow(mask_logits, 0, i, 1));
        Tensor q = Tensor::from_values({1, mask_logits.dim(1), mask_logits.dim(2)},
                                       std::vector<double>(gt_masks.data() + j * hw,
                                                           gt_masks.data() + (j + 1) * hw));
        Tensor inter = sum(mul(p, q));
        Tensor num = add_scalar(scale(inter, 2.0), 1.0);
        Tensor den = add_scalar(add(sum(p), sum(q)), 1.0);
        // positive ratio via exp(log a - log b); there is no division op
        dices.push_back(add_scalar(scale(exp(sub(log(num), log(den))), -1.0), 1.0));
    }
    Tensor dice = dices[0];
    for (std::size_t i = 1; i < dices.size(); ++i) dice = add(dice, dices[i]);
    dice = scale(dice, 1.0 / static_cast<double>(dices.size()));
    return add(dice, bce);
}

Tensor depth_loss(const Tensor& depth_logits, const std::vector<std::int64_t>& labels) {
    const std::size_t b = depth_logits.dim(0);
    const std::size_t hw = depth_logits.dim(1) * depth_logits.dim(2);
    if (labels.size() != hw) throw std::invalid_argument("depth_loss: label count");
    // transpose [B,HW] -> [HW,B] for the rowwise cross-entropy
    std::vector<double> eye(b * b, 0.0);
    for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = 1.0;
    Tensor rows = matmul_at(reshape(depth_logits, {b, hw}), Tensor::from_values({b, b}, eye));
    return softmax_cross_entropy(rows, labels);
}

AuxLosses aux_losses(const ViewQueries& pv, const ViewQueries& bev,
                     const Tensor& gt_pv_masks, const Tensor& gt_bev_masks,
                     const Assignment& as_pv, const Assignment& as_bev,
                     const Tensor& depth_logits, const std::vector<std::int64_t>& depth_labels) {
    AuxLosses out;
    out.seg = add(seg_loss(pv.mask_logits, gt_pv_masks, as_pv),
                  seg_loss(bev.mask_logits, gt_bev_masks, as_bev));
    out.depth = depth_loss(depth_logits, depth_labels);
    return out;
}

Tensor total_loss(const LaneLosses& lane, const AuxLosses& aux, const Tensor& nce,
                  const LossWeights& w) {
    const std::pair<const char*, const Tensor*> terms[] = {
        {"x", &lane.x},     {"z", &lane.z},       {"vis", &lane.v}, {"cls", &lane.c},
        {"seg", &aux.seg},  {"depth", &aux.depth}, {"nce", &nce}};
    for (const auto& [name, t] : terms) {
        if (!t->all_finite()) {
            throw NumericError(std::string("non-finite loss term: ") + name);
        }
    }
    Tensor total = add(add(scale(lane.x, w.w_x), scale(lane.z, w.w_z)),
                       add(scale(lane.v, w.w_v), scale(lane.c, w.w_c)));
    total = add(total, add(scale(aux.seg, w.w_seg), scale(aux.depth, w.w_depth)));
    total = add(total, scale(nce, w.w_nce));
    return total;
}

AdamW::AdamW(double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(nn::ParamStore& ps, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : ps.all()) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        Slot& s = state_[name];
        s.m.resize(p.size(), 0.0);
        s.v.resize(p.size(), 0.0);
        const auto& g = p.grad();
        auto& val = p.values();
        for (std::size_t i = 0; i < val.size(); ++i) {
            s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g[i];
            s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g[i] * g[i];
            const double mh = s.m[i] / bc1;
            const double vh = s.v[i] / bc2;
            val[i] -= lr * (mh / (std::sqrt(vh) + eps_) + wd_ * val[i]);
        }
    }
}

double cosine_lr(double base, std::size_t step, std::size_t total_steps) {
    if (total_steps <= 1) return base;
    const double t = static_cast<double>(std::min(step, total_steps - 1)) /
                     static_cast<double>(total_steps - 1);
    return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::vector<AnchorLane> to_anchor_lanes(const LanePrediction& pred) {
    const std::size_t n = pred.x.dim(0), m = pred.x.dim(1);
    const std::size_t k = pred.class_logits.dim(1);
    std::vector<AnchorLane> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> p = softmax_row(pred.class_logits.data() + i * k, k);
        AnchorLane l;
        l.score = 1.0 - p[0];
        std::size_t best = 1;
        for (std::size_t j = 2; j < k; ++j) {
            if (p[j] > p[best]) best = j;
        }
        l.category = static_cast<int>(best);
        for (std::size_t a = 0; a < m; ++a) {
            l.x.push_back(pred.x.data()[i * m + a]);
            l.z.push_back(pred.z.data()[i * m + a]);
            l.valid.push_back(pred.vis_logits.data()[i * m + a] > 0.0 ? 1 : 0);
        }
        out.push_back(std::move(l));
    }
    return out;
}

EvalReport evaluate_model(const LaneModel& model, const std::vector<TrainSample>& data,
                          double d_thre, double confidence, std::uint64_t seed) {
    EvalConfig cfg;
    cfg.y_anchors = model.head().y_anchors();
    cfg.confidence = confidence;
    std::vector<std::vector<AnchorLane>> preds, gts;
    RngState rng(seed);
    NoGradGuard ng;
    for (const auto& s : data) {
        LanePrediction p = model.forward(s.image, s.cloud, s.calib, rng, true);
        preds.push_back(to_anchor_lanes(p));
        gts.push_back(s.gts);
    }
    return evaluate(preds, gts, d_thre, cfg);
}

TrainResult train(LaneModel& model, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    RngState rng(cfg.seed ^ 0xD1CEB00Cull);
    AdamW opt(cfg.weight_decay);
    const std::size_t batches_per_epoch = (data.size() + cfg.batch - 1) / cfg.batch;
    const std::size_t total_steps = cfg.epochs * batches_per_epoch;
    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw std::runtime_error("train: cannot open log " + cfg.log_path);
    }
    std::vector<int> gt_cats;  // mask_match without the class term ignores these
    TrainResult result;
    std::size_t step = 0;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic shuffle
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.index(i)]);
        }
        std::map<std::string, double> sums;
        for (std::size_t b0 = 0; b0 < data.size(); b0 += cfg.batch) {
            const std::size_t bs = std::min(cfg.batch, data.size() - b0);
            model.params().zero_grads();
            for (std::size_t bi = 0; bi < bs; ++bi) {
                const TrainSample& s = data[order[b0 + bi]];
                CameraCalib calib = s.calib;
                if (cfg.noise_prob > 0.0 && rng.uniform() < cfg.noise_prob) {
                    calib = perturb_calib(calib, cfg.noise.rot_lo_deg, cfg.noise.rot_hi_deg,
                                          cfg.noise.trans_lo_cm, cfg.noise.trans_hi_cm, rng);
                }
                ForwardTrace tr;
                LanePrediction pred = model.forward(s.image, s.cloud, calib, rng, false, &tr);
                if (!pred.x.all_finite() || !pred.z.all_finite() ||
                    !pred.vis_logits.all_finite() || !pred.class_logits.all_finite()) {
                    throw NumericError("non-finite model output");
                }
                Assignment as_pv = mask_match(tr.pv.mask_logits, {}, s.pv_masks, gt_cats);
                Assignment as_bev = mask_match(tr.bev.mask_logits, {}, s.bev_masks, gt_cats);
                const std::size_t n = model.config().n;
                std::vector<std::int64_t> ids_pv(n, -1), ids_bev(n, -1);
                for (const auto& [i, j] : as_pv.pairs) ids_pv[i] = static_cast<std::int64_t>(j);
                for (const auto& [i, j] : as_bev.pairs) ids_bev[i] = static_cast<std::int64_t>(j);
                Tensor nce = infonce_loss(tr.pv.q, tr.bev.q, ids_pv, ids_bev,
                                          model.config().tau_nce);
                Assignment as_lane = lane_match(pred, s.gts);
                LaneLosses ll = lane_losses(pred, s.gts, as_lane);
                AuxLosses aux = aux_losses(tr.pv, tr.bev, s.pv_masks, s.bev_masks, as_pv,
                                           as_bev, tr.depth_logits, s.depth_labels);
                Tensor total = total_loss(ll, aux, nce, cfg.weights);
                sums["x"] += ll.x.item();
                sums["z"] += ll.z.item();
                sums["vis"] += ll.v.item();
                sums["cls"] += ll.c.item();
                sums["seg"] += aux.seg.item();
                sums["depth"] += aux.depth.item();
                sums["nce"] += nce.item();
                sums["total"] += total.item();
                backprop(scale(total, 1.0 / static_cast<double>(bs)));
            }
            opt.step(model.params(), cosine_lr(cfg.lr, step, total_steps));
            ++step;
        }
        EpochLog el;
        el.epoch = epoch;
        for (auto& [k, v] : sums) el.terms[k] = v / static_cast<double>(data.size());
        el.train_f1 =
            evaluate_model(model, data, cfg.eval_d_thre, cfg.confidence, cfg.seed + 1).f1;
        if (log) {
            json j{{"epoch", el.epoch}, {"train_f1", el.train_f1}};
            for (auto& [k, v] : el.terms) j["l_" + k] = v;
            log << j << "\n";
            log.flush();
        }
        result.epochs.push_back(std::move(el));
    }
    return result;
}

}  // namespace dv
