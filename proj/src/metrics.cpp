#include "dv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace dv {

namespace {

constexpr double kBig = 1e9;  // cost of an ineligible pair

// Square-matrix Hungarian with potentials, O(k^3). Column 0 is a virtual
// root; indices are 1-based internally.
std::vector<std::size_t> solve_square(const std::vector<double>& a, std::size_t k) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(k + 1, 0.0), v(k + 1, 0.0);
    std::vector<std::size_t> p(k + 1, 0), way(k + 1, 0);
    for (std::size_t i = 1; i <= k; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(k + 1, inf);
        std::vector<char> used(k + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= k; ++j) {
                if (used[j]) continue;
                double cur = a[(i0 - 1) * k + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= k; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(k);
    for (std::size_t j = 1; j <= k; ++j) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

}  // namespace

Assignment hungarian(const std::vector<double>& cost, std::size_t n, std::size_t m) {
    if (cost.size() != n * m) throw std::invalid_argument("hungarian: bad matrix size");
    for (double c : cost) {
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
    }
    Assignment out;
    if (n == 0 || m == 0) {
        for (std::size_t i = 0; i < n; ++i) out.unmatched_rows.push_back(i);
        for (std::size_t j = 0; j < m; ++j) out.unmatched_cols.push_back(j);
        return out;
    }
    // pad to square; dummy entries cost 0, a constant offset for any matching
    const std::size_t k = std::max(n, m);
    std::vector<double> a(k * k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) a[i * k + j] = cost[i * m + j];
    }
    std::vector<std::size_t> row_to_col = solve_square(a, k);

    // canonicalize equal-cost solutions: lexicographically smallest pair list
    std::vector<std::int64_t> match(n);
    for (std::size_t i = 0; i < n; ++i) {
        match[i] = row_to_col[i] < m ? static_cast<std::int64_t>(row_to_col[i]) : -1;
    }
    std::vector<char> col_used(m, 0);
    for (auto j : match) {
        if (j >= 0) col_used[static_cast<std::size_t>(j)] = 1;
    }
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (match[i] < 0) {
                // steal an equal-cost match from a later row, leaving it unmatched
                for (std::size_t i2 = i + 1; i2 < n; ++i2) {
                    if (match[i2] < 0) continue;
                    const std::size_t j2 = static_cast<std::size_t>(match[i2]);
                    if (cost[i * m + j2] == cost[i2 * m + j2]) {
                        match[i] = static_cast<std::int64_t>(j2);
                        match[i2] = -1;
                        changed = true;
                        break;
                    }
                }
                if (match[i] < 0) continue;
            }
            const std::size_t ji = static_cast<std::size_t>(match[i]);
            // slide to an equal-cost lower column that is free
            for (std::size_t j = 0; j < ji; ++j) {
                if (!col_used[j] && cost[i * m + j] == cost[i * m + ji]) {
                    col_used[ji] = 0;
                    col_used[j] = 1;
                    match[i] = static_cast<std::int64_t>(j);
                    changed = true;
                    break;
                }
            }
            // swap with a later row when it lowers this row's column at equal cost
            const std::size_t jc = static_cast<std::size_t>(match[i]);
            for (std::size_t i2 = i + 1; i2 < n; ++i2) {
                if (match[i2] < 0) continue;
                const std::size_t j2 = static_cast<std::size_t>(match[i2]);
                if (j2 < jc && cost[i * m + j2] + cost[i2 * m + jc] ==
                                   cost[i * m + jc] + cost[i2 * m + j2]) {
                    match[i] = static_cast<std::int64_t>(j2);
                    match[i2] = static_cast<std::int64_t>(jc);
                    changed = true;
                    break;
                }
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (match[i] >= 0) {
            out.pairs.emplace_back(i, static_cast<std::size_t>(match[i]));
            out.total_cost += cost[i * m + static_cast<std::size_t>(match[i])];
        } else {
            out.unmatched_rows.push_back(i);
        }
    }
    for (std::size_t j = 0; j < m; ++j) {
        if (!col_used[j]) out.unmatched_cols.push_back(j);
    }
    return out;
}

void save_lanes_jsonl(const std::string& path, const std::vector<SceneLanes>& scenes) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_lanes_jsonl: cannot open " + path);
    for (const auto& sc : scenes) {
        json lanes = json::array();
        for (const auto& ln : sc.lanes) {
            json xyz = json::array();
            for (const auto& p : ln.xyz) xyz.push_back({p.x, p.y, p.z});
            lanes.push_back(
                {{"category", ln.category}, {"xyz", xyz}, {"visibility", ln.visibility}});
        }
        os << json{{"scene_id", sc.scene_id}, {"lanes", lanes}} << "\n";
    }
}

std::vector<SceneLanes> load_lanes_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_lanes_jsonl: cannot open " + path);
    std::vector<SceneLanes> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SceneLanes sc;
        sc.scene_id = j.at("scene_id").get<std::string>();
        for (const auto& jl : j.at("lanes")) {
            LanePolyline ln;
            ln.category = jl.at("category").get<int>();
            for (const auto& jp : jl.at("xyz")) {
                ln.xyz.push_back({jp.at(0).get<double>(), jp.at(1).get<double>(),
                                  jp.at(2).get<double>()});
            }
            ln.visibility = jl.at("visibility").get<std::vector<double>>();
            sc.lanes.push_back(std::move(ln));
        }
        out.push_back(std::move(sc));
    }
    return out;
}

AnchorLane resample_lane(const LanePolyline& lane, const std::vector<double>& y_anchors) {
    if (lane.xyz.size() < 2) throw std::invalid_argument("resample_lane: need >= 2 points");
    std::vector<Vec3> pts = lane.xyz;
    std::sort(pts.begin(), pts.end(), [](const Vec3& a, const Vec3& b) { return a.y < b.y; });
    AnchorLane out;
    out.category = lane.category;
    const double y_lo = pts.front().y, y_hi = pts.back().y;
    for (double ya : y_anchors) {
        if (ya < y_lo || ya > y_hi) {
            out.x.push_back(0.0);
            out.z.push_back(0.0);
            out.valid.push_back(0);
            continue;
        }
        auto it = std::lower_bound(pts.begin(), pts.end(), ya,
                                   [](const Vec3& p, double y) { return p.y < y; });
        if (it == pts.begin()) ++it;
        const Vec3& b = *it;
        const Vec3& a = *(it - 1);
        const double span = b.y - a.y;
        const double t = span > 0.0 ? (ya - a.y) / span : 0.0;
        out.x.push_back(a.x + t * (b.x - a.x));
        out.z.push_back(a.z + t * (b.z - a.z));
        out.valid.push_back(1);
    }
    return out;
}

void EvalConfig::validate() const {
    for (double d : d_thre) {
        if (!(d > 0.0)) throw std::invalid_argument("EvalConfig: d_thre must be positive");
    }
    if (!(min_match_fraction > 0.0 && min_match_fraction <= 1.0)) {
        throw std::invalid_argument("EvalConfig: match fraction outside (0,1]");
    }
}

LaneMatch match_lanes(const std::vector<AnchorLane>& preds,
                      const std::vector<AnchorLane>& gts, double d_thre,
                      const EvalConfig& cfg) {
    cfg.validate();
    LaneMatch out;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].score >= cfg.confidence) out.kept.push_back(i);
    }
    const std::size_t n = out.kept.size(), g = gts.size();
    std::vector<double> cost(n * g, kBig);
    std::vector<double> frac(n * g, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const AnchorLane& p = preds[out.kept[i]];
        for (std::size_t j = 0; j < g; ++j) {
            const AnchorLane& q = gts[j];
            double acc = 0.0;
            std::size_t mutual = 0, under = 0;
            for (std::size_t a = 0; a < p.valid.size() && a < q.valid.size(); ++a) {
                if (!p.valid[a] || !q.valid[a]) continue;
                ++mutual;
                const double dx = p.x[a] - q.x[a], dz = p.z[a] - q.z[a];
                const double d = std::sqrt(dx * dx + dz * dz);
                if (d <= d_thre) {
                    ++under;
                    acc += d;
                } else {
                    acc += kBig / 1e3;  // clamp: over-threshold anchors dominate
                }
            }
            if (mutual == 0) continue;  // ineligible, keep kBig
            cost[i * g + j] = acc / static_cast<double>(mutual);
            frac[i * g + j] =
                static_cast<double>(under) / static_cast<double>(mutual);
        }
    }
    out.assign = hungarian(cost, n, g);
    // drop pairs that were only matched through the ineligible sentinel
    std::vector<std::pair<std::size_t, std::size_t>> kept_pairs;
    for (const auto& [i, j] : out.assign.pairs) {
        if (cost[i * g + j] >= kBig) {
            out.assign.unmatched_rows.push_back(i);
            out.assign.unmatched_cols.push_back(j);
        } else {
            kept_pairs.push_back({i, j});
        }
    }
    std::sort(out.assign.unmatched_rows.begin(), out.assign.unmatched_rows.end());
    std::sort(out.assign.unmatched_cols.begin(), out.assign.unmatched_cols.end());
    out.assign.pairs = kept_pairs;
    for (const auto& [i, j] : out.assign.pairs) {
        out.is_tp.push_back(frac[i * g + j] >= cfg.min_match_fraction ? 1 : 0);
    }
    return out;
}

EvalReport evaluate(const std::vector<std::vector<AnchorLane>>& preds,
                    const std::vector<std::vector<AnchorLane>>& gts, double d_thre,
                    const EvalConfig& cfg) {
    if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: scene count");
    EvalReport r;
    std::size_t cat_hits = 0;
    double xn = 0, xf = 0, zn = 0, zf = 0;
    std::size_t cn = 0, cf = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        LaneMatch m = match_lanes(preds[s], gts[s], d_thre, cfg);
        std::size_t scene_tp = 0;
        for (std::size_t k = 0; k < m.assign.pairs.size(); ++k) {
            if (!m.is_tp[k]) continue;
            ++scene_tp;
            const AnchorLane& p = preds[s][m.kept[m.assign.pairs[k].first]];
            const AnchorLane& q = gts[s][m.assign.pairs[k].second];
            if (p.category == q.category) ++cat_hits;
            for (std::size_t a = 0; a < p.valid.size() && a < q.valid.size(); ++a) {
                if (!p.valid[a] || !q.valid[a]) continue;
                const bool near = cfg.y_anchors.empty()
                                      ? true
                                      : cfg.y_anchors[a] <= cfg.near_far_split;
                const double ex = std::fabs(p.x[a] - q.x[a]);
                const double ez = std::fabs(p.z[a] - q.z[a]);
                if (near) {
                    xn += ex;
                    zn += ez;
                    ++cn;
                } else {
                    xf += ex;
                    zf += ez;
                    ++cf;
                }
            }
        }
        r.tp += scene_tp;
        r.fp += m.kept.size() - scene_tp;
        r.fn += gts[s].size() - scene_tp;
    }
    if (r.tp + r.fp > 0) r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
    if (r.tp + r.fn > 0) r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
    if (r.precision + r.recall > 0.0) {
        r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    }
    if (r.tp > 0) r.category_accuracy = static_cast<double>(cat_hits) / static_cast<double>(r.tp);
    if (cn > 0) {
        r.x_err_near = xn / static_cast<double>(cn);
        r.z_err_near = zn / static_cast<double>(cn);
    }
    if (cf > 0) {
        r.x_err_far = xf / static_cast<double>(cf);
        r.z_err_far = zf / static_cast<double>(cf);
    }
    return r;
}

std::string report_json(const EvalReport& r) {
    json j{{"f1", r.f1},
           {"precision", r.precision},
           {"recall", r.recall},
           {"category_accuracy", r.category_accuracy},
           {"x_err_near", r.x_err_near},
           {"x_err_far", r.x_err_far},
           {"z_err_near", r.z_err_near},
           {"z_err_far", r.z_err_far},
           {"tp", r.tp},
           {"fp", r.fp},
           {"fn", r.fn}};
    return j.dump();
}

std::vector<std::pair<double, double>> threshold_sweep(
    const std::vector<std::vector<AnchorLane>>& preds,
    const std::vector<std::vector<AnchorLane>>& gts, const std::vector<double>& thresholds,
    const EvalConfig& cfg) {
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
        throw std::invalid_argument("threshold_sweep: thresholds must be ascending");
    }
    std::vector<std::pair<double, double>> curve;
    for (double t : thresholds) curve.emplace_back(t, evaluate(preds, gts, t, cfg).f1);
    return curve;
}

NoiseSetting NoiseSetting::doubled() const {
    NoiseSetting s = *this;
    s.name = "S" + name;
    s.rot_lo_deg *= 2;
    s.rot_hi_deg *= 2;
    s.trans_lo_cm *= 2;
    s.trans_hi_cm *= 2;
    return s;
}

std::vector<RobustnessRow> robustness_run(
    const std::function<std::vector<AnchorLane>(std::size_t, const CameraCalib&)>& predict,
    const std::vector<CameraCalib>& calibs,
    const std::vector<std::vector<AnchorLane>>& gts, double d_thre, const EvalConfig& cfg,
    const NoiseSetting& noise, const std::vector<double>& probs, std::uint64_t seed) {
    if (calibs.size() != gts.size()) throw std::invalid_argument("robustness_run: sizes");
    std::vector<RobustnessRow> rows;
    for (double p : probs) {
        std::vector<std::vector<AnchorLane>> preds;
        for (std::size_t s = 0; s < calibs.size(); ++s) {
            // common random numbers across probability levels: the gate draw
            // and the disturbance depend only on (seed, scene)
            RngState gate = RngState(seed).fork(s * 2 + 1);
            RngState noise_rng = RngState(seed).fork(s * 2 + 2);
            CameraCalib c = calibs[s];
            if (gate.uniform() < p) {
                c = perturb_calib(c, noise.rot_lo_deg, noise.rot_hi_deg, noise.trans_lo_cm,
                                  noise.trans_hi_cm, noise_rng);
            }
            preds.push_back(predict(s, c));
        }
        rows.push_back({p, evaluate(preds, gts, d_thre, cfg)});
    }
    return rows;
}

}  // namespace dv
