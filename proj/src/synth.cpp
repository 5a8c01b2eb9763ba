#include "dv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "dv/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dv {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMarkingHalfWidth = 0.3;  // meters from centerline

// Deterministic per-pixel hash for the ground texture.
double pixel_hash(std::uint64_t r, std::uint64_t c) {
    std::uint64_t z = (r * 0x9E3779B97F4A7C15ull) ^ (c + 0xBF58476D1CE4E5B9ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    return static_cast<double>(z >> 11) * 0x1.0p-53;
}

// Interpolated lateral position of one lane at forward distance y; NaN when y
// is outside the lane's span.
double lane_x_at(const LanePolyline& lane, double y) {
    const auto& p = lane.xyz;
    if (p.size() < 2 || y < p.front().y || y > p.back().y) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    auto it = std::lower_bound(p.begin(), p.end(), y,
                               [](const Vec3& a, double v) { return a.y < v; });
    if (it == p.begin()) return it->x;
    const Vec3& hi = *it;
    const Vec3& lo = *(it - 1);
    if (hi.y == lo.y) return lo.x;
    const double t = (y - lo.y) / (hi.y - lo.y);
    return lo.x + t * (hi.x - lo.x);
}

int draw_category(const std::vector<double>& probs, RngState& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) return static_cast<int>(k) + 1;
    }
    return static_cast<int>(probs.size());
}

// Subdivided walk along a polyline: calls fn(point) roughly every `step`
// meters of forward distance.
template <typename Fn>
void walk_lane(const LanePolyline& lane, double step, Fn&& fn) {
    for (std::size_t i = 0; i + 1 < lane.xyz.size(); ++i) {
        const Vec3& a = lane.xyz[i];
        const Vec3& b = lane.xyz[i + 1];
        const double span = std::abs(b.y - a.y);
        const std::size_t segs = std::max<std::size_t>(1, static_cast<std::size_t>(span / step));
        for (std::size_t s = 0; s < segs; ++s) {
            const double t = static_cast<double>(s) / static_cast<double>(segs);
            fn(Vec3{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z)});
        }
    }
    if (!lane.xyz.empty()) fn(lane.xyz.back());
}

}  // namespace

void LidarSpec::validate() const {
    if (beams == 0 || rays_per_beam == 0) throw std::invalid_argument("LidarSpec: no rays");
    if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw std::invalid_argument("LidarSpec: fov");
    if (!(max_range > 0.0) || !(height > 0.0)) throw std::invalid_argument("LidarSpec: geometry");
    if (dropout < 0.0 || dropout > 1.0) throw std::invalid_argument("LidarSpec: dropout");
    if (sigma < 0.0) throw std::invalid_argument("LidarSpec: sigma");
}

void SceneSpec::validate() const {
    if (lanes_lo == 0 || lanes_hi < lanes_lo) throw std::invalid_argument("SceneSpec: lane count");
    if (curvature_hi < curvature_lo) throw std::invalid_argument("SceneSpec: curvature range");
    if (max_slope < 0.0 || undulation_amp < 0.0) throw std::invalid_argument("SceneSpec: ground");
    if (!(lane_length > 3.0)) throw std::invalid_argument("SceneSpec: lane length");
    if (!(lane_spacing > 0.0)) throw std::invalid_argument("SceneSpec: lane spacing");
    if (category_probs.empty()) throw std::invalid_argument("SceneSpec: categories");
    double sum = 0.0;
    for (double p : category_probs) {
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("SceneSpec: category prob");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("SceneSpec: category probs sum");
    if (img_h == 0 || img_w == 0) throw std::invalid_argument("SceneSpec: image size");
    if (!(focal > 0.0) || !(cam_height > 0.0)) throw std::invalid_argument("SceneSpec: camera");
    lidar.validate();
}

double GroundProfile::z(double y) const {
    return slope * y + amp * std::sin(2.0 * kPi * y / period + phase);
}

void LabelSpec::validate() const {
    if (stride == 0) throw std::invalid_argument("LabelSpec: stride");
    bev_grid.validate();
    if (depth_bins == 0) throw std::invalid_argument("LabelSpec: depth bins");
    if (!(depth_max > depth_min)) throw std::invalid_argument("LabelSpec: depth range");
    if (y_anchors.size() < 2) throw std::invalid_argument("LabelSpec: y anchors");
    if (!std::is_sorted(y_anchors.begin(), y_anchors.end())) {
        throw std::invalid_argument("LabelSpec: y anchors unsorted");
    }
    if (!(stroke_pv_px > 0.0) || !(stroke_bev_cells > 0.0)) {
        throw std::invalid_argument("LabelSpec: stroke widths");
    }
}

double nearest_lane_offset(const std::vector<LanePolyline>& lanes, double x, double y) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& lane : lanes) {
        const double lx = lane_x_at(lane, y);
        if (std::isnan(lx)) continue;
        best = std::min(best, std::abs(x - lx));
    }
    return best;
}

PointCloud render_lidar(const std::vector<LanePolyline>& lanes, const GroundProfile& ground,
                        const LidarSpec& spec, RngState& rng) {
    spec.validate();
    PointCloud pc;
    const Vec3 origin{0.0, 0.0, ground.z(0.0) + spec.height};
    const double el_lo = -60.0 * kPi / 180.0;
    const double el_hi = -std::atan2(spec.height, spec.max_range);
    const double az_half = 0.5 * spec.fov_deg * kPi / 180.0;
    for (std::size_t b = 0; b < spec.beams; ++b) {
        const double eb = spec.beams == 1 ? el_lo
                                          : el_lo + (el_hi - el_lo) * static_cast<double>(b) /
                                                        static_cast<double>(spec.beams - 1);
        for (std::size_t a = 0; a < spec.rays_per_beam; ++a) {
            const double az = spec.rays_per_beam == 1
                                  ? 0.0
                                  : -az_half + 2.0 * az_half * static_cast<double>(a) /
                                                   static_cast<double>(spec.rays_per_beam - 1);
            const bool dropped = rng.uniform() < spec.dropout;
            const double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
            if (dropped) continue;
            const Vec3 d{std::sin(az) * std::cos(eb), std::cos(az) * std::cos(eb), std::sin(eb)};
            if (d.z > -1e-9) continue;
            // Fixed-point iteration for the ray/ground intersection, then one
            // closing step so the pre-noise hit sits exactly on the surface.
            double t = -spec.height / d.z;
            for (int it = 0; it < 16; ++it) {
                t = (ground.z(origin.y + t * d.y) - origin.z) / d.z;
            }
            if (!(t > 0.0) || t > spec.max_range) continue;
            t += noise;
            if (!(t > 0.0)) continue;
            Vec3 p{origin.x + t * d.x, origin.y + t * d.y, origin.z + t * d.z};
            // Noise-free returns lie exactly on the surface (kills the last
            // ulp of fixed-point residual).
            if (noise == 0.0) p.z = ground.z(p.y);
            pc.xyz.push_back(p);
            pc.intensity.push_back(nearest_lane_offset(lanes, p.x, p.y) < kMarkingHalfWidth ? 0.9
                                                                                            : 0.2);
        }
    }
    return pc;
}

Tensor render_image(const std::vector<LanePolyline>& lanes, const CameraCalib& calib) {
    calib.validate();
    const std::size_t h = calib.img_h, w = calib.img_w;
    Tensor img = Tensor::zeros({3, h, w});
    // Horizon row: where a distant ground-level point projects.
    const auto horizon = project_to_pv({Vec3{0.0, 1e9, 0.0}}, calib);
    const double vh = horizon.valid[0] ? horizon.v[0] : 0.0;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double base;
            if (static_cast<double>(r) < vh) {
                base = 0.03;  // sky
            } else {
                // Ground texture, brighter close to the camera.
                const double depth_cue = (static_cast<double>(r) - vh) /
                                         std::max(1.0, static_cast<double>(h) - vh);
                base = 0.08 + 0.1 * depth_cue + 0.05 * pixel_hash(r, c);
            }
            for (std::size_t ch = 0; ch < 3; ++ch) {
                img.data()[ch * h * w + r * w + c] = base;
            }
        }
    }
    for (const auto& lane : lanes) {
        walk_lane(lane, 0.1, [&](const Vec3& p) {
            const auto pr = project_to_pv({p}, calib);
            if (!pr.valid[0]) return;
            const double shade = std::clamp(1.5 / (1.0 + 0.03 * pr.depth[0]), 0.25, 1.0);
            const int rad = std::max(1, static_cast<int>(std::lround(3.0 / (1.0 + 0.05 * pr.depth[0]))));
            const int cu = static_cast<int>(pr.u[0]);
            const int cv = static_cast<int>(pr.v[0]);
            for (int dv_ = -rad; dv_ <= rad; ++dv_) {
                for (int du = -rad; du <= rad; ++du) {
                    const int u = cu + du, v = cv + dv_;
                    if (u < 0 || v < 0 || u >= static_cast<int>(w) || v >= static_cast<int>(h)) {
                        continue;
                    }
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        double& px = img.data()[ch * h * w + static_cast<std::size_t>(v) * w +
                                                static_cast<std::size_t>(u)];
                        px = std::max(px, shade);
                    }
                }
            }
        });
    }
    return img;
}

SceneLabels make_labels(const std::vector<LanePolyline>& lanes, const PointCloud& cloud,
                        const CameraCalib& calib, const LabelSpec& spec) {
    calib.validate();
    spec.validate();
    SceneLabels out;
    const std::size_t g = lanes.size();
    const std::size_t hf = calib.img_h / spec.stride, wf = calib.img_w / spec.stride;
    const std::size_t rows = spec.bev_grid.rows, cols = spec.bev_grid.cols;
    out.pv_masks = Tensor::zeros({g, hf, wf});
    out.bev_masks = Tensor::zeros({g, rows, cols});
    const double stride = static_cast<double>(spec.stride);
    const double half_pv = 0.5 * spec.stroke_pv_px;
    const double half_bev = 0.5 * spec.stroke_bev_cells;
    for (std::size_t li = 0; li < g; ++li) {
        walk_lane(lanes[li], 0.25, [&](const Vec3& p) {
            const auto pr = project_to_pv({p}, calib);
            if (pr.valid[0]) {
                // Mark feature cells whose center falls within the stroke.
                const long fc0 = static_cast<long>(std::floor(pr.u[0] / stride)) - 1;
                const long fr0 = static_cast<long>(std::floor(pr.v[0] / stride)) - 1;
                for (long fr = fr0; fr <= fr0 + 2; ++fr) {
                    for (long fc = fc0; fc <= fc0 + 2; ++fc) {
                        if (fr < 0 || fc < 0 || fr >= static_cast<long>(hf) ||
                            fc >= static_cast<long>(wf)) {
                            continue;
                        }
                        const double cu = (static_cast<double>(fc) + 0.5) * stride;
                        const double cv = (static_cast<double>(fr) + 0.5) * stride;
                        if (std::abs(cu - pr.u[0]) <= half_pv && std::abs(cv - pr.v[0]) <= half_pv) {
                            out.pv_masks.data()[li * hf * wf + static_cast<std::size_t>(fr) * wf +
                                                static_cast<std::size_t>(fc)] = 1.0;
                        }
                    }
                }
            }
            const auto bp = project_to_bev({p}, spec.bev_grid);
            if (bp.valid[0]) {
                const double pc = (p.x - spec.bev_grid.origin_x) / spec.bev_grid.cell_x;
                const double prr = (p.y - spec.bev_grid.origin_y) / spec.bev_grid.cell_y;
                const long r0 = static_cast<long>(bp.row[0]) - 1;
                const long c0 = static_cast<long>(bp.col[0]) - 1;
                for (long r = r0; r <= r0 + 2; ++r) {
                    for (long c = c0; c <= c0 + 2; ++c) {
                        if (r < 0 || c < 0 || r >= static_cast<long>(rows) ||
                            c >= static_cast<long>(cols)) {
                            continue;
                        }
                        if (std::abs(static_cast<double>(c) + 0.5 - pc) <= half_bev &&
                            std::abs(static_cast<double>(r) + 0.5 - prr) <= half_bev) {
                            out.bev_masks.data()[li * rows * cols + static_cast<std::size_t>(r) * cols +
                                                 static_cast<std::size_t>(c)] = 1.0;
                        }
                    }
                }
            }
        });
    }
    // Depth bins from the nearest LiDAR return per feature cell.
    out.depth.assign(hf * wf, -1);
    std::vector<double> best(hf * wf, std::numeric_limits<double>::infinity());
    const auto proj = project_to_pv(cloud.xyz, calib);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (!proj.valid[i]) continue;
        const std::size_t fr = static_cast<std::size_t>(proj.v[i]) / spec.stride;
        const std::size_t fc = static_cast<std::size_t>(proj.u[i]) / spec.stride;
        if (fr >= hf || fc >= wf) continue;
        const std::size_t idx = fr * wf + fc;
        if (proj.depth[i] >= best[idx]) continue;
        best[idx] = proj.depth[i];
        const double frac = (proj.depth[i] - spec.depth_min) / (spec.depth_max - spec.depth_min) *
                            static_cast<double>(spec.depth_bins);
        out.depth[idx] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(frac)), 0,
                                                  static_cast<std::int64_t>(spec.depth_bins) - 1);
    }
    for (const auto& lane : lanes) {
        out.gts.push_back(resample_lane(lane, spec.y_anchors));
    }
    return out;
}

Scene gen_scene(const SceneSpec& spec, const LabelSpec& labels, RngState& rng) {
    spec.validate();
    labels.validate();
    Scene sc;
    sc.ground.slope = rng.uniform(-spec.max_slope, spec.max_slope);
    sc.ground.amp = rng.uniform(0.0, spec.undulation_amp);
    sc.ground.period = rng.uniform(60.0, 140.0);
    sc.ground.phase = rng.uniform(0.0, 2.0 * kPi);
    const std::size_t count =
        spec.lanes_lo + static_cast<std::size_t>(rng.index(spec.lanes_hi - spec.lanes_lo + 1));
    // Roughly parallel lanes: shared heading and curvature, small per-lane jitter.
    const double heading = rng.uniform(-0.02, 0.02);
    const double k_base = rng.uniform(spec.curvature_lo, spec.curvature_hi);
    const double center = rng.uniform(-0.5, 0.5) * spec.lane_spacing;
    for (std::size_t li = 0; li < count; ++li) {
        const double x0 = center + (static_cast<double>(li) -
                                    0.5 * static_cast<double>(count - 1)) *
                                       spec.lane_spacing;
        const double k = k_base + 0.1 * rng.uniform(spec.curvature_lo, spec.curvature_hi);
        const double k3 = 0.1 * rng.uniform(spec.curvature_lo, spec.curvature_hi);
        LanePolyline lane;
        lane.category = draw_category(spec.category_probs, rng);
        for (double y = 3.0; y <= spec.lane_length + 1e-9; y += 0.5) {
            const double x = x0 + heading * y + 0.5 * k * y * y + k3 * y * y * y / 6.0;
            lane.xyz.push_back({x, y, sc.ground.z(y)});
            lane.visibility.push_back(1.0);
        }
        sc.lanes.push_back(std::move(lane));
    }
    sc.calib.fx = sc.calib.fy = spec.focal;
    sc.calib.cx = static_cast<double>(spec.img_w) / 2.0;
    sc.calib.cy = static_cast<double>(spec.img_h) / 2.0;
    sc.calib.img_h = spec.img_h;
    sc.calib.img_w = spec.img_w;
    sc.calib.extrinsic = {1, 0, 0, 0, 0, 0, -1, spec.cam_height, 0, 1, 0, 0, 0, 0, 0, 1};
    sc.cloud = render_lidar(sc.lanes, sc.ground, spec.lidar, rng);
    sc.image = render_image(sc.lanes, sc.calib);
    sc.labels = make_labels(sc.lanes, sc.cloud, sc.calib, labels);
    return sc;
}

void save_scene_bundle(const std::string& dir, const Scene& scene) {
    fs::create_directories(dir);
    const fs::path root(dir);
    save_calib((root / "calib.json").string(), scene.calib);
    save_cloud((root / "cloud.bin").string(), scene.cloud);
    io::save_tensor((root / "image.bin").string(), scene.image);
    io::save_tensor((root / "pv_masks.bin").string(), scene.labels.pv_masks);
    io::save_tensor((root / "bev_masks.bin").string(), scene.labels.bev_masks);
    save_lanes_jsonl((root / "lanes.jsonl").string(), {{fs::path(dir).filename().string(),
                                                       scene.lanes}});
    json j;
    j["format"] = "DVS1";
    j["ground"] = {{"slope", scene.ground.slope},
                   {"amp", scene.ground.amp},
                   {"period", scene.ground.period},
                   {"phase", scene.ground.phase}};
    j["depth"] = scene.labels.depth;
    json gts = json::array();
    for (const auto& gl : scene.labels.gts) {
        gts.push_back({{"category", gl.category},
                       {"x", gl.x},
                       {"z", gl.z},
                       {"valid", std::vector<int>(gl.valid.begin(), gl.valid.end())}});
    }
    j["gts"] = gts;
    std::ofstream os(root / "labels.json");
    if (!os) throw std::runtime_error("save_scene_bundle: cannot write " + dir);
    os << j.dump(2) << "\n";
}

Scene load_scene_bundle(const std::string& dir) {
    const fs::path root(dir);
    Scene sc;
    sc.calib = load_calib((root / "calib.json").string());
    sc.cloud = load_cloud((root / "cloud.bin").string());
    sc.image = io::load_tensor((root / "image.bin").string());
    sc.labels.pv_masks = io::load_tensor((root / "pv_masks.bin").string());
    sc.labels.bev_masks = io::load_tensor((root / "bev_masks.bin").string());
    auto scenes = load_lanes_jsonl((root / "lanes.jsonl").string());
    if (scenes.size() != 1) throw std::runtime_error("load_scene_bundle: expected one scene");
    sc.lanes = std::move(scenes[0].lanes);
    std::ifstream is(root / "labels.json");
    if (!is) throw std::runtime_error("load_scene_bundle: missing labels.json in " + dir);
    json j = json::parse(is);
    if (j.value("format", "") != std::string("DVS1")) {
        throw std::runtime_error("load_scene_bundle: unsupported label format");
    }
    sc.ground.slope = j["ground"]["slope"].get<double>();
    sc.ground.amp = j["ground"]["amp"].get<double>();
    sc.ground.period = j["ground"]["period"].get<double>();
    sc.ground.phase = j["ground"]["phase"].get<double>();
    sc.labels.depth = j["depth"].get<std::vector<std::int64_t>>();
    for (const auto& gl : j["gts"]) {
        AnchorLane a;
        a.category = gl["category"].get<int>();
        a.x = gl["x"].get<std::vector<double>>();
        a.z = gl["z"].get<std::vector<double>>();
        for (int v : gl["valid"].get<std::vector<int>>()) {
            a.valid.push_back(static_cast<std::uint8_t>(v));
        }
        sc.labels.gts.push_back(std::move(a));
    }
    return sc;
}

}  // namespace dv
