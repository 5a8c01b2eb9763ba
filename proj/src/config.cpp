#include "dv/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dv {

namespace {

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
    }
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    const double d = parse_double(key, v);
    if (d < 0.0 || d != std::floor(d)) {
        throw ConfigError("config: " + key + " must be a non-negative integer");
    }
    return static_cast<std::size_t>(d);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: " + key + " must be true or false");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
    if (out.empty()) throw ConfigError("config: " + key + " must be a comma list");
    return out;
}

std::string fmt(double d) {
    std::ostringstream os;
    os << d;
    return os.str();
}
std::string fmt(std::size_t s) { return std::to_string(s); }
std::string fmt(bool b) { return b ? "true" : "false"; }
std::string fmt(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
    return s;
}

struct Entry {
    std::function<void(Config&, const std::string&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

using Registry = std::map<std::string, Entry>;

Registry build_registry() {
    Registry r;
    auto num = [&r](const std::string& key, auto accessor) {
        r[key] = {[accessor](Config& c, const std::string& k, const std::string& v) {
                      accessor(c) = parse_double(k, v);
                  },
                  [accessor](const Config& c) { return fmt(accessor(const_cast<Config&>(c))); }};
    };
    auto size = [&r](const std::string& key, auto accessor) {
        r[key] = {[accessor](Config& c, const std::string& k, const std::string& v) {
                      accessor(c) = parse_size(k, v);
                  },
                  [accessor](const Config& c) { return fmt(accessor(const_cast<Config&>(c))); }};
    };
    auto flag = [&r](const std::string& key, auto accessor) {
        r[key] = {[accessor](Config& c, const std::string& k, const std::string& v) {
                      accessor(c) = parse_bool(k, v);
                  },
                  [accessor](const Config& c) { return fmt(accessor(const_cast<Config&>(c))); }};
    };
    auto list = [&r](const std::string& key, auto accessor) {
        r[key] = {[accessor](Config& c, const std::string& k, const std::string& v) {
                      accessor(c) = parse_list(k, v);
                  },
                  [accessor](const Config& c) { return fmt(accessor(const_cast<Config&>(c))); }};
    };

    // model
    size("model.n", [](Config& c) -> std::size_t& { return c.model.n; });
    size("model.m", [](Config& c) -> std::size_t& { return c.model.m; });
    size("model.num_classes", [](Config& c) -> std::size_t& { return c.model.num_classes; });
    num("model.anchor_y_lo", [](Config& c) -> double& { return c.model.anchor_y_lo; });
    num("model.anchor_y_hi", [](Config& c) -> double& { return c.model.anchor_y_hi; });
    num("model.tau_nce", [](Config& c) -> double& { return c.model.tau_nce; });
    num("model.tau_gumbel", [](Config& c) -> double& { return c.model.tau_gumbel; });
    // backbone
    size("backbone.img_h", [](Config& c) -> std::size_t& { return c.model.backbone.img_h; });
    size("backbone.img_w", [](Config& c) -> std::size_t& { return c.model.backbone.img_w; });
    size("backbone.c1", [](Config& c) -> std::size_t& { return c.model.backbone.c1; });
    size("backbone.c", [](Config& c) -> std::size_t& { return c.model.backbone.c; });
    size("backbone.max_points_per_pillar",
         [](Config& c) -> std::size_t& { return c.model.backbone.max_points_per_pillar; });
    size("backbone.depth_bins",
         [](Config& c) -> std::size_t& { return c.model.backbone.depth_bins; });
    num("backbone.depth_min", [](Config& c) -> double& { return c.model.backbone.depth_min; });
    num("backbone.depth_max", [](Config& c) -> double& { return c.model.backbone.depth_max; });
    flag("backbone.fuse_lidar_to_cam",
         [](Config& c) -> bool& { return c.model.backbone.fuse_lidar_to_cam; });
    flag("backbone.fuse_cam_to_lidar",
         [](Config& c) -> bool& { return c.model.backbone.fuse_cam_to_lidar; });
    // decoder
    size("decoder.heads", [](Config& c) -> std::size_t& { return c.model.decoder.heads; });
    size("decoder.samples", [](Config& c) -> std::size_t& { return c.model.decoder.samples; });
    size("decoder.layers", [](Config& c) -> std::size_t& { return c.model.decoder.layers; });
    num("decoder.roi_x_lo", [](Config& c) -> double& { return c.model.decoder.roi_x_lo; });
    num("decoder.roi_x_hi", [](Config& c) -> double& { return c.model.decoder.roi_x_hi; });
    num("decoder.roi_y_lo", [](Config& c) -> double& { return c.model.decoder.roi_y_lo; });
    num("decoder.roi_y_hi", [](Config& c) -> double& { return c.model.decoder.roi_y_hi; });
    num("decoder.roi_z_lo", [](Config& c) -> double& { return c.model.decoder.roi_z_lo; });
    num("decoder.roi_z_hi", [](Config& c) -> double& { return c.model.decoder.roi_z_hi; });
    flag("decoder.use_bev", [](Config& c) -> bool& { return c.model.decoder.use_bev; });
    // bev grid
    num("grid.origin_x", [](Config& c) -> double& { return c.model.bev_grid.origin_x; });
    num("grid.origin_y", [](Config& c) -> double& { return c.model.bev_grid.origin_y; });
    num("grid.cell_x", [](Config& c) -> double& { return c.model.bev_grid.cell_x; });
    num("grid.cell_y", [](Config& c) -> double& { return c.model.bev_grid.cell_y; });
    size("grid.cols", [](Config& c) -> std::size_t& { return c.model.bev_grid.cols; });
    size("grid.rows", [](Config& c) -> std::size_t& { return c.model.bev_grid.rows; });
    // loss weights
    num("loss.w_x", [](Config& c) -> double& { return c.loss.w_x; });
    num("loss.w_z", [](Config& c) -> double& { return c.loss.w_z; });
    num("loss.w_v", [](Config& c) -> double& { return c.loss.w_v; });
    num("loss.w_c", [](Config& c) -> double& { return c.loss.w_c; });
    num("loss.w_seg", [](Config& c) -> double& { return c.loss.w_seg; });
    num("loss.w_depth", [](Config& c) -> double& { return c.loss.w_depth; });
    num("loss.w_nce", [](Config& c) -> double& { return c.loss.w_nce; });
    // optimizer / training
    size("train.epochs", [](Config& c) -> std::size_t& { return c.train.epochs; });
    size("train.batch", [](Config& c) -> std::size_t& { return c.train.batch; });
    num("train.lr", [](Config& c) -> double& { return c.train.lr; });
    num("train.weight_decay", [](Config& c) -> double& { return c.train.weight_decay; });
    r["train.seed"] = {[](Config& c, const std::string& k, const std::string& v) {
                           c.train.seed = static_cast<std::uint64_t>(parse_size(k, v));
                       },
                       [](const Config& c) { return std::to_string(c.train.seed); }};
    num("train.noise_prob", [](Config& c) -> double& { return c.train.noise_prob; });
    num("train.eval_d_thre", [](Config& c) -> double& { return c.train.eval_d_thre; });
    num("train.confidence", [](Config& c) -> double& { return c.train.confidence; });
    r["train.noise"] = {[](Config& c, const std::string& k, const std::string& v) {
                            if (v == "N") {
                                c.train.noise = NoiseSetting{};
                            } else if (v == "SN") {
                                c.train.noise = NoiseSetting{}.doubled();
                            } else {
                                throw ConfigError("config: " + k + " must be N or SN");
                            }
                        },
                        [](const Config& c) { return c.train.noise.name; }};
    r["train.log"] = {[](Config& c, const std::string&, const std::string& v) {
                          c.train.log_path = v;
                      },
                      [](const Config& c) { return c.train.log_path; }};
    // evaluation
    list("eval.d_thre", [](Config& c) -> std::vector<double>& { return c.eval.d_thre; });
    num("eval.near_far_split", [](Config& c) -> double& { return c.eval.near_far_split; });
    num("eval.min_match_fraction",
        [](Config& c) -> double& { return c.eval.min_match_fraction; });
    num("eval.confidence", [](Config& c) -> double& { return c.eval.confidence; });
    // scene generation
    size("synth.lanes_lo", [](Config& c) -> std::size_t& { return c.synth.lanes_lo; });
    size("synth.lanes_hi", [](Config& c) -> std::size_t& { return c.synth.lanes_hi; });
    num("synth.curvature_lo", [](Config& c) -> double& { return c.synth.curvature_lo; });
    num("synth.curvature_hi", [](Config& c) -> double& { return c.synth.curvature_hi; });
    num("synth.max_slope", [](Config& c) -> double& { return c.synth.max_slope; });
    num("synth.undulation_amp", [](Config& c) -> double& { return c.synth.undulation_amp; });
    num("synth.lane_length", [](Config& c) -> double& { return c.synth.lane_length; });
    num("synth.lane_spacing", [](Config& c) -> double& { return c.synth.lane_spacing; });
    list("synth.category_probs",
         [](Config& c) -> std::vector<double>& { return c.synth.category_probs; });
    num("synth.focal", [](Config& c) -> double& { return c.synth.focal; });
    num("synth.cam_height", [](Config& c) -> double& { return c.synth.cam_height; });
    // lidar
    size("lidar.beams", [](Config& c) -> std::size_t& { return c.synth.lidar.beams; });
    size("lidar.rays_per_beam",
         [](Config& c) -> std::size_t& { return c.synth.lidar.rays_per_beam; });
    num("lidar.fov_deg", [](Config& c) -> double& { return c.synth.lidar.fov_deg; });
    num("lidar.max_range", [](Config& c) -> double& { return c.synth.lidar.max_range; });
    num("lidar.height", [](Config& c) -> double& { return c.synth.lidar.height; });
    num("lidar.dropout", [](Config& c) -> double& { return c.synth.lidar.dropout; });
    num("lidar.sigma", [](Config& c) -> double& { return c.synth.lidar.sigma; });
    // label rendering
    num("labels.stroke_pv_px", [](Config& c) -> double& { return c.labels.stroke_pv_px; });
    num("labels.stroke_bev_cells",
        [](Config& c) -> double& { return c.labels.stroke_bev_cells; });
    return r;
}

const Registry& registry() {
    static const Registry r = build_registry();
    return r;
}

}  // namespace

std::vector<double> model_anchors(const ModelConfig& m) {
    std::vector<double> a(m.m);
    for (std::size_t i = 0; i < m.m; ++i) {
        a[i] = m.anchor_y_lo + (m.anchor_y_hi - m.anchor_y_lo) * static_cast<double>(i) /
                                   static_cast<double>(m.m - 1);
    }
    return a;
}

void Config::finalize() {
    // Decoder width always equals the fused feature width.
    model.decoder.dim = model.backbone.c;
    train.weights = loss;
    // Anchors shared by the model head, the evaluator, and gt resampling.
    eval.y_anchors = model_anchors(model);
    // Labels are rendered at the model's own resolutions.
    labels.stride = model.backbone.stride;
    labels.bev_grid = model.bev_grid;
    labels.depth_bins = model.backbone.depth_bins;
    labels.depth_min = model.backbone.depth_min;
    labels.depth_max = model.backbone.depth_max;
    labels.y_anchors = eval.y_anchors;
    // The camera renders at the model's input size.
    synth.img_h = model.backbone.img_h;
    synth.img_w = model.backbone.img_w;
    try {
        model.validate();
        eval.validate();
        synth.validate();
        labels.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

Config default_config() {
    Config c;
    // Desk-scale base: wide enough to learn, small enough for a CPU.
    c.model.backbone.c = 64;
    c.model.decoder.dim = 64;
    c.model.bev_grid.origin_x = -10.0;
    c.model.bev_grid.origin_y = 0.0;
    c.model.bev_grid.cell_x = 0.5;
    c.model.bev_grid.cell_y = 2.0;
    c.model.bev_grid.cols = 40;
    c.model.bev_grid.rows = 52;
    c.model.num_classes = 5;  // background + default synth categories
    return c;
}

void apply_kv(Config& cfg, const std::string& key, const std::string& value) {
    const auto& reg = registry();
    auto it = reg.find(key);
    if (it == reg.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(cfg, key, value);
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path);
    Config cfg = default_config();
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: " + path + ":" + std::to_string(ln) +
                              ": expected key=value");
        }
        apply_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

std::string dump_config(const Config& cfg) {
    std::string out;
    for (const auto& [key, entry] : registry()) {
        out += key + "=" + entry.get(cfg) + "\n";
    }
    return out;
}

}  // namespace dv
