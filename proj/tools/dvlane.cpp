#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dv/config.hpp"
#include "dv/io.hpp"
#include "dv/synth.hpp"
#include "dv/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dv;

namespace {

Config make_config(const std::string& path, const std::vector<std::string>& sets) {
    Config cfg = path.empty() ? default_config() : load_config(path);
    for (const auto& kv : sets) {
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("config: --set expects key=value");
        apply_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.finalize();
    return cfg;
}

// Scene bundles live in sorted subdirectories of the dataset root. Labels are
// re-rendered from lanes/cloud/calib at the model's own resolutions, so one
// dataset serves any model configuration.
std::vector<TrainSample> load_dataset(const std::string& dir, const Config& cfg,
                                      bool zero_lidar = false) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && fs::exists(e.path() / "calib.json")) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw ConfigError("no scene bundles under " + dir);
    std::vector<TrainSample> out;
    for (const auto& d : dirs) {
        Scene sc = load_scene_bundle(d.string());
        TrainSample s;
        s.image = sc.image;
        s.cloud = zero_lidar ? PointCloud{} : sc.cloud;
        s.calib = sc.calib;
        SceneLabels lab = make_labels(sc.lanes, s.cloud, sc.calib, cfg.labels);
        s.gts = std::move(lab.gts);
        s.pv_masks = std::move(lab.pv_masks);
        s.bev_masks = std::move(lab.bev_masks);
        s.depth_labels = std::move(lab.depth);
        out.push_back(std::move(s));
    }
    return out;
}

int cmd_synth(const std::string& spec, const std::vector<std::string>& sets,
              const std::string& out, std::size_t count, std::uint64_t seed) {
    Config cfg = make_config(spec, sets);
    fs::create_directories(out);
    for (std::size_t i = 0; i < count; ++i) {
        RngState rng = RngState(seed).fork(i);
        Scene sc = gen_scene(cfg.synth, cfg.labels, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05zu", i);
        save_scene_bundle((fs::path(out) / name).string(), sc);
    }
    std::cout << json{{"scenes", count}, {"out", out}} << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& config,
              const std::vector<std::string>& sets, const std::string& out,
              const std::string& init) {
    Config cfg = make_config(config, sets);
    std::vector<TrainSample> samples = load_dataset(data, cfg);
    LaneModel model(cfg.model, cfg.train.seed);
    if (!init.empty()) model.params().load_values(io::load_checkpoint(init));
    TrainResult r = train(model, samples, cfg.train);
    if (!out.empty()) io::save_checkpoint(out, model.params().all());
    json j{{"epochs", r.epochs.size()}};
    if (!r.epochs.empty()) {
        j["final_train_f1"] = r.epochs.back().train_f1;
        j["final_total"] = r.epochs.back().terms.at("total");
    }
    std::cout << j << "\n";
    return 0;
}

json report_to_json(const EvalReport& r) {
    return json::parse(report_json(r));
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& config,
             const std::vector<std::string>& sets, const std::string& thresholds,
             const std::string& noise_name, const std::string& probs_csv,
             std::uint64_t seed) {
    Config cfg = make_config(config, sets);
    if (!thresholds.empty()) apply_kv(cfg, "eval.d_thre", thresholds);
    cfg.finalize();
    std::vector<TrainSample> samples = load_dataset(data, cfg);
    LaneModel model(cfg.model, cfg.train.seed);
    model.params().load_values(io::load_checkpoint(ckpt));
    json out{{"format", "DVE1"}};

    std::vector<std::vector<AnchorLane>> preds, gts;
    {
        NoGradGuard ng;
        RngState rng(seed);
        for (const auto& s : samples) {
            preds.push_back(to_anchor_lanes(model.forward(s.image, s.cloud, s.calib, rng, true)));
            gts.push_back(s.gts);
        }
    }
    json reports = json::array();
    for (double th : cfg.eval.d_thre) {
        json r = report_to_json(evaluate(preds, gts, th, cfg.eval));
        r["d_thre"] = th;
        reports.push_back(r);
    }
    out["reports"] = reports;
    // dense threshold sweep for the F1-vs-threshold curve artifact
    std::vector<double> grid;
    for (double th = 0.1; th <= 2.0 + 1e-9; th += 0.1) grid.push_back(th);
    json sweep = json::array();
    for (const auto& [th, f1] : threshold_sweep(preds, gts, grid, cfg.eval)) {
        sweep.push_back({th, f1});
    }
    out["sweep"] = sweep;

    if (!noise_name.empty()) {
        NoiseSetting ns;
        if (noise_name == "SN") {
            ns = ns.doubled();
        } else if (noise_name != "N") {
            throw ConfigError("--noise must be N or SN");
        }
        std::vector<double> probs;
        {
            std::stringstream ss(probs_csv);
            std::string item;
            while (std::getline(ss, item, ',')) probs.push_back(std::stod(item));
        }
        std::vector<CameraCalib> calibs;
        for (const auto& s : samples) calibs.push_back(s.calib);
        auto predict = [&](std::size_t i, const CameraCalib& calib) {
            NoGradGuard ng;
            RngState rng(seed + 17);
            return to_anchor_lanes(
                model.forward(samples[i].image, samples[i].cloud, calib, rng, true));
        };
        json rows = json::array();
        for (const auto& row : robustness_run(predict, calibs, gts, cfg.eval.d_thre.front(),
                                              cfg.eval, ns, probs, seed + 23)) {
            json r = report_to_json(row.report);
            r["prob"] = row.prob;
            rows.push_back(r);
        }
        out["robustness"] = {{"noise", noise_name}, {"rows", rows}};
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

// ---- gradcheck ----

struct CheckResult {
    std::string name;
    bool pass;
    double max_rel;
};

int cmd_gradcheck() {
    std::vector<CheckResult> results;
    RngState rng(99);
    auto run = [&](const std::string& name,
                   const std::function<Tensor(const std::vector<Tensor>&)>& f,
                   std::vector<Tensor> inputs) {
        auto rep = grad_check(f, std::move(inputs), 1e-5, 1e-4);
        results.push_back({name, rep.pass, rep.max_rel_err});
    };
    auto rnd = [&](Shape s) { return Tensor::randn(s, rng, 1.0, true); };
    auto rnd_pos = [&](Shape s) {
        Tensor t = Tensor::randn(s, rng, 0.3, true);
        for (auto& v : t.values()) v = 0.5 + std::abs(v);
        return t;
    };

    run("add", [](const std::vector<Tensor>& in) { return sum(add(in[0], in[1])); },
        {rnd({3, 4}), rnd({3, 4})});
    run("sub", [](const std::vector<Tensor>& in) { return sum(sub(in[0], in[1])); },
        {rnd({3, 4}), rnd({3, 4})});
    run("mul", [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[1])); },
        {rnd({3, 4}), rnd({3, 4})});
    run("scale_add_scalar",
        [](const std::vector<Tensor>& in) { return sum(add_scalar(scale(in[0], 1.7), 0.3)); },
        {rnd({5})});
    run("abs", [](const std::vector<Tensor>& in) { return sum(abs(in[0])); }, {rnd_pos({6})});
    run("exp_log",
        [](const std::vector<Tensor>& in) { return sum(log(exp(scale(in[0], 0.5)))); },
        {rnd({4, 3})});
    run("sigmoid", [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); },
        {rnd({7})});
    run("relu", [](const std::vector<Tensor>& in) { return sum(relu(in[0])); },
        {rnd_pos({6})});
    run("mean", [](const std::vector<Tensor>& in) { return mean(in[0]); }, {rnd({4, 5})});
    run("mean_axis0", [](const std::vector<Tensor>& in) { return sum(mean_axis0(in[0])); },
        {rnd({4, 5})});
    run("logsumexp_last",
        [](const std::vector<Tensor>& in) { return sum(logsumexp_last(in[0])); },
        {rnd({3, 6})});
    run("reshape_narrow_concat",
        [](const std::vector<Tensor>& in) {
            Tensor r = reshape(in[0], {2, 6});
            return sum(concat({narrow(r, 1, 0, 2), narrow(r, 1, 3, 3)}, 1));
        },
        {rnd({12})});
    run("matmul", [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
        {rnd({3, 4}), rnd({4, 5})});
    run("matmul_bt", [](const std::vector<Tensor>& in) { return sum(matmul_bt(in[0], in[1])); },
        {rnd({3, 4}), rnd({5, 4})});
    run("matmul_at", [](const std::vector<Tensor>& in) { return sum(matmul_at(in[0], in[1])); },
        {rnd({4, 3}), rnd({4, 5})});
    run("l2_normalize_rows",
        [](const std::vector<Tensor>& in) { return sum(l2_normalize_rows(in[0])); },
        {rnd({4, 6})});
    run("linear",
        [](const std::vector<Tensor>& in) { return sum(linear(in[0], in[1], in[2])); },
        {rnd({5, 3}), rnd({3, 4}), rnd({4})});
    run("softmax", [](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], 1), in[1])); },
        {rnd({3, 5}), rnd({3, 5})});
    run("layer_norm",
        [](const std::vector<Tensor>& in) {
            return sum(layer_norm(in[0], in[1], in[2]));
        },
        {rnd({4, 6}), rnd({6}), rnd({6})});
    run("mul_rows", [](const std::vector<Tensor>& in) { return sum(mul_rows(in[0], in[1])); },
        {rnd({4, 3}), rnd({3})});
    run("broadcast_sum_nm",
        [](const std::vector<Tensor>& in) { return sum(broadcast_sum_nm(in[0], in[1])); },
        {rnd({3, 4}), rnd({2, 4})});
    run("add_bcast_lane",
        [](const std::vector<Tensor>& in) { return sum(add_bcast_lane(in[0], in[1])); },
        {rnd({3, 2, 4}), rnd({3, 4})});
    run("bilinear_sample",
        [](const std::vector<Tensor>& in) { return sum(bilinear_sample(in[0], in[1])); },
        {rnd({3, 5, 6}),
         Tensor::from_values({4, 2}, {0.1, 0.2, -0.4, 0.3, 0.05, 0.12, 0.47, -0.53}, true)});
    run("conv2d",
        [](const std::vector<Tensor>& in) {
            return sum(conv2d(in[0], in[1], in[2], 1, 1));
        },
        {rnd({2, 5, 6}), rnd({3, 2, 3, 3}), rnd({3})});
    run("weighted_sum_slots",
        [](const std::vector<Tensor>& in) { return sum(weighted_sum_slots(in[0], in[1])); },
        {rnd({4, 3, 5}), rnd({4, 3})});
    {
        std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0};
        run("masked_max_slots",
            [mask](const std::vector<Tensor>& in) {
                return sum(masked_max_slots(in[0], mask));
            },
            {rnd({2, 3, 4})});
    }
    {
        std::vector<std::int64_t> rows = {0, 2, 1, 0};
        std::vector<std::int64_t> cols = {1, 0, 2, 1};
        run("scatter_reduce",
            [rows, cols](const std::vector<Tensor>& in) {
                return sum(scatter_reduce(in[0], rows, cols, 3, 4, Reduce::Sum));
            },
            {rnd({4, 5})});
    }
    {
        std::vector<double> targets = {1, 0, 1, 1, 0, 0};
        std::vector<double> weights = {1, 1, 0.5, 1, 2, 1};
        run("bce_with_logits",
            [targets, weights](const std::vector<Tensor>& in) {
                return bce_with_logits(in[0], targets, weights);
            },
            {rnd({6})});
    }
    {
        std::vector<std::int64_t> t = {2, 0, -1, 1};
        run("softmax_cross_entropy",
            [t](const std::vector<Tensor>& in) { return softmax_cross_entropy(in[0], t); },
            {rnd({4, 3})});
        run("focal_loss",
            [t](const std::vector<Tensor>& in) { return focal_loss(in[0], t); },
            {rnd({4, 3})});
    }
    run("gumbel_softmax_soft",
        [](const std::vector<Tensor>& in) {
            RngState r(5);
            return sum(mul(gumbel_softmax(in[0], 0.7, false, r), in[1]));
        },
        {rnd({3, 4}), rnd({3, 4})});
    {
        std::vector<std::int64_t> ids_pv = {0, 1, -1};
        std::vector<std::int64_t> ids_bev = {1, 0, -1};
        run("infonce_loss",
            [ids_pv, ids_bev](const std::vector<Tensor>& in) {
                return infonce_loss(in[0], in[1], ids_pv, ids_bev, 0.2);
            },
            {rnd({3, 5}), rnd({3, 5})});
    }

    // End-to-end: finite differences through the whole pipeline on a few
    // parameter entries.
    {
        Config cfg = default_config();
        apply_kv(cfg, "backbone.img_h", "32");
        apply_kv(cfg, "backbone.img_w", "48");
        apply_kv(cfg, "backbone.c1", "6");
        apply_kv(cfg, "backbone.c", "8");
        apply_kv(cfg, "backbone.depth_bins", "6");
        apply_kv(cfg, "decoder.heads", "2");
        apply_kv(cfg, "decoder.samples", "3");
        apply_kv(cfg, "decoder.layers", "1");
        apply_kv(cfg, "grid.origin_x", "-8");
        apply_kv(cfg, "grid.cell_x", "1");
        apply_kv(cfg, "grid.cell_y", "4");
        apply_kv(cfg, "grid.cols", "16");
        apply_kv(cfg, "grid.rows", "26");
        apply_kv(cfg, "model.n", "6");
        apply_kv(cfg, "model.m", "5");
        apply_kv(cfg, "model.num_classes", "4");
        apply_kv(cfg, "model.anchor_y_lo", "5");
        apply_kv(cfg, "model.anchor_y_hi", "45");
        apply_kv(cfg, "synth.focal", "40");
        apply_kv(cfg, "synth.lane_length", "50");
        apply_kv(cfg, "lidar.beams", "12");
        apply_kv(cfg, "lidar.rays_per_beam", "40");
        cfg.finalize();
        RngState srng(4);
        Scene sc = gen_scene(cfg.synth, cfg.labels, srng);
        LaneModel model(cfg.model, 11);
        std::vector<int> gt_cats;
        auto loss_value = [&]() {
            RngState r(7);
            ForwardTrace tr;
            LanePrediction pred = model.forward(sc.image, sc.cloud, sc.calib, r, false, &tr);
            Assignment as_pv = mask_match(tr.pv.mask_logits, {}, sc.labels.pv_masks, gt_cats);
            Assignment as_bev = mask_match(tr.bev.mask_logits, {}, sc.labels.bev_masks, gt_cats);
            std::vector<std::int64_t> ids_pv(cfg.model.n, -1), ids_bev(cfg.model.n, -1);
            for (const auto& [i, j] : as_pv.pairs) ids_pv[i] = static_cast<std::int64_t>(j);
            for (const auto& [i, j] : as_bev.pairs) ids_bev[i] = static_cast<std::int64_t>(j);
            Tensor nce = infonce_loss(tr.pv.q, tr.bev.q, ids_pv, ids_bev, cfg.model.tau_nce);
            Assignment as_lane = lane_match(pred, sc.labels.gts);
            LaneLosses ll = lane_losses(pred, sc.labels.gts, as_lane);
            AuxLosses aux = aux_losses(tr.pv, tr.bev, sc.labels.pv_masks, sc.labels.bev_masks,
                                       as_pv, as_bev, tr.depth_logits, sc.labels.depth);
            return total_loss(ll, aux, nce, cfg.train.weights);
        };
        model.params().zero_grads();
        Tensor loss = loss_value();
        backprop(loss);
        RngState pick(21);
        for (const char* pname :
             {"bb.pv1a.w", "iam_pv.a.w", "e_points", "dec0.ref.l2.w", "head.point.l2.w"}) {
            Tensor& p = model.params().get(pname);
            double max_rel = 0.0;
            bool pass = true;
            for (int c = 0; c < 3; ++c) {
                const std::size_t idx = pick.index(p.size());
                const double g = p.has_grad() ? p.grad()[idx] : 0.0;
                const double eps = 1e-5;
                const double keep = p.data()[idx];
                NoGradGuard ng;
                p.data()[idx] = keep + eps;
                const double up = loss_value().item();
                p.data()[idx] = keep - eps;
                const double dn = loss_value().item();
                p.data()[idx] = keep;
                const double fd = (up - dn) / (2.0 * eps);
                const double rel =
                    std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
                max_rel = std::max(max_rel, rel);
                if (rel > 1e-3) pass = false;
            }
            results.push_back({std::string("pipeline:") + pname, pass, max_rel});
        }
    }

    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << " " << r.name << " max_rel=" << r.max_rel
                  << "\n";
        if (!r.pass) all_pass = false;
    }
    std::cout << (all_pass ? "gradcheck: all passed" : "gradcheck: FAILURES") << "\n";
    return all_pass ? 0 : 3;
}

// ---- bench ----

json bench_config(const Config& cfg, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };
    json out;
    auto t0 = clock::now();
    RngState srng(seed);
    Scene sc = gen_scene(cfg.synth, cfg.labels, srng);
    out["synth_ms"] = ms_since(t0);
    LaneModel model(cfg.model, seed);
    t0 = clock::now();
    RngState frng(seed + 1);
    ForwardTrace tr;
    LanePrediction pred = model.forward(sc.image, sc.cloud, sc.calib, frng, false, &tr);
    out["forward_ms"] = ms_since(t0);
    t0 = clock::now();
    Assignment as = lane_match(pred, sc.labels.gts);
    LaneLosses ll = lane_losses(pred, sc.labels.gts, as);
    backprop(add(add(ll.x, ll.z), add(ll.v, ll.c)));
    out["backward_ms"] = ms_since(t0);
    out["total_ms"] = out["synth_ms"].get<double>() + out["forward_ms"].get<double>() +
                      out["backward_ms"].get<double>();
    return out;
}

int cmd_bench(const std::string& config, const std::vector<std::string>& sets,
              std::uint64_t seed) {
    Config base = make_config(config, sets);
    Config tiny = make_config(config, sets);
    for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
             {"backbone.img_h", "32"}, {"backbone.img_w", "48"},  {"backbone.c1", "6"},
             {"backbone.c", "8"},      {"backbone.depth_bins", "6"}, {"decoder.heads", "2"},
             {"decoder.samples", "2"}, {"decoder.layers", "1"},   {"grid.cols", "16"},
             {"grid.rows", "26"},      {"grid.cell_x", "1"},      {"grid.cell_y", "4"},
             {"grid.origin_x", "-8"},  {"model.n", "6"},          {"model.m", "5"},
             {"model.num_classes", "4"}, {"lidar.beams", "8"},    {"lidar.rays_per_beam", "30"},
             {"synth.focal", "40"}}) {
        apply_kv(tiny, k, v);
    }
    tiny.finalize();
    json out{{"tiny", bench_config(tiny, seed)}, {"base", bench_config(base, seed)}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dvlane: dual-view 3D lane detection toolkit"};
    app.require_subcommand(1);

    std::string spec, out_dir, data, config, ckpt, init, thresholds, noise, probs = "0,0.3,0.5,0.7";
    std::vector<std::string> sets;
    std::size_t count = 1;
    std::uint64_t seed = 0;

    auto* c_synth = app.add_subcommand("synth", "generate scene bundles");
    c_synth->add_option("--spec", spec, "config file");
    c_synth->add_option("--out", out_dir, "output directory")->required();
    c_synth->add_option("--count", count, "number of scenes");
    c_synth->add_option("--seed", seed, "master seed");
    c_synth->add_option("--set", sets, "key=value overrides");

    auto* c_train = app.add_subcommand("train", "train a model");
    c_train->add_option("--data", data, "scene bundle directory")->required();
    c_train->add_option("--config", config, "config file");
    c_train->add_option("--out", ckpt, "checkpoint output directory");
    c_train->add_option("--init", init, "checkpoint to start from");
    c_train->add_option("--set", sets, "key=value overrides");

    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    c_eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    c_eval->add_option("--data", data, "scene bundle directory")->required();
    c_eval->add_option("--config", config, "config file");
    c_eval->add_option("--thresholds", thresholds, "comma list of d_thre values");
    c_eval->add_option("--noise", noise, "calibration noise setting: N or SN");
    c_eval->add_option("--prob", probs, "comma list of noise probabilities");
    c_eval->add_option("--seed", seed, "inference seed");
    c_eval->add_option("--set", sets, "key=value overrides");

    auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    (void)c_grad;
    auto* c_bench = app.add_subcommand("bench", "per-stage wall times, tiny vs base");
    c_bench->add_option("--config", config, "config file");
    c_bench->add_option("--seed", seed, "bench seed");
    c_bench->add_option("--set", sets, "key=value overrides");

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(c_synth)) return cmd_synth(spec, sets, out_dir, count, seed);
        if (app.got_subcommand(c_train)) return cmd_train(data, config, sets, ckpt, init);
        if (app.got_subcommand(c_eval)) {
            return cmd_eval(ckpt, data, config, sets, thresholds, noise, probs, seed);
        }
        if (app.got_subcommand(c_grad)) return cmd_gradcheck();
        if (app.got_subcommand(c_bench)) return cmd_bench(config, sets, seed);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }
}
