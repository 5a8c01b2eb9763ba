#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kBin = DVLANE_BIN;
const std::string kRoot = "/tmp/dv_cli_test";

int run(const std::string& args, const std::string& out_file = "/dev/null") {
    const std::string cmd = kBin + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string tiny_cfg() {
    const std::string path = kRoot + "/tiny.cfg";
    std::ofstream os(path);
    os << "backbone.img_h=32\nbackbone.img_w=48\nbackbone.c1=6\nbackbone.c=8\n"
          "backbone.depth_bins=6\ndecoder.heads=2\ndecoder.samples=3\ndecoder.layers=1\n"
          "grid.origin_x=-8\ngrid.cell_x=1\ngrid.cell_y=4\ngrid.cols=16\ngrid.rows=26\n"
          "model.n=6\nmodel.m=5\nmodel.num_classes=4\nmodel.anchor_y_lo=5\n"
          "model.anchor_y_hi=45\nsynth.focal=40\nsynth.lane_length=50\n"
          "synth.lanes_lo=1\nsynth.lanes_hi=2\nsynth.category_probs=0.4,0.3,0.3\n"
          "lidar.beams=12\nlidar.rays_per_beam=40\n"
          "train.epochs=2\ntrain.batch=2\ntrain.lr=0.002\n";
    return path;
}

bool same_bytes(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

}  // namespace

TEST_CASE("cli") {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    const std::string cfg = tiny_cfg();

    SUBCASE("synth writes a complete bundle and is seed-deterministic") {
        REQUIRE(run("synth --spec " + cfg + " --out " + kRoot + "/a --count 2 --seed 9") == 0);
        for (const char* f : {"calib.json", "cloud.bin", "image.bin", "pv_masks.bin",
                              "bev_masks.bin", "labels.json", "lanes.jsonl"}) {
            CHECK(fs::exists(fs::path(kRoot) / "a/scene_00000" / f));
            CHECK(fs::exists(fs::path(kRoot) / "a/scene_00001" / f));
        }
        REQUIRE(run("synth --spec " + cfg + " --out " + kRoot + "/b --count 2 --seed 9") == 0);
        for (const auto& e : fs::recursive_directory_iterator(kRoot + "/a")) {
            if (!e.is_regular_file()) continue;
            const fs::path rel = fs::relative(e.path(), kRoot + "/a");
            CHECK(same_bytes(e.path(), fs::path(kRoot) / "b" / rel));
        }
        // different seed changes the scenes
        REQUIRE(run("synth --spec " + cfg + " --out " + kRoot + "/c --count 1 --seed 10") == 0);
        CHECK(!same_bytes(fs::path(kRoot) / "a/scene_00000/cloud.bin",
                          fs::path(kRoot) / "c/scene_00000/cloud.bin"));
    }

    SUBCASE("config errors exit with code 2 and name the key") {
        REQUIRE(run("synth --spec " + cfg + " --out " + kRoot + "/d --count 2 --seed 1") == 0);
        const std::string log = kRoot + "/err.txt";
        CHECK(run("train --data " + kRoot + "/d --config " + cfg + " --set nope.key=1", log) == 2);
        CHECK(slurp(log).find("nope.key") != std::string::npos);
        CHECK(run("train --data " + kRoot + "/d --config " + cfg +
                  " --set train.epochs=many", log) == 2);
        CHECK(slurp(log).find("train.epochs") != std::string::npos);
        CHECK(run("train --data " + kRoot + "/d --config /nonexistent.cfg", log) == 2);
        CHECK(run("definitely-not-a-command", log) == 2);
    }

    SUBCASE("train, checkpoint round trip, eval report") {
        REQUIRE(run("synth --spec " + cfg + " --out " + kRoot + "/scenes --count 4 --seed 5") ==
                0);
        const std::string out = kRoot + "/train.json";
        REQUIRE(run("train --data " + kRoot + "/scenes --config " + cfg + " --out " + kRoot +
                        "/ckpt",
                    out) == 0);
        json tr = json::parse(slurp(out));
        CHECK(tr["epochs"] == 2);
        CHECK(fs::exists(kRoot + "/ckpt/manifest.json"));

        // identical rerun is bit-identical
        REQUIRE(run("train --data " + kRoot + "/scenes --config " + cfg + " --out " + kRoot +
                        "/ckpt2",
                    out) == 0);
        for (const auto& e : fs::directory_iterator(kRoot + "/ckpt")) {
            CHECK(same_bytes(e.path(), fs::path(kRoot + "/ckpt2") / e.path().filename()));
        }
        // zero-epoch resume carries the weights through unchanged
        REQUIRE(run("train --data " + kRoot + "/scenes --config " + cfg + " --init " + kRoot +
                        "/ckpt --set train.epochs=0 --out " + kRoot + "/ckpt3",
                    out) == 0);
        for (const auto& e : fs::directory_iterator(kRoot + "/ckpt")) {
            CHECK(same_bytes(e.path(), fs::path(kRoot + "/ckpt3") / e.path().filename()));
        }

        const std::string ev = kRoot + "/eval.json";
        REQUIRE(run("eval --ckpt " + kRoot + "/ckpt --data " + kRoot +
                        "/scenes --config " + cfg + " --thresholds 0.5,1.5",
                    ev) == 0);
        json j = json::parse(slurp(ev));
        CHECK(j["format"] == "DVE1");
        REQUIRE(j["reports"].size() == 2);
        CHECK(j["reports"][0]["d_thre"] == 0.5);
        for (const auto& r : j["reports"]) {
            CHECK(r.contains("f1"));
            CHECK(r.contains("precision"));
            CHECK(r.contains("x_err_near"));
        }
        // F1 monotone along the sweep
        double prev = -1.0;
        for (const auto& pt : j["sweep"]) {
            const double f1 = pt[1].get<double>();
            CHECK(f1 >= prev);
            prev = f1;
        }

        // robustness grid: one row per probability
        REQUIRE(run("eval --ckpt " + kRoot + "/ckpt --data " + kRoot +
                        "/scenes --config " + cfg + " --noise SN --prob 0,0.3,0.5,0.7",
                    ev) == 0);
        json jn = json::parse(slurp(ev));
        REQUIRE(jn["robustness"]["rows"].size() == 4);
        CHECK(jn["robustness"]["noise"] == "SN");
        CHECK(jn["robustness"]["rows"][0]["prob"] == 0.0);
        CHECK(jn["robustness"]["rows"][3]["prob"] == 0.7);
    }

    SUBCASE("bench reports per-stage times, tiny under base") {
        const std::string out = kRoot + "/bench.json";
        REQUIRE(run("bench --seed 3", out) == 0);
        json j = json::parse(slurp(out));
        for (const char* stage : {"synth_ms", "forward_ms", "backward_ms", "total_ms"}) {
            CHECK(j["tiny"][stage].get<double>() > 0.0);
            CHECK(j["base"][stage].get<double>() > 0.0);
        }
        CHECK(j["tiny"]["total_ms"].get<double>() < j["base"]["total_ms"].get<double>());
    }

    SUBCASE("gradcheck passes and exits zero") {
        const std::string out = kRoot + "/grad.txt";
        CHECK(run("gradcheck", out) == 0);
        CHECK(slurp(out).find("all passed") != std::string::npos);
    }
}
