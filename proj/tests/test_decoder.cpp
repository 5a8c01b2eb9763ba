#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dv/pipeline.hpp"

using namespace dv;

namespace {

CameraCalib forward_calib(std::size_t h, std::size_t w, double f = 60.0) {
    CameraCalib c;
    c.fx = c.fy = f;
    c.cx = static_cast<double>(w) / 2.0;
    c.cy = static_cast<double>(h) / 2.0;
    c.extrinsic = {1, 0, 0, 0, 0, 0, -1, 1.5, 0, 1, 0, 0, 0, 0, 0, 1};
    c.img_h = h;
    c.img_w = w;
    return c;
}

GridSpec small_grid() {
    GridSpec g;
    g.origin_x = -8;
    g.origin_y = 0;
    g.cell_x = 1.0;
    g.cell_y = 2.0;
    g.cols = 16;
    g.rows = 20;
    return g;
}

DecoderConfig tiny_dec(std::size_t dim = 8) {
    DecoderConfig d;
    d.heads = 2;
    d.samples = 3;
    d.dim = dim;
    d.layers = 1;
    return d;
}

DualViewFeatures random_feats(std::size_t c, const GridSpec& g, RngState& rng,
                              std::size_t hf = 8, std::size_t wf = 12) {
    DualViewFeatures f;
    f.f_pv = Tensor::randn({c, hf, wf}, rng, 0.5);
    f.f_bev = Tensor::randn({c, g.rows, g.cols}, rng, 0.5);
    f.stride = 4;
    f.bev_grid = g;
    return f;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

TEST_CASE("DecoderConfig validation") {
    DecoderConfig d = tiny_dec();
    CHECK_NOTHROW(d.validate());
    d.dim = 7;  // not divisible by 2 heads
    CHECK_THROWS(d.validate());
}

TEST_CASE("deform_points") {
    RngState rng(401);
    nn::ParamStore ps;
    DecoderConfig cfg = tiny_dec();
    DecoderLayer layer(ps, "dec", cfg, rng);
    const std::size_t n = 3, m = 4, hs = cfg.heads * cfg.samples;

    SUBCASE("zero offset weights replicate the reference over samples") {
        std::fill(ps.get("dec.delta.l2.w").values().begin(),
                  ps.get("dec.delta.l2.w").values().end(), 0.0);
        Tensor q = Tensor::randn({n, m, cfg.dim}, rng);
        auto d = layer.deform_points(q);
        CHECK(d.ref3d.shape() == Shape{n, m, 3});
        CHECK(d.s3d.shape() == Shape{n, m, hs, 3});
        for (std::size_t i = 0; i < n * m; ++i) {
            for (std::size_t s = 0; s < hs; ++s) {
                for (std::size_t ax = 0; ax < 3; ++ax) {
                    CHECK(d.s3d.data()[(i * hs + s) * 3 + ax] ==
                          doctest::Approx(d.ref3d.data()[i * 3 + ax]).epsilon(1e-12));
                }
            }
        }
    }
    SUBCASE("zero reference logits land at the ROI center") {
        std::fill(ps.get("dec.ref.l2.w").values().begin(),
                  ps.get("dec.ref.l2.w").values().end(), 0.0);
        Tensor q = Tensor::randn({n, m, cfg.dim}, rng);
        auto d = layer.deform_points(q);
        for (std::size_t i = 0; i < n * m; ++i) {
            CHECK(d.ref3d.data()[i * 3 + 0] == doctest::Approx(0.0));   // x in [-10,10]
            CHECK(d.ref3d.data()[i * 3 + 1] == doctest::Approx(53.0));  // y in [3,103]
            CHECK(d.ref3d.data()[i * 3 + 2] == doctest::Approx(0.0));   // z in [-5,5]
        }
    }
    SUBCASE("reference points stay inside the ROI") {
        Tensor q = Tensor::randn({n, m, cfg.dim}, rng, 3.0);
        auto d = layer.deform_points(q);
        for (std::size_t i = 0; i < n * m; ++i) {
            CHECK(d.ref3d.data()[i * 3 + 0] > -10.0);
            CHECK(d.ref3d.data()[i * 3 + 0] < 10.0);
            CHECK(d.ref3d.data()[i * 3 + 1] > 3.0);
            CHECK(d.ref3d.data()[i * 3 + 1] < 103.0);
            CHECK(d.ref3d.data()[i * 3 + 2] > -5.0);
            CHECK(d.ref3d.data()[i * 3 + 2] < 5.0);
        }
    }
    SUBCASE("gradient check through both heads") {
        Tensor q = Tensor::randn({2, 2, cfg.dim}, rng);
        auto f = [&layer](const std::vector<Tensor>& in) {
            auto d = layer.deform_points(in[0]);
            return add(sum(sigmoid(d.s3d)), sum(sigmoid(d.ref3d)));
        };
        std::vector<Tensor> ins = {q, ps.get("dec.ref.l1.w"), ps.get("dec.ref.l2.w"),
                                   ps.get("dec.delta.l2.w")};
        CHECK(grad_check(f, ins, 1e-5, 1e-4).pass);
    }
}

TEST_CASE("dv_deform_attn") {
    RngState rng(409);
    GridSpec g = small_grid();
    CameraCalib calib = forward_calib(32, 48);

    SUBCASE("samples outside both views aggregate to zero") {
        nn::ParamStore ps;
        DecoderConfig cfg = tiny_dec();
        DecoderLayer layer(ps, "dec", cfg, rng);
        // camera rotated to look backward and a BEV grid far away: nothing hits
        CameraCalib away = calib;
        away.extrinsic = {-1, 0, 0, 0, 0, 0, -1, 1.5, 0, -1, 0, 0, 0, 0, 0, 1};
        GridSpec far = g;
        far.origin_x = 500;
        far.origin_y = 500;
        DualViewFeatures feats = random_feats(cfg.dim, far, rng);
        feats.f_pv = Tensor::full({cfg.dim, 8, 12}, 3.0);
        Tensor q = Tensor::randn({2, 3, cfg.dim}, rng);
        DecoderLayer::Trace tr;
        Tensor out = layer.forward(q, feats, away, &tr);
        for (std::size_t i = 0; i < tr.d_pv.size(); ++i) {
            CHECK(tr.d_pv.data()[i] == 0.0);
            CHECK(tr.d_bev.data()[i] == 0.0);
        }
        CHECK(out.all_finite());
    }
    SUBCASE("single sample with weight 1 on a BEV cell center reads that cell") {
        nn::ParamStore ps;
        DecoderConfig cfg;
        cfg.heads = 1;
        cfg.samples = 1;
        cfg.dim = 4;
        cfg.layers = 1;
        RngState r2(11);
        DecoderLayer layer(ps, "dec", cfg, r2);
        // zero offsets; reference fixed at the center of BEV cell (row 5, col 10)
        std::fill(ps.get("dec.delta.l2.w").values().begin(),
                  ps.get("dec.delta.l2.w").values().end(), 0.0);
        std::fill(ps.get("dec.delta.l2.b").values().begin(),
                  ps.get("dec.delta.l2.b").values().end(), 0.0);
        std::fill(ps.get("dec.ref.l2.w").values().begin(),
                  ps.get("dec.ref.l2.w").values().end(), 0.0);
        const double tx = 2.5, ty = 11.0, tz = 0.0;  // cell centers: x=-8+10.5, wait
        // col 10 center: x = -8 + 10.5*1.0 = 2.5 ; row 5 center: y = 5.5*2 = 11
        ps.get("dec.ref.l2.b").data()[0] = logit((tx - (-10.0)) / 20.0);
        ps.get("dec.ref.l2.b").data()[1] = logit((ty - 3.0) / 100.0);
        ps.get("dec.ref.l2.b").data()[2] = logit((tz - (-5.0)) / 10.0);
        // identity value projection on the BEV branch
        auto& vw = ps.get("dec.val_bev.w");
        std::fill(vw.values().begin(), vw.values().end(), 0.0);
        for (std::size_t c = 0; c < 4; ++c) vw.data()[c * 4 + c] = 1.0;
        std::fill(ps.get("dec.val_bev.b").values().begin(),
                  ps.get("dec.val_bev.b").values().end(), 0.0);
        DualViewFeatures feats = random_feats(cfg.dim, g, r2);
        Tensor q = Tensor::randn({1, 1, cfg.dim}, r2);
        DecoderLayer::Trace tr;
        layer.forward(q, feats, calib, &tr);
        // one head, one sample: the softmax weight is exactly 1
        const std::size_t hw = g.rows * g.cols;
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(tr.d_bev.data()[c] ==
                  doctest::Approx(feats.f_bev.data()[c * hw + 5 * g.cols + 10]).epsilon(1e-12));
        }
        // sanity on the deformed point itself
        CHECK(tr.pts.ref3d.data()[0] == doctest::Approx(tx).epsilon(1e-9));
        CHECK(tr.pts.ref3d.data()[1] == doctest::Approx(ty).epsilon(1e-9));
    }
    SUBCASE("random case matches a per-query per-head loop oracle") {
        nn::ParamStore ps;
        DecoderConfig cfg = tiny_dec();
        DecoderLayer layer(ps, "dec", cfg, rng);
        DualViewFeatures feats = random_feats(cfg.dim, g, rng);
        const std::size_t n = 2, m = 3;
        Tensor q = Tensor::randn({n, m, cfg.dim}, rng);
        DecoderLayer::Trace tr;
        layer.forward(q, feats, calib, &tr);
        const std::size_t rows = n * m, h = cfg.heads, s = cfg.samples;
        const std::size_t ch = cfg.dim / h;
        // independent attention weights: linear head + manual softmax
        Tensor attn_raw;
        {
            NoGradGuard ng;
            attn_raw = linear(q, ps.get("dec.attn_bev.w"), ps.get("dec.attn_bev.b"));
        }
        Tensor value;
        {
            NoGradGuard ng;
            value = conv2d(feats.f_bev, ps.get("dec.val_bev.w"), ps.get("dec.val_bev.b"), 1, 0);
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < h; ++k) {
                // softmax over this head's samples
                std::vector<double> w(s);
                double mx = -1e300;
                for (std::size_t si = 0; si < s; ++si) {
                    w[si] = attn_raw.data()[r * h * s + k * s + si];
                    mx = std::max(mx, w[si]);
                }
                double den = 0;
                for (auto& x : w) {
                    x = std::exp(x - mx);
                    den += x;
                }
                double wsum = 0;
                for (auto& x : w) {
                    x /= den;
                    wsum += x;
                }
                CHECK(std::fabs(wsum - 1.0) < 1e-12);
                std::vector<double> want(ch, 0.0);
                for (std::size_t si = 0; si < s; ++si) {
                    const std::size_t p = (r * h + k) * s + si;
                    Tensor coords = Tensor::from_values(
                        {1, 2}, {tr.bev_coords.data()[p * 2], tr.bev_coords.data()[p * 2 + 1]});
                    NoGradGuard ng;
                    Tensor samp = bilinear_sample(narrow(value, 0, k * ch, ch), coords);
                    for (std::size_t c = 0; c < ch; ++c) want[c] += w[si] * samp.data()[c];
                }
                for (std::size_t c = 0; c < ch; ++c) {
                    CHECK(tr.d_bev.data()[r * cfg.dim + k * ch + c] ==
                          doctest::Approx(want[c]).epsilon(1e-10));
                }
            }
        }
    }
    SUBCASE("both views sample the identical deformed 3D point set") {
        nn::ParamStore ps;
        DecoderConfig cfg = tiny_dec();
        DecoderLayer layer(ps, "dec", cfg, rng);
        DualViewFeatures feats = random_feats(cfg.dim, g, rng);
        Tensor q = Tensor::randn({2, 3, cfg.dim}, rng);
        DecoderLayer::Trace tr;
        layer.forward(q, feats, calib, &tr);
        const std::size_t p = tr.pts.s3d.size() / 3;
        Tensor flat = reshape(tr.pts.s3d, {p, 3});
        NoGradGuard ng;
        Tensor pv = project_pv_norm(flat, calib);
        Tensor bev = project_bev_norm(flat, g);
        CHECK(pv.values() == tr.pv_coords.values());
        CHECK(bev.values() == tr.bev_coords.values());
    }
    SUBCASE("disabled BEV branch zeroes its contribution") {
        nn::ParamStore ps;
        DecoderConfig cfg = tiny_dec();
        cfg.use_bev = false;
        DecoderLayer layer(ps, "dec", cfg, rng);
        DualViewFeatures feats = random_feats(cfg.dim, g, rng);
        Tensor q = Tensor::randn({2, 2, cfg.dim}, rng);
        DecoderLayer::Trace tr;
        layer.forward(q, feats, calib, &tr);
        for (std::size_t i = 0; i < tr.d_bev.size(); ++i) CHECK(tr.d_bev.data()[i] == 0.0);
        double pv_norm = 0;
        for (std::size_t i = 0; i < tr.d_pv.size(); ++i) pv_norm += tr.d_pv.data()[i];
        CHECK(pv_norm != 0.0);
    }
}

TEST_CASE("lane_head") {
    RngState rng(419);
    SUBCASE("paper-scale shapes") {
        nn::ParamStore ps;
        LaneHead head(ps, "head", 16, 15, 20, 5, 95, rng);
        Tensor q = Tensor::randn({40, 20, 16}, rng, 0.1);
        LanePrediction p = head.forward(q);
        CHECK(p.x.shape() == Shape{40, 20});
        CHECK(p.z.shape() == Shape{40, 20});
        CHECK(p.vis_logits.shape() == Shape{40, 20});
        CHECK(p.class_logits.shape() == Shape{40, 15});
        CHECK(p.y_anchors.size() == 20);
        for (std::size_t i = 1; i < 20; ++i) CHECK(p.y_anchors[i] > p.y_anchors[i - 1]);
        CHECK(p.y_anchors.front() == doctest::Approx(5.0));
        CHECK(p.y_anchors.back() == doctest::Approx(95.0));
    }
    SUBCASE("zero parameters predict the origin with zero logits") {
        nn::ParamStore ps;
        LaneHead head(ps, "head", 6, 4, 5, 5, 95, rng);
        for (const char* nm : {"head.point.l1.w", "head.point.l2.w", "head.cls.w"}) {
            std::fill(ps.get(nm).values().begin(), ps.get(nm).values().end(), 0.0);
        }
        Tensor q = Tensor::randn({3, 5, 6}, rng);
        LanePrediction p = head.forward(q);
        for (std::size_t i = 0; i < p.x.size(); ++i) {
            CHECK(p.x.data()[i] == 0.0);
            CHECK(p.z.data()[i] == 0.0);
            CHECK(p.vis_logits.data()[i] == 0.0);
        }
        for (std::size_t i = 0; i < p.class_logits.size(); ++i) {
            CHECK(p.class_logits.data()[i] == 0.0);
        }
    }
    SUBCASE("gradient check") {
        nn::ParamStore ps;
        LaneHead head(ps, "head", 5, 3, 4, 5, 95, rng);
        Tensor q = Tensor::randn({2, 4, 5}, rng);
        auto f = [&head](const std::vector<Tensor>& in) {
            LanePrediction p = head.forward(in[0]);
            return add(add(sum(sigmoid(p.x)), sum(sigmoid(p.z))),
                       add(sum(sigmoid(p.vis_logits)), sum(sigmoid(p.class_logits))));
        };
        std::vector<Tensor> ins = {q, ps.get("head.point.l1.w"), ps.get("head.cls.w")};
        CHECK(grad_check(f, ins, 1e-5, 1e-4).pass);
    }
}

namespace {

ModelConfig micro_model_cfg() {
    ModelConfig cfg;
    cfg.backbone.img_h = 32;
    cfg.backbone.img_w = 48;
    cfg.backbone.c1 = 6;
    cfg.backbone.c = 8;
    cfg.backbone.depth_bins = 6;
    cfg.decoder = DecoderConfig{};
    cfg.decoder.heads = 2;
    cfg.decoder.samples = 3;
    cfg.decoder.dim = 8;
    cfg.decoder.layers = 2;
    cfg.bev_grid = small_grid();
    cfg.n = 8;
    cfg.m = 6;
    cfg.num_classes = 5;
    return cfg;
}

}  // namespace

TEST_CASE("decode_forward") {
    ModelConfig cfg = micro_model_cfg();
    CameraCalib calib = forward_calib(cfg.backbone.img_h, cfg.backbone.img_w);
    RngState data_rng(431);
    Tensor img = Tensor::randn({3, cfg.backbone.img_h, cfg.backbone.img_w}, data_rng, 0.5);
    PointCloud pc;
    for (int i = 0; i < 80; ++i) {
        pc.xyz.push_back({data_rng.uniform(-6, 6), data_rng.uniform(2, 38),
                          data_rng.uniform(-1, 1)});
        pc.intensity.push_back(data_rng.uniform());
    }

    SUBCASE("tiny config runs end-to-end with finite outputs") {
        LaneModel model(cfg, 12345);
        RngState rng(1);
        ForwardTrace tr;
        LanePrediction p = model.forward(img, pc, calib, rng, true, &tr);
        CHECK(p.x.shape() == Shape{cfg.n, cfg.m});
        CHECK(p.class_logits.shape() == Shape{cfg.n, cfg.num_classes});
        CHECK(p.x.all_finite());
        CHECK(p.z.all_finite());
        CHECK(p.vis_logits.all_finite());
        CHECK(p.class_logits.all_finite());
        CHECK(tr.depth_logits.shape() ==
              Shape{cfg.backbone.depth_bins, cfg.backbone.feat_h(), cfg.backbone.feat_w()});
        CHECK(tr.layers.size() == 2);
    }
    SUBCASE("same seed gives bit-identical predictions") {
        auto run = [&] {
            LaneModel model(cfg, 999);
            RngState rng(7);
            NoGradGuard ng;
            LanePrediction p = model.forward(img, pc, calib, rng, true);
            std::vector<double> v = p.x.values();
            v.insert(v.end(), p.class_logits.values().begin(), p.class_logits.values().end());
            return v;
        };
        CHECK(run() == run());
    }
    SUBCASE("end-to-end gradient matches finite differences") {
        ModelConfig mc = cfg;
        mc.decoder.layers = 1;
        mc.n = 3;
        mc.m = 4;
        LaneModel model(mc, 31);
        auto f = [&](const std::vector<Tensor>& in) {
            (void)in;  // parameters live in the model's store
            RngState rng(5);
            LanePrediction p = model.forward(img, pc, calib, rng, false);
            return add(add(mean(mul(p.x, p.x)), mean(mul(p.z, p.z))),
                       add(mean(sigmoid(p.vis_logits)), mean(sigmoid(p.class_logits))));
        };
        std::vector<Tensor> ins = {model.params().get("bb.pv1a.w"),
                                   model.params().get("bb.pt1.w"),
                                   model.params().get("iam_pv.a.w"),
                                   model.params().get("e_points"),
                                   model.params().get("dec0.ref.l2.w"),
                                   model.params().get("head.point.l2.w")};
        CHECK(grad_check(f, ins, 1e-5, 1e-3).pass);
    }
}
