#include <doctest.h>

#include <cmath>
#include <vector>

#include "dv/query_gen.hpp"

using namespace dv;

TEST_CASE("coord_features") {
    SUBCASE("2x2 corners are the four sign combinations") {
        Tensor s = coord_features(2, 2);
        CHECK(s.shape() == Shape{2, 2, 2});
        // (x, y) per pixel, row-major
        CHECK(s.data()[0] == -1.0);  // x at (0,0)
        CHECK(s.data()[1] == 1.0);   // x at (0,1)
        CHECK(s.data()[4] == -1.0);  // y at (0,0)
        CHECK(s.data()[5] == -1.0);  // y at (0,1)
        CHECK(s.data()[6] == 1.0);   // y at (1,0)
        CHECK(s.data()[7] == 1.0);   // y at (1,1)
    }
    SUBCASE("center pixel of an odd grid is (0,0)") {
        Tensor s = coord_features(5, 7);
        CHECK(s.data()[0 * 35 + 2 * 7 + 3] == doctest::Approx(0.0));
        CHECK(s.data()[1 * 35 + 2 * 7 + 3] == doctest::Approx(0.0));
    }
    SUBCASE("mean over pixels is (0,0)") {
        Tensor s = coord_features(6, 9);
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < 54; ++i) {
            mx += s.data()[i];
            my += s.data()[54 + i];
        }
        CHECK(mx == doctest::Approx(0.0));
        CHECK(my == doctest::Approx(0.0));
    }
    SUBCASE("degenerate size rejected") { CHECK_THROWS(coord_features(1, 4)); }
}

TEST_CASE("iam_queries") {
    RngState rng(307);
    SUBCASE("uniform A of 0.5 over 4 pixels with constant features [1,2]") {
        nn::ParamStore ps;
        IamHead head(ps, "iam", 2, 3, rng);
        // zero the A head so sigmoid gives exactly 0.5 everywhere
        std::fill(ps.get("iam.a.w").values().begin(), ps.get("iam.a.w").values().end(), 0.0);
        std::fill(ps.get("iam.a.b").values().begin(), ps.get("iam.a.b").values().end(), 0.0);
        Tensor f = Tensor::zeros({2, 2, 2});
        for (int i = 0; i < 4; ++i) {
            f.data()[i] = 1.0;
            f.data()[4 + i] = 2.0;
        }
        ViewQueries vq = head.forward(f);
        for (std::size_t r = 0; r < 3; ++r) {
            CHECK(vq.q.data()[r * 2 + 0] == doctest::Approx(2.0));
            CHECK(vq.q.data()[r * 2 + 1] == doctest::Approx(4.0));
        }
        for (std::size_t i = 0; i < vq.a.size(); ++i) CHECK(vq.a.data()[i] == 0.5);
    }
    SUBCASE("zero features give zero queries regardless of A") {
        nn::ParamStore ps;
        IamHead head(ps, "iam", 4, 5, rng);
        ViewQueries vq = head.forward(Tensor::zeros({4, 6, 8}));
        for (std::size_t i = 0; i < vq.q.size(); ++i) CHECK(vq.q.data()[i] == 0.0);
    }
    SUBCASE("random features match the loop-computed weighted sums") {
        nn::ParamStore ps;
        IamHead head(ps, "iam", 3, 4, rng);
        Tensor f = Tensor::randn({3, 5, 6}, rng);
        ViewQueries vq = head.forward(f);
        CHECK(vq.q.shape() == Shape{4, 3});
        CHECK(vq.a.shape() == Shape{4, 30});
        CHECK(vq.mask_logits.shape() == Shape{4, 5, 6});
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t c = 0; c < 3; ++c) {
                double want = 0;
                for (std::size_t px = 0; px < 30; ++px) {
                    want += vq.a.data()[n * 30 + px] * f.data()[c * 30 + px];
                }
                CHECK(std::fabs(vq.q.data()[n * 3 + c] - want) <=
                      1e-12 * std::max(1.0, std::fabs(want)));
            }
        }
        for (std::size_t i = 0; i < vq.a.size(); ++i) {
            CHECK(vq.a.data()[i] > 0.0);
            CHECK(vq.a.data()[i] < 1.0);
        }
    }
    SUBCASE("both heads receive gradients") {
        nn::ParamStore ps;
        IamHead head(ps, "iam", 3, 4, rng);
        Tensor f = Tensor::randn({3, 5, 6}, rng);
        ViewQueries vq = head.forward(f);
        Tensor loss = add(mean(mul(vq.q, vq.q)), mean(mul(vq.mask_logits, vq.mask_logits)));
        backprop(loss);
        for (const char* name : {"iam.a.w", "iam.mask.w", "iam.stem.w"}) {
            Tensor& p = ps.get(name);
            REQUIRE(p.has_grad());
            double norm = 0;
            for (double v : p.grad()) norm += v * v;
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("cluster_unify") {
    SUBCASE("orthogonal match under hard assignment, vanishing temperature") {
        // scaled identity separates the similarities far beyond the gumbel
        // noise, so the argmax is deterministic
        const double s = 20.0;
        Tensor q_pv = Tensor::from_values({2, 2}, {s, 0, 0, s});
        Tensor q_bev = Tensor::from_values({2, 2}, {s, 0, 0, s});
        RngState rng(311);
        auto u = cluster_unify(q_pv, q_bev, 1e-3, true, rng);
        CHECK(u.assign.data()[0] == 1.0);
        CHECK(u.assign.data()[1] == 0.0);
        CHECK(u.assign.data()[2] == 0.0);
        CHECK(u.assign.data()[3] == 1.0);
        CHECK(u.c_hat.data()[0] == doctest::Approx(2 * s));
        CHECK(u.c_hat.data()[1] == doctest::Approx(0.0));
        CHECK(u.c_hat.data()[2] == doctest::Approx(0.0));
        CHECK(u.c_hat.data()[3] == doctest::Approx(2 * s));
    }
    SUBCASE("zero BEV queries leave the centers at Q_pv") {
        RngState rng(313);
        Tensor q_pv = Tensor::randn({4, 3}, rng);
        Tensor q_bev = Tensor::zeros({4, 3});
        auto u = cluster_unify(q_pv, q_bev, 1.0, true, rng);
        for (std::size_t i = 0; i < q_pv.size(); ++i) {
            CHECK(u.c_hat.data()[i] == doctest::Approx(q_pv.data()[i]));
        }
    }
    SUBCASE("hard mode matches the per-center accumulation oracle") {
        RngState rng(317);
        for (int t = 0; t < 20; ++t) {
            const std::size_t n = 5, c = 4;
            Tensor q_pv = Tensor::randn({n, c}, rng);
            Tensor q_bev = Tensor::randn({n, c}, rng);
            auto u = cluster_unify(q_pv, q_bev, 0.7, true, rng);
            for (std::size_t j = 0; j < n; ++j) {  // rows one-hot
                double sum = 0;
                int nz = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum += u.assign.data()[j * n + i];
                    nz += u.assign.data()[j * n + i] != 0.0;
                }
                CHECK(sum == 1.0);
                CHECK(nz == 1);
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double want = q_pv.data()[i * c + ch];
                    for (std::size_t j = 0; j < n; ++j) {
                        if (u.assign.data()[j * n + i] == 1.0) want += q_bev.data()[j * c + ch];
                    }
                    CHECK(u.c_hat.data()[i * c + ch] == doctest::Approx(want).epsilon(1e-12));
                }
            }
        }
    }
    SUBCASE("soft rows sum to 1") {
        RngState rng(331);
        Tensor q_pv = Tensor::randn({6, 4}, rng);
        Tensor q_bev = Tensor::randn({6, 4}, rng);
        auto u = cluster_unify(q_pv, q_bev, 1.3, false, rng);
        for (std::size_t j = 0; j < 6; ++j) {
            double sum = 0;
            for (std::size_t i = 0; i < 6; ++i) sum += u.assign.data()[j * 6 + i];
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
    SUBCASE("common permutation of BEV rows leaves the centers unchanged") {
        RngState rng(337);
        const std::size_t n = 5, c = 4;
        Tensor q_pv = Tensor::randn({n, c}, rng, 10.0);  // wide margins
        Tensor q_bev = Tensor::randn({n, c}, rng, 10.0);
        std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
        Tensor q_bev_p = Tensor::zeros({n, c});
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                q_bev_p.data()[j * c + ch] = q_bev.data()[perm[j] * c + ch];
            }
        }
        RngState r1(7), r2(7);
        auto a = cluster_unify(q_pv, q_bev, 1e-3, true, r1);
        auto b = cluster_unify(q_pv, q_bev_p, 1e-3, true, r2);
        for (std::size_t i = 0; i < n * c; ++i) {
            CHECK(a.c_hat.data()[i] == doctest::Approx(b.c_hat.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("build_point_queries") {
    RngState rng(347);
    SUBCASE("zero centers broadcast the embedding table") {
        Tensor e = Tensor::randn({3, 4}, rng);
        Tensor q = build_point_queries(Tensor::zeros({5, 4}), e);
        CHECK(q.shape() == Shape{5, 3, 4});
        for (std::size_t n = 0; n < 5; ++n) {
            for (std::size_t i = 0; i < 12; ++i) {
                CHECK(q.data()[n * 12 + i] == e.data()[i]);
            }
        }
    }
    SUBCASE("zero embeddings replicate each lane's center") {
        Tensor c_hat = Tensor::randn({4, 3}, rng);
        Tensor q = build_point_queries(c_hat, Tensor::zeros({6, 3}));
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t m = 0; m < 6; ++m) {
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    CHECK(q.data()[(n * 6 + m) * 3 + ch] == c_hat.data()[n * 3 + ch]);
                }
            }
        }
    }
    SUBCASE("later-layer update adds centers to previous point queries") {
        Tensor c_hat = Tensor::randn({2, 3}, rng);
        Tensor prev = Tensor::randn({2, 4, 3}, rng);
        Tensor q = build_point_queries(c_hat, prev);
        for (std::size_t n = 0; n < 2; ++n) {
            for (std::size_t m = 0; m < 4; ++m) {
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    CHECK(q.data()[(n * 4 + m) * 3 + ch] ==
                          doctest::Approx(prev.data()[(n * 4 + m) * 3 + ch] +
                                          c_hat.data()[n * 3 + ch]));
                }
            }
        }
    }
    SUBCASE("paper-scale shape") {
        Tensor c_hat = Tensor::zeros({40, 256});
        Tensor e = Tensor::zeros({20, 256});
        CHECK(build_point_queries(c_hat, e).shape() == Shape{40, 20, 256});
    }
    SUBCASE("mismatched shapes rejected") {
        CHECK_THROWS(build_point_queries(Tensor::zeros({4, 3}), Tensor::zeros({5, 2})));
        CHECK_THROWS(build_point_queries(Tensor::zeros({4, 3}), Tensor::zeros({3, 5, 3})));
    }
}

namespace {

// direct evaluation of the contrastive loss definition, plain loops
double infonce_oracle(const Tensor& q_pv, const Tensor& q_bev,
                      const std::vector<std::int64_t>& ids_pv,
                      const std::vector<std::int64_t>& ids_bev, double tau) {
    auto normalize = [](const Tensor& q) {
        std::vector<std::vector<double>> rows(q.dim(0), std::vector<double>(q.dim(1)));
        for (std::size_t i = 0; i < q.dim(0); ++i) {
            double n2 = 0;
            for (std::size_t j = 0; j < q.dim(1); ++j) n2 += q.data()[i * q.dim(1) + j] *
                                                            q.data()[i * q.dim(1) + j];
            double n = std::max(std::sqrt(n2), 1e-12);
            for (std::size_t j = 0; j < q.dim(1); ++j) rows[i][j] = q.data()[i * q.dim(1) + j] / n;
        }
        return rows;
    };
    auto a = normalize(q_pv), b = normalize(q_bev);
    double total = 0;
    int count = 0;
    auto dir = [&](const std::vector<std::vector<double>>& qa,
                   const std::vector<std::vector<double>>& qb,
                   const std::vector<std::int64_t>& ia, const std::vector<std::int64_t>& ib) {
        for (std::size_t i = 0; i < qa.size(); ++i) {
            if (ia[i] < 0) continue;
            std::int64_t pos = -1;
            for (std::size_t j = 0; j < qb.size(); ++j) {
                if (ib[j] == ia[i]) {
                    pos = static_cast<std::int64_t>(j);
                    break;
                }
            }
            if (pos < 0) continue;
            auto sim = [&](std::size_t j) {
                double s = 0;
                for (std::size_t ch = 0; ch < qa[i].size(); ++ch) s += qa[i][ch] * qb[j][ch];
                return s / tau;
            };
            double num = std::exp(sim(static_cast<std::size_t>(pos)));
            double den = num;
            for (std::size_t j = 0; j < qb.size(); ++j) {
                if (ib[j] == ia[i]) continue;
                den += std::exp(sim(j));
            }
            total += -std::log(num / den);
            ++count;
        }
    };
    dir(a, b, ids_pv, ids_bev);
    dir(b, a, ids_bev, ids_pv);
    return count ? total / count : 0.0;
}

}  // namespace

TEST_CASE("infonce_loss") {
    SUBCASE("equal similarities give ln(1 + negatives)") {
        // identical queries: every normalized similarity is exactly 1
        Tensor q = Tensor::from_values({4, 2}, {3, 0, 3, 0, 3, 0, 3, 0});
        std::vector<std::int64_t> ids = {0, 1, 2, 3};
        Tensor loss = infonce_loss(q, q, ids, ids, 0.5);
        CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("all-background queries incur no penalty") {
        RngState rng(353);
        Tensor q_pv = Tensor::randn({3, 4}, rng);
        Tensor q_bev = Tensor::randn({3, 4}, rng);
        std::vector<std::int64_t> ids = {-1, -1, -1};
        CHECK(infonce_loss(q_pv, q_bev, ids, ids, 0.07).item() == 0.0);
    }
    SUBCASE("anchor without a cross-view match is skipped") {
        RngState rng(359);
        Tensor q_pv = Tensor::randn({2, 3}, rng);
        Tensor q_bev = Tensor::randn({2, 3}, rng);
        // lane 7 visible only in PV: no anchors at all
        std::vector<std::int64_t> pv = {7, -1};
        std::vector<std::int64_t> bev = {-1, -1};
        CHECK(infonce_loss(q_pv, q_bev, pv, bev, 0.07).item() == 0.0);
    }
    SUBCASE("3-lane random case matches the scripted oracle") {
        RngState rng(367);
        for (int t = 0; t < 10; ++t) {
            Tensor q_pv = Tensor::randn({5, 6}, rng);
            Tensor q_bev = Tensor::randn({5, 6}, rng);
            std::vector<std::int64_t> pv = {0, 1, 2, -1, -1};
            std::vector<std::int64_t> bev = {2, -1, 0, 1, -1};
            Tensor loss = infonce_loss(q_pv, q_bev, pv, bev, 0.4);
            double want = infonce_oracle(q_pv, q_bev, pv, bev, 0.4);
            CHECK(loss.item() == doctest::Approx(want).epsilon(1e-10));
        }
    }
    SUBCASE("loss strictly decreases as the positive similarity rises") {
        // anchor e1; positive rotates toward it inside span(e1,e2); negatives
        // live in e3/e4 so every other similarity is pinned at 0
        std::vector<std::int64_t> pv = {0, -1, -1};
        std::vector<std::int64_t> bev = {0, -1, -1};
        double prev = 1e300;
        for (double theta : {1.2, 0.9, 0.6, 0.3, 0.05}) {
            Tensor q_pv = Tensor::from_values({3, 4}, {1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
            Tensor q_bev = Tensor::from_values(
                {3, 4},
                {std::cos(theta), std::sin(theta), 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
            double loss = infonce_loss(q_pv, q_bev, pv, bev, 0.3).item();
            CHECK(loss < prev);
            prev = loss;
        }
    }
    SUBCASE("tau <= 0 rejected") {
        Tensor q = Tensor::zeros({2, 2});
        std::vector<std::int64_t> ids = {0, 1};
        CHECK_THROWS(infonce_loss(q, q, ids, ids, 0.0));
    }
    SUBCASE("gradient check through normalization and selection") {
        RngState rng(373);
        Tensor q_pv = Tensor::randn({4, 3}, rng);
        Tensor q_bev = Tensor::randn({4, 3}, rng);
        std::vector<std::int64_t> pv = {0, 1, -1, 2};
        std::vector<std::int64_t> bev = {1, 0, 2, -1};
        auto f = [&pv, &bev](const std::vector<Tensor>& in) {
            return infonce_loss(in[0], in[1], pv, bev, 0.25);
        };
        CHECK(grad_check(f, {q_pv, q_bev}, 1e-6, 1e-5).pass);
    }
}
