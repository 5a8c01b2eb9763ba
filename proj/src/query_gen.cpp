#include "dv/query_gen.hpp"

#include <stdexcept>

namespace dv {

Tensor coord_features(std::size_t h, std::size_t w) {
    if (h < 2 || w < 2) throw std::invalid_argument("coord_features: degenerate size");
    Tensor s = Tensor::zeros({2, h, w});
    for (std::size_t r = 0; r < h; ++r) {
        const double ry = -1.0 + 2.0 * static_cast<double>(r) / static_cast<double>(h - 1);
        for (std::size_t c = 0; c < w; ++c) {
            const double rx = -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(w - 1);
            s.data()[0 * h * w + r * w + c] = rx;
            s.data()[1 * h * w + r * w + c] = ry;
        }
    }
    return s;
}

IamHead::IamHead(nn::ParamStore& ps, const std::string& prefix, std::size_t c_in,
                 std::size_t n, RngState& rng)
    : n_(n) {
    if (n == 0) throw std::invalid_argument("IamHead: n must be >= 1");
    stem_ = nn::ConvLayer(ps, prefix + ".stem", c_in + 2, c_in, 3, 1, 1, rng);
    a_head_ = nn::ConvLayer(ps, prefix + ".a", c_in, n, 3, 1, 1, rng);
    mask_head_ = nn::ConvLayer(ps, prefix + ".mask", c_in, n, 3, 1, 1, rng);
}

ViewQueries IamHead::forward(const Tensor& f) const {
    if (f.rank() != 3) throw std::invalid_argument("IamHead: expects [C,H,W]");
    const std::size_t h = f.dim(1), w = f.dim(2);
    Tensor x = relu(stem_.forward(concat({f, coord_features(h, w)}, 0)));
    ViewQueries out;
    out.h = h;
    out.w = w;
    out.a = reshape(sigmoid(a_head_.forward(x)), {n_, h * w});
    out.mask_logits = mask_head_.forward(x);
    // Q = A x F^T with F flattened to [C, H*W]
    out.q = matmul_bt(out.a, reshape(f, {f.dim(0), h * w}));
    return out;
}

UnifiedQueries cluster_unify(const Tensor& q_pv, const Tensor& q_bev, double tau_g,
                             bool hard, RngState& rng) {
    if (q_pv.rank() != 2 || q_pv.shape() != q_bev.shape()) {
        throw std::invalid_argument("cluster_unify: query sets must share [N,C]");
    }
    UnifiedQueries out;
    // similarity of every BEV query to every center (centers = Q_pv)
    Tensor sim = matmul_bt(q_bev, q_pv);                  // [N_bev, N_center]
    out.assign = gumbel_softmax(sim, tau_g, hard, rng);   // rows sum to 1
    out.c_hat = add(matmul_at(out.assign, q_bev), q_pv);  // A^T Q_bev + C
    return out;
}

Tensor build_point_queries(const Tensor& c_hat, const Tensor& e_or_q) {
    if (c_hat.rank() != 2) throw std::invalid_argument("build_point_queries: c_hat is [N,C]");
    if (e_or_q.rank() == 2) {
        if (e_or_q.dim(1) != c_hat.dim(1)) {
            throw std::invalid_argument("build_point_queries: channel mismatch");
        }
        return broadcast_sum_nm(c_hat, e_or_q);  // [N,M,C]
    }
    if (e_or_q.rank() == 3) {
        if (e_or_q.dim(0) != c_hat.dim(0) || e_or_q.dim(2) != c_hat.dim(1)) {
            throw std::invalid_argument("build_point_queries: shape mismatch");
        }
        return add_bcast_lane(e_or_q, c_hat);
    }
    throw std::invalid_argument("build_point_queries: embedding must be [M,C] or [N,M,C]");
}

namespace {

// One direction of the loss: anchors from `qa`, positives/negatives from `qb`.
// Appends per-anchor terms to `terms`.
void infonce_direction(const Tensor& qa_n, const Tensor& qb_n,
                       const std::vector<std::int64_t>& ids_a,
                       const std::vector<std::int64_t>& ids_b, double tau,
                       std::vector<Tensor>& terms) {
    const std::size_t na = qa_n.dim(0), nb = qb_n.dim(0);
    Tensor sim = scale(matmul_bt(qa_n, qb_n), 1.0 / tau);  // [na, nb]
    for (std::size_t i = 0; i < na; ++i) {
        if (ids_a[i] < 0) continue;  // background anchors incur no penalty
        std::int64_t pos = -1;
        for (std::size_t j = 0; j < nb; ++j) {
            if (ids_b[j] == ids_a[i]) {
                pos = static_cast<std::int64_t>(j);
                break;
            }
        }
        if (pos < 0) continue;  // lane not visible in the other view
        Tensor row = narrow(sim, 0, i, 1);  // [1, nb]
        std::vector<Tensor> logits;
        logits.push_back(narrow(row, 1, static_cast<std::size_t>(pos), 1));
        for (std::size_t j = 0; j < nb; ++j) {
            if (ids_b[j] == ids_a[i]) continue;  // same lane: never a negative
            logits.push_back(narrow(row, 1, j, 1));
        }
        Tensor sel = concat(logits, 1);  // [1, 1+negs], positive first
        // -log softmax at the positive slot
        terms.push_back(sub(logsumexp_last(sel), reshape(logits[0], {1})));
    }
}

}  // namespace

Tensor infonce_loss(const Tensor& q_pv, const Tensor& q_bev,
                    const std::vector<std::int64_t>& ids_pv,
                    const std::vector<std::int64_t>& ids_bev, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("infonce_loss: tau must be > 0");
    if (ids_pv.size() != q_pv.dim(0) || ids_bev.size() != q_bev.dim(0)) {
        throw std::invalid_argument("infonce_loss: id count mismatch");
    }
    Tensor pv_n = l2_normalize_rows(q_pv);
    Tensor bev_n = l2_normalize_rows(q_bev);
    std::vector<Tensor> terms;
    infonce_direction(pv_n, bev_n, ids_pv, ids_bev, tau, terms);
    infonce_direction(bev_n, pv_n, ids_bev, ids_pv, tau, terms);
    if (terms.empty()) return Tensor::scalar(0.0);
    Tensor total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scale(total, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace dv
