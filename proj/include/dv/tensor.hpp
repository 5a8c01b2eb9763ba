#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dv/rng.hpp"

namespace dv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
class Tensor;

// One recorded operation node. Creation order (id) is a valid topological
// order of the graph, so backprop walks ids in reverse.
struct Node {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<double> v;
    std::vector<double> g;  // sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Node&)> backward;

    std::size_t size() const { return v.size(); }
    double* grad_buf();
    void add_grad(std::size_t i, double val) { grad_buf()[i] += val; }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, RngState& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->v.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t rank() const { return n_->shape.size(); }

    double* data() { return n_->v.data(); }
    const double* data() const { return n_->v.data(); }
    std::vector<double>& values() { return n_->v; }
    const std::vector<double>& values() const { return n_->v; }
    double item() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    bool has_grad() const { return !n_->g.empty(); }
    std::vector<double>& grad() { return n_->g; }
    const std::vector<double>& grad() const { return n_->g; }
    void zero_grad() { n_->g.clear(); }

    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& handle() const { return n_; }

    bool all_finite() const;

  private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;

    friend Tensor make_node(Shape shape, std::vector<Tensor> parents,
                            std::function<void(Node&)> backward);
};

// Builder for custom differentiable ops: allocates the output node, wires
// parents and backward. Values start at zero; the caller fills them.
// When autograd is disabled (NoGradGuard) parents/backward are dropped.
Tensor make_node(Shape shape, std::vector<Tensor> parents,
                 std::function<void(Node&)> backward);

bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_axis0(const Tensor& a);            // [N,C] -> [C]
Tensor logsumexp_last(const Tensor& a);        // [..., K] -> [...]

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);      // [M,K]x[K,N]
Tensor matmul_bt(const Tensor& a, const Tensor& b);   // [M,K]x[N,K]^T -> [M,N]
Tensor matmul_at(const Tensor& a, const Tensor& b);   // [K,M]^Tx[K,N] -> [M,N]
// Rows scaled to unit L2 norm; rows with norm < eps are divided by eps.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
// x: [..., Cin] applied rowwise; W: [Cin, Cout]; b: [Cout]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- nonlinearities with structure ----
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor gumbel_softmax(const Tensor& logits, double tau, bool hard, RngState& rng);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// ---- broadcast helpers ----
Tensor mul_rows(const Tensor& x, const Tensor& g);        // [N,C] * [C]
Tensor broadcast_sum_nm(const Tensor& a, const Tensor& b);  // [N,C]+[M,C]->[N,M,C]
Tensor add_bcast_lane(const Tensor& q, const Tensor& c);    // [N,M,C]+[N,C]

// ---- spatial ops ----
// grid: [C,H,W]; coords: [P,2] normalized to [-1,1] (x, y), cell-center
// convention (align_corners = false); out-of-range samples are zero.
Tensor bilinear_sample(const Tensor& grid, const Tensor& coords);

enum class Reduce { Sum, Mean, Max };
// values: [P,C]; cells: row,col per point (negative = skip); out [C,H,W]
Tensor scatter_reduce(const Tensor& values, const std::vector<std::int64_t>& rows,
                      const std::vector<std::int64_t>& cols, std::size_t h,
                      std::size_t w, Reduce reduce);

// x: [Cin,H,W]; w: [Cout,Cin,kh,kw]; b: [Cout]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad);

// x: [K,S,C], mask: K*S validity flags; max over valid slots -> [K,C].
// Rows with no valid slot produce zeros.
Tensor masked_max_slots(const Tensor& x, const std::vector<std::uint8_t>& mask);

// x: [K,S,C], w: [K,S]; out[k] = sum_s w[k,s] * x[k,s,:]. Differentiable in
// both inputs; the attention aggregation primitive.
Tensor weighted_sum_slots(const Tensor& x, const Tensor& w);

// ---- losses ----
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets,
                       const std::vector<double>& weights);
// logits: [R,K]; target class per row; rows with target < 0 are skipped.
// Mean over counted rows.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets);

// ---- autodiff driver ----
void backprop(const Tensor& loss);

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
};
// f must return a scalar tensor. Central differences with step eps against
// the recorded gradient; rel err uses denominator max(1, |a|, |b|).
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> inputs, double eps, double tol);

}  // namespace dv
