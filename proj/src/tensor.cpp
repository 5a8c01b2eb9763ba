#include "dv/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "dv/kernels.hpp"

namespace dv {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> alloc_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    n->shape = std::move(shape);
    n->v.assign(shape_numel(n->shape), 0.0);
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

bool any_requires(const std::vector<Tensor>& ps) {
    for (const auto& p : ps) {
        if (p.requires_grad()) return true;
    }
    return false;
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

double* Node::grad_buf() {
    if (g.empty()) g.assign(v.size(), 0.0);
    return g.data();
}

Tensor make_node(Shape shape, std::vector<Tensor> parents,
                 std::function<void(Node&)> backward) {
    auto n = alloc_node(std::move(shape));
    if (g_grad_enabled && any_requires(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

// ---- factories ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = alloc_node(std::move(shape));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw std::invalid_argument("from_values: " + shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.values() = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, RngState& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.values()) x = stddev * rng.normal();
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return n_->v[0];
}

bool Tensor::all_finite() const {
    for (double x : n_->v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = make_node(a.shape(), {a, b}, [](Node& self) {
        for (std::size_t pi = 0; pi < 2; ++pi) {
            Node* p = self.parents[pi].node();
            if (!p->requires_grad) continue;
            kern::active().axpy(self.size(), 1.0, self.g.data(), p->grad_buf());
        }
    });
    kern::active().add(a.size(), a.data(), b.data(), out.data());
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = make_node(a.shape(), {a, b}, [](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        if (pa->requires_grad) kern::active().axpy(self.size(), 1.0, self.g.data(), pa->grad_buf());
        if (pb->requires_grad) kern::active().axpy(self.size(), -1.0, self.g.data(), pb->grad_buf());
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = make_node(a.shape(), {a, b}, [](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        const std::size_t n = self.size();
        if (pa->requires_grad) {
            double* ga = pa->grad_buf();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.g[i] * pb->v[i];
        }
        if (pb->requires_grad) {
            double* gb = pb->grad_buf();
            for (std::size_t i = 0; i < n; ++i) gb[i] += self.g[i] * pa->v[i];
        }
    });
    kern::active().mul(a.size(), a.data(), b.data(), out.data());
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = make_node(a.shape(), {a}, [c](Node& self) {
        Node* p = self.parents[0].node();
        if (p->requires_grad) kern::active().axpy(self.size(), c, self.g.data(), p->grad_buf());
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = c * a.data()[i];
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (p->requires_grad) kern::active().axpy(self.size(), 1.0, self.g.data(), p->grad_buf());
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
    return out;
}

Tensor abs(const Tensor& a) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < self.size(); ++i) {
            gp[i] += self.g[i] * (p->v[i] > 0.0 ? 1.0 : (p->v[i] < 0.0 ? -1.0 : 0.0));
        }
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::fabs(a.data()[i]);
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < self.size(); ++i) gp[i] += self.g[i] * self.v[i];
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::exp(a.data()[i]);
    return out;
}

Tensor log(const Tensor& a) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < self.size(); ++i) gp[i] += self.g[i] / p->v[i];
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::log(a.data()[i]);
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < self.size(); ++i) {
            gp[i] += self.g[i] * self.v[i] * (1.0 - self.v[i]);
        }
    });
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                 : std::exp(x) / (1.0 + std::exp(x));
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = make_node(a.shape(), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < self.size(); ++i) {
            if (p->v[i] > 0.0) gp[i] += self.g[i];
        }
    });
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::max(0.0, a.data()[i]);
    return out;
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
    Tensor out = make_node({1}, {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < p->v.size(); ++i) gp[i] += self.g[0];
    });
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
    out.data()[0] = s;
    return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean_axis0(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("mean_axis0: expects [N,C]");
    const std::size_t n = a.dim(0), c = a.dim(1);
    Tensor out = make_node({c}, {a}, [n, c](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.g[j] * inv;
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        kern::active().axpy(c, 1.0 / static_cast<double>(n), a.data() + i * c, out.data());
    }
    return out;
}

Tensor logsumexp_last(const Tensor& a) {
    if (a.rank() < 1) throw std::invalid_argument("logsumexp_last: rank >= 1 required");
    const std::size_t k = a.shape().back();
    Shape oshape(a.shape().begin(), a.shape().end() - 1);
    if (oshape.empty()) oshape = {1};
    const std::size_t rows = a.size() / k;
    Tensor out = make_node(oshape, {a}, [rows, k](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
            const double lse = self.v[r];
            for (std::size_t j = 0; j < k; ++j) {
                gp[r * k + j] += self.g[r] * std::exp(p->v[r * k + j] - lse);
            }
        }
    });
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = a.data() + r * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
        out.data()[r] = mx + std::log(s);
    }
    return out;
}

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    Tensor out = make_node(std::move(shape), {a}, [](Node& self) {
        Node* p = self.parents[0].node();
        if (p->requires_grad) kern::active().axpy(self.size(), 1.0, self.g.data(), p->grad_buf());
    });
    out.values() = a.values();
    return out;
}

namespace {
// Row-major strides product of extents after `axis`.
std::size_t inner_stride(const Shape& s, std::size_t axis) {
    std::size_t st = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) st *= s[i];
    return st;
}
std::size_t outer_count(const Shape& s, std::size_t axis) {
    std::size_t c = 1;
    for (std::size_t i = 0; i < axis; ++i) c *= s[i];
    return c;
}
}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape oshape = parts[0].shape();
    if (axis >= oshape.size()) throw std::invalid_argument("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != oshape.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t d = 0; d < oshape.size(); ++d) {
            if (d != axis && p.dim(d) != oshape[d]) {
                throw std::invalid_argument("concat: shape mismatch off-axis");
            }
        }
        total += p.dim(axis);
    }
    oshape[axis] = total;
    const std::size_t inner = inner_stride(oshape, axis);
    const std::size_t outer = outer_count(oshape, axis);

    Tensor out = make_node(oshape, parts, [axis, inner, outer, total](Node& self) {
        std::size_t off = 0;
        for (auto& pt : self.parents) {
            Node* p = pt.node();
            const std::size_t pa = p->shape[axis];
            if (p->requires_grad) {
                double* gp = p->grad_buf();
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = self.g.data() + (o * total + off) * inner;
                    kern::active().axpy(pa * inner, 1.0, src, gp + o * pa * inner);
                }
            }
            off += pa;
        }
    });
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t pa = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total + off) * inner,
                        p.data() + o * pa * inner, pa * inner * sizeof(double));
        }
        off += pa;
    }
    return out;
}

Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank() || start + len > a.dim(axis)) {
        throw std::invalid_argument("narrow: out of range");
    }
    Shape oshape = a.shape();
    oshape[axis] = len;
    const std::size_t inner = inner_stride(a.shape(), axis);
    const std::size_t outer = outer_count(a.shape(), axis);
    const std::size_t full = a.dim(axis);
    Tensor out = make_node(oshape, {a}, [axis, inner, outer, start, len, full](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
            kern::active().axpy(len * inner, 1.0, self.g.data() + o * len * inner,
                                gp + (o * full + start) * inner);
        }
    });
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * len * inner,
                    a.data() + (o * full + start) * inner, len * inner * sizeof(double));
    }
    return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: bad shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_node({m, n}, {a, b}, [m, k, n](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        // dA = dC * B^T ; dB = A^T * dC
        if (pa->requires_grad) {
            kern::active().gemm_bt(m, k, n, self.g.data(), pb->v.data(), pa->grad_buf(), true);
        }
        if (pb->requires_grad) {
            kern::active().gemm_at(k, n, m, pa->v.data(), self.g.data(), pb->grad_buf(), true);
        }
    });
    kern::active().gemm(m, n, k, a.data(), b.data(), out.data(), false);
    return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("matmul_bt: bad shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = make_node({m, n}, {a, b}, [m, k, n](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        // C = A * B^T ; dA = dC * B ; dB = dC^T * A
        if (pa->requires_grad) {
            kern::active().gemm(m, k, n, self.g.data(), pb->v.data(), pa->grad_buf(), true);
        }
        if (pb->requires_grad) {
            kern::active().gemm_at(n, k, m, self.g.data(), pa->v.data(), pb->grad_buf(), true);
        }
    });
    kern::active().gemm_bt(m, n, k, a.data(), b.data(), out.data(), false);
    return out;
}

Tensor matmul_at(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
        throw std::invalid_argument("matmul_at: bad shapes " + shape_str(a.shape()) + "^T x " +
                                    shape_str(b.shape()));
    }
    const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor out = make_node({m, n}, {a, b}, [m, k, n](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        // C = A^T * B ; dA = B * dC^T ; dB = A * dC
        if (pa->requires_grad) {
            kern::active().gemm_bt(k, m, n, pb->v.data(), self.g.data(), pa->grad_buf(), true);
        }
        if (pb->requires_grad) {
            kern::active().gemm(k, n, m, pa->v.data(), self.g.data(), pb->grad_buf(), true);
        }
    });
    kern::active().gemm_at(m, n, k, a.data(), b.data(), out.data(), false);
    return out;
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
    if (x.rank() != 2) throw std::invalid_argument("l2_normalize_rows: expects [N,C]");
    const std::size_t rows = x.dim(0), c = x.dim(1);
    Tensor out = make_node(x.shape(), {x}, [rows, c, eps](Node& self) {
        Node* px = self.parents[0].node();
        if (!px->requires_grad) return;
        double* gx = px->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.v.data() + r * c;
            const double* gy = self.g.data() + r * c;
            const double* xv = px->v.data() + r * c;
            // recover the norm used in forward
            double n2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) n2 += xv[j] * xv[j];
            const double raw = std::sqrt(n2);
            if (raw < eps) {
                // clamped region: plain scaling by 1/eps
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gy[j] / eps;
                continue;
            }
            double ydot = 0.0;
            for (std::size_t j = 0; j < c; ++j) ydot += y[j] * gy[j];
            for (std::size_t j = 0; j < c; ++j) {
                gx[r * c + j] += (gy[j] - y[j] * ydot) / raw;
            }
        }
    });
    for (std::size_t r = 0; r < rows; ++r) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) n2 += x.data()[r * c + j] * x.data()[r * c + j];
        const double norm = std::max(std::sqrt(n2), eps);
        for (std::size_t j = 0; j < c; ++j) out.data()[r * c + j] = x.data()[r * c + j] / norm;
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2 || b.rank() != 1 || x.rank() < 1) {
        throw std::invalid_argument("linear: bad ranks");
    }
    const std::size_t cin = w.dim(0), cout = w.dim(1);
    if (x.shape().back() != cin || b.dim(0) != cout) {
        throw std::invalid_argument("linear: shape mismatch x" + shape_str(x.shape()) +
                                    " w" + shape_str(w.shape()) + " b" + shape_str(b.shape()));
    }
    const std::size_t rows = x.size() / cin;
    Shape oshape = x.shape();
    oshape.back() = cout;
    Tensor out = make_node(oshape, {x, w, b}, [rows, cin, cout](Node& self) {
        Node* px = self.parents[0].node();
        Node* pw = self.parents[1].node();
        Node* pb = self.parents[2].node();
        if (px->requires_grad) {
            kern::active().gemm_bt(rows, cin, cout, self.g.data(), pw->v.data(),
                                   px->grad_buf(), true);
        }
        if (pw->requires_grad) {
            kern::active().gemm_at(cin, cout, rows, px->v.data(), self.g.data(),
                                   pw->grad_buf(), true);
        }
        if (pb->requires_grad) {
            double* gb = pb->grad_buf();
            for (std::size_t r = 0; r < rows; ++r) {
                kern::active().axpy(cout, 1.0, self.g.data() + r * cout, gb);
            }
        }
    });
    kern::active().gemm(rows, cout, cin, x.data(), w.data(), out.data(), false);
    for (std::size_t r = 0; r < rows; ++r) {
        kern::active().axpy(cout, 1.0, b.data(), out.data() + r * cout);
    }
    return out;
}

// ---- structured nonlinearities ----

Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
    const std::size_t k = a.dim(axis);
    const std::size_t inner = inner_stride(a.shape(), axis);
    const std::size_t outer = outer_count(a.shape(), axis);
    Tensor out = make_node(a.shape(), {a}, [k, inner, outer](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * k * inner + in;
                double dotv = 0.0;
                for (std::size_t j = 0; j < k; ++j) {
                    dotv += self.g[base + j * inner] * self.v[base + j * inner];
                }
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t idx = base + j * inner;
                    gp[idx] += self.v[idx] * (self.g[idx] - dotv);
                }
            }
        }
    });
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * k * inner + in;
            double mx = a.data()[base];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, a.data()[base + j * inner]);
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const double e = std::exp(a.data()[base + j * inner] - mx);
                out.data()[base + j * inner] = e;
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::size_t j = 0; j < k; ++j) out.data()[base + j * inner] *= inv;
        }
    }
    return out;
}

Tensor gumbel_softmax(const Tensor& logits, double tau, bool hard, RngState& rng) {
    if (tau <= 0.0) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
    const std::size_t k = logits.shape().back();
    const std::size_t rows = logits.size() / k;
    // Perturbed logits (logits + g) / tau, then softmax over the last axis.
    Tensor pert = Tensor::zeros(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        pert.data()[i] = (logits.data()[i] + rng.gumbel()) / tau;
    }

    std::vector<double> soft(logits.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = pert.data() + r * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            soft[r * k + j] = std::exp(row[j] - mx);
            s += soft[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) soft[r * k + j] /= s;
    }
    Tensor res = make_node(logits.shape(), {logits},
                           [k, rows, tau, soft](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
            double dotv = 0.0;
            for (std::size_t j = 0; j < k; ++j) dotv += self.g[r * k + j] * soft[r * k + j];
            for (std::size_t j = 0; j < k; ++j) {
                gp[r * k + j] += soft[r * k + j] * (self.g[r * k + j] - dotv) / tau;
            }
        }
    });
    if (hard) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::size_t arg = 0;
            for (std::size_t j = 1; j < k; ++j) {
                if (soft[r * k + j] > soft[r * k + arg]) arg = j;
            }
            for (std::size_t j = 0; j < k; ++j) res.data()[r * k + j] = (j == arg) ? 1.0 : 0.0;
        }
    } else {
        std::copy(soft.begin(), soft.end(), res.values().begin());
    }
    return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t c = x.shape().back();
    if (gamma.size() != c || beta.size() != c) {
        throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
    }
    const std::size_t rows = x.size() / c;
    std::vector<double> mu(rows), inv_sd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * c;
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += row[j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
        var /= static_cast<double>(c);
        mu[r] = m;
        inv_sd[r] = 1.0 / std::sqrt(var + eps);
    }
    Tensor out = make_node(x.shape(), {x, gamma, beta},
                           [rows, c, mu, inv_sd](Node& self) {
        Node* px = self.parents[0].node();
        Node* pg = self.parents[1].node();
        Node* pb = self.parents[2].node();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = px->v.data() + r * c;
            const double* go = self.g.data() + r * c;
            const double is = inv_sd[r];
            if (pg->requires_grad || pb->requires_grad) {
                double* gg = pg->requires_grad ? pg->grad_buf() : nullptr;
                double* gb = pb->requires_grad ? pb->grad_buf() : nullptr;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xhat = (xr[j] - mu[r]) * is;
                    if (gg) gg[j] += go[j] * xhat;
                    if (gb) gb[j] += go[j];
                }
            }
            if (px->requires_grad) {
                const double* gam = pg->v.data();
                double sum_d = 0.0, sum_dx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = go[j] * gam[j];
                    sum_d += d;
                    sum_dx += d * (xr[j] - mu[r]) * is;
                }
                double* gx = px->grad_buf() + r * c;
                const double invc = 1.0 / static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double xhat = (xr[j] - mu[r]) * is;
                    const double d = go[j] * gam[j];
                    gx[j] += is * (d - invc * sum_d - invc * xhat * sum_dx);
                }
            }
        }
    });
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * c;
        double* orow = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) {
            orow[j] = (xr[j] - mu[r]) * inv_sd[r] * gamma.data()[j] + beta.data()[j];
        }
    }
    return out;
}

// ---- broadcast helpers ----

Tensor mul_rows(const Tensor& x, const Tensor& g) {
    if (x.rank() != 2 || g.rank() != 1 || x.dim(1) != g.dim(0)) {
        throw std::invalid_argument("mul_rows: expects [N,C] and [C]");
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor out = make_node(x.shape(), {x, g}, [n, c](Node& self) {
        Node* px = self.parents[0].node();
        Node* pg = self.parents[1].node();
        if (px->requires_grad) {
            double* gx = px->grad_buf();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gx[i * c + j] += self.g[i * c + j] * pg->v[j];
                }
            }
        }
        if (pg->requires_grad) {
            double* gg = pg->grad_buf();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gg[j] += self.g[i * c + j] * px->v[i * c + j];
                }
            }
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * g.data()[j];
    }
    return out;
}

Tensor broadcast_sum_nm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw std::invalid_argument("broadcast_sum_nm: expects [N,C] and [M,C]");
    }
    const std::size_t n = a.dim(0), m = b.dim(0), c = a.dim(1);
    Tensor out = make_node({n, m, c}, {a, b}, [n, m, c](Node& self) {
        Node* pa = self.parents[0].node();
        Node* pb = self.parents[1].node();
        if (pa->requires_grad) {
            double* ga = pa->grad_buf();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    kern::active().axpy(c, 1.0, self.g.data() + (i * m + j) * c, ga + i * c);
                }
            }
        }
        if (pb->requires_grad) {
            double* gb = pb->grad_buf();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    kern::active().axpy(c, 1.0, self.g.data() + (i * m + j) * c, gb + j * c);
                }
            }
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            kern::active().add(c, a.data() + i * c, b.data() + j * c,
                               out.data() + (i * m + j) * c);
        }
    }
    return out;
}

Tensor add_bcast_lane(const Tensor& q, const Tensor& cn) {
    if (q.rank() != 3 || cn.rank() != 2 || q.dim(0) != cn.dim(0) || q.dim(2) != cn.dim(1)) {
        throw std::invalid_argument("add_bcast_lane: expects [N,M,C] and [N,C]");
    }
    const std::size_t n = q.dim(0), m = q.dim(1), c = q.dim(2);
    Tensor out = make_node(q.shape(), {q, cn}, [n, m, c](Node& self) {
        Node* pq = self.parents[0].node();
        Node* pc = self.parents[1].node();
        if (pq->requires_grad) {
            kern::active().axpy(self.size(), 1.0, self.g.data(), pq->grad_buf());
        }
        if (pc->requires_grad) {
            double* gc = pc->grad_buf();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < m; ++j) {
                    kern::active().axpy(c, 1.0, self.g.data() + (i * m + j) * c, gc + i * c);
                }
            }
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            kern::active().add(c, q.data() + (i * m + j) * c, cn.data() + i * c,
                               out.data() + (i * m + j) * c);
        }
    }
    return out;
}

// ---- losses ----

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets,
                       const std::vector<double>& weights) {
    if (targets.size() != logits.size() ||
        (!weights.empty() && weights.size() != logits.size())) {
        throw std::invalid_argument("bce_with_logits: size mismatch");
    }
    double wsum = 0.0;
    if (weights.empty()) {
        wsum = static_cast<double>(logits.size());
    } else {
        for (double w : weights) wsum += w;
    }
    if (wsum <= 0.0) return Tensor::scalar(0.0);
    const double inv_w = 1.0 / wsum;
    Tensor out = make_node({1}, {logits}, [targets, weights, inv_w](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < p->v.size(); ++i) {
            const double w = weights.empty() ? 1.0 : weights[i];
            if (w == 0.0) continue;
            const double x = p->v[i];
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                      : std::exp(x) / (1.0 + std::exp(x));
            gp[i] += self.g[0] * w * (s - targets[i]) * inv_w;
        }
    });
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double w = weights.empty() ? 1.0 : weights[i];
        if (w == 0.0) continue;
        const double x = logits.data()[i];
        // log(1 + exp(-|x|)) + max(x,0) - x*t, numerically stable
        loss += w * (std::log1p(std::exp(-std::fabs(x))) + std::max(x, 0.0) -
                     x * targets[i]);
    }
    out.data()[0] = loss * inv_w;
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    if (logits.rank() != 2 || targets.size() != logits.dim(0)) {
        throw std::invalid_argument("softmax_cross_entropy: expects [R,K] with R targets");
    }
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    std::size_t counted = 0;
    for (auto t : targets) {
        if (t >= 0) ++counted;
    }
    if (counted == 0) return Tensor::scalar(0.0);
    const double inv = 1.0 / static_cast<double>(counted);
    Tensor out = make_node({1}, {logits}, [rows, k, targets, inv](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] < 0) continue;
            const double* row = p->v.data() + r * k;
            double mx = row[0];
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < k; ++j) {
                const double pj = std::exp(row[j] - mx) / s;
                const double t = (static_cast<std::int64_t>(j) == targets[r]) ? 1.0 : 0.0;
                gp[r * k + j] += self.g[0] * (pj - t) * inv;
            }
        }
    });
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0) continue;
        const double* row = logits.data() + r * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
        loss += (mx + std::log(s)) - row[static_cast<std::size_t>(targets[r])];
    }
    out.data()[0] = loss * inv;
    return out;
}

// ---- autodiff driver ----

void backprop(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backprop: loss must be scalar");
    if (!std::isfinite(loss.item())) throw std::runtime_error("backprop: loss is not finite");
    if (!loss.requires_grad()) {
        throw std::runtime_error("backprop: loss is detached from any parameter");
    }
    // Gather reachable nodes; reverse creation order is a topological order.
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node()};
    seen.insert(loss.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (auto& p : n->parents) {
            if (p.node()->requires_grad && seen.insert(p.node()).second) {
                stack.push_back(p.node());
            }
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });
    loss.node()->grad_buf()[0] = 1.0;
    for (Node* n : nodes) {
        if (n->backward && !n->g.empty()) n->backward(*n);
    }
}

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                           std::vector<Tensor> inputs, double eps, double tol) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor loss = f(inputs);
    backprop(loss);
    GradCheckReport rep;
    for (auto& in : inputs) {
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double orig = in.data()[i];
            in.data()[i] = orig + eps;
            const double fp = f(inputs).item();
            in.data()[i] = orig - eps;
            const double fm = f(inputs).item();
            in.data()[i] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double bp = in.has_grad() ? in.grad()[i] : 0.0;
            const double denom = std::max({1.0, std::fabs(fd), std::fabs(bp)});
            rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(fd - bp) / denom);
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace dv
