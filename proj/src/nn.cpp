#include "dv/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dv::nn {

Tensor ParamStore::create(const std::string& name, Shape shape, double stddev, RngState& rng) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Tensor t = Tensor::randn(std::move(shape), rng, stddev, true);
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::create_zeros(const std::string& name, Shape shape) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    params_.emplace(name, t);
    return t;
}

Tensor ParamStore::create_full(const std::string& name, Shape shape, double value) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    Tensor t = Tensor::full(std::move(shape), value, true);
    params_.emplace(name, t);
    return t;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return it->second;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

void ParamStore::load_values(const std::map<std::string, Tensor>& values) {
    for (auto& [name, t] : params_) {
        auto it = values.find(name);
        if (it == values.end()) throw std::runtime_error("checkpoint missing parameter " + name);
        if (it->second.shape() != t.shape()) {
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        }
        t.values() = it->second.values();
        t.zero_grad();
    }
}

LinearLayer::LinearLayer(ParamStore& ps, const std::string& prefix, std::size_t cin,
                         std::size_t cout, RngState& rng) {
    w = ps.create(prefix + ".w", {cin, cout}, std::sqrt(2.0 / static_cast<double>(cin)), rng);
    b = ps.create_zeros(prefix + ".b", {cout});
}

ConvLayer::ConvLayer(ParamStore& ps, const std::string& prefix, std::size_t cin,
                     std::size_t cout, std::size_t k, std::size_t stride_, std::size_t pad_,
                     RngState& rng)
    : stride(stride_), pad(pad_) {
    const double fan_in = static_cast<double>(cin * k * k);
    w = ps.create(prefix + ".w", {cout, cin, k, k}, std::sqrt(2.0 / fan_in), rng);
    b = ps.create_zeros(prefix + ".b", {cout});
}

LayerNormLayer::LayerNormLayer(ParamStore& ps, const std::string& prefix, std::size_t c) {
    gamma = ps.create_full(prefix + ".gamma", {c}, 1.0);
    beta = ps.create_zeros(prefix + ".beta", {c});
}

Mlp::Mlp(ParamStore& ps, const std::string& prefix, std::size_t cin, std::size_t hidden,
         std::size_t cout, RngState& rng)
    : l1(ps, prefix + ".l1", cin, hidden, rng), l2(ps, prefix + ".l2", hidden, cout, rng) {}

SeFuse::SeFuse(ParamStore& ps, const std::string& prefix, std::size_t c, RngState& rng)
    : gate1(ps, prefix + ".gate1", 2 * c, c, rng),
      gate2(ps, prefix + ".gate2", c, c, rng),
      proj(ps, prefix + ".proj", 2 * c, c, rng) {}

Tensor SeFuse::forward(const Tensor& a, const Tensor& b) const {
    if (a.shape() != b.shape() || a.rank() != 2) {
        throw std::invalid_argument("SeFuse: expects matching [N,C] inputs");
    }
    Tensor cat = concat({a, b}, 1);                       // [N,2C]
    Tensor pooled = mean_axis0(cat);                      // [2C]
    Tensor g = sigmoid(gate2.forward(relu(gate1.forward(pooled))));  // [C]
    return mul_rows(proj.forward(cat), g);
}

}  // namespace dv::nn
