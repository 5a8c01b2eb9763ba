#pragma once

#include <map>
#include <string>
#include <vector>

#include "dv/rng.hpp"
#include "dv/tensor.hpp"

namespace dv::nn {

// Named trainable tensors. Modules register parameters here so the optimizer
// and checkpointing see one flat map.
class ParamStore {
  public:
    Tensor create(const std::string& name, Shape shape, double stddev, RngState& rng);
    Tensor create_zeros(const std::string& name, Shape shape);
    Tensor create_full(const std::string& name, Shape shape, double value);
    Tensor& get(const std::string& name);
    bool has(const std::string& name) const { return params_.count(name) > 0; }
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }
    void zero_grads();
    // Overwrites values of matching names; throws on missing or shape mismatch.
    void load_values(const std::map<std::string, Tensor>& values);

  private:
    std::map<std::string, Tensor> params_;
};

struct LinearLayer {
    Tensor w, b;
    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& prefix, std::size_t cin,
                std::size_t cout, RngState& rng);
    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct ConvLayer {
    Tensor w, b;
    std::size_t stride = 1, pad = 1;
    ConvLayer() = default;
    ConvLayer(ParamStore& ps, const std::string& prefix, std::size_t cin, std::size_t cout,
              std::size_t k, std::size_t stride, std::size_t pad, RngState& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LayerNormLayer {
    Tensor gamma, beta;
    LayerNormLayer() = default;
    LayerNormLayer(ParamStore& ps, const std::string& prefix, std::size_t c);
    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct Mlp {
    LinearLayer l1, l2;
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& prefix, std::size_t cin, std::size_t hidden,
        std::size_t cout, RngState& rng);
    Tensor forward(const Tensor& x) const { return l2.forward(relu(l1.forward(x))); }
};

// Squeeze-excitation fusion of two [N,C] streams: channel gates from the
// mean over N of their concatenation, applied to a linear projection of the
// concatenation.
struct SeFuse {
    LinearLayer gate1, gate2, proj;
    SeFuse() = default;
    SeFuse(ParamStore& ps, const std::string& prefix, std::size_t c, RngState& rng);
    Tensor forward(const Tensor& a, const Tensor& b) const;
};

}  // namespace dv::nn
