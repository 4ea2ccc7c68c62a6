#pragma once

#include <string>
#include <vector>

#include "pcsnet/autodiff.hpp"

namespace pcsnet {

template <typename T>
struct Conv2d {
  Parameter<T> weight;
  Parameter<T> bias;
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t s)
      : weight(name + ".weight", Shape{cout, cin, k, k}), bias(name + ".bias", Shape{cout}), stride(s) {}

  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t kernel() const { return weight.value.dim(2); }

  void init(Rng& rng) {
    const std::size_t fan_in = in_channels() * kernel() * kernel();
    init_uniform(weight, fan_in, rng);
    init_uniform(bias, fan_in, rng);
  }

  Var operator()(Graph<T>& g, Var x) { return g.conv2d(x, g.param(weight), g.param(bias), stride); }

  Tensor<T> apply(const Tensor<T>& x) const {
    return kernels::conv2d_forward(x, weight.value, bias.value, stride);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  for (auto& v : x.vec()) v = v > T{0} ? v : T{0};
  return x;
}

}  // namespace pcsnet
