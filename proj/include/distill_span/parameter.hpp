#pragma once

#include <string>
#include <vector>

#include "distill_span/tensor.hpp"

namespace distill_span {

// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool weight_matrix)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        decay(weight_matrix) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  // L2 decay applies to weight matrices only.
  bool decay = false;

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

template <typename T>
using ConstParameterList = std::vector<const Parameter<T>*>;

// Throws ConfigError when two parameters share a name.
template <typename T>
void require_unique_names(const ConstParameterList<T>& params);

}  // namespace distill_span
