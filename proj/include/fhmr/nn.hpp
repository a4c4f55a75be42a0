#pragma once

// Learnable layers, the parameter registry and the Adam optimizer.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "fhmr/tensor.hpp"

namespace fhmr {

// Named learnable parameters plus non-learnable buffers (normalization
// statistics, stored initial estimates). Names are hierarchical module
// paths such as "field.hidden0.weight"; iteration order is by name.
class ParameterStore {
 public:
  Tensor add_parameter(const std::string& name, Tensor value);
  Tensor add_buffer(const std::string& name, Tensor value);

  const std::map<std::string, Tensor>& parameters() const { return parameters_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  Tensor parameter(const std::string& name) const;
  Tensor buffer(const std::string& name) const;

  void zero_grad();
  int64_t parameter_count() const;

 private:
  std::map<std::string, Tensor> parameters_;
  std::map<std::string, Tensor> buffers_;
};

// Uniform(-bound, bound) with bound = gain / sqrt(fan_in).
Tensor uniform_init(Shape shape, double fan_in, std::mt19937_64& rng, double gain = 1.0);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng,
         double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  int64_t in_features() const { return weight.dim(0); }
};

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  ops::Conv2dGeometry geometry;

  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride,
         int padding, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, geometry); }
};

struct ConvTranspose2d {
  Tensor weight;  // [in, out, k, k]
  Tensor bias;
  ops::Conv2dGeometry geometry;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out, int kernel,
                  int stride, int padding, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return ops::conv_transpose2d(x, weight, bias, geometry); }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  Tensor running_mean, running_var;

  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore& store, const std::string& name, int64_t channels);
  Tensor operator()(const Tensor& x, bool training) {
    return ops::batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
};

struct AdamOptions {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}
  // Applies one update from the gradients currently held by the store.
  void step(ParameterStore& store);
  int64_t steps() const { return steps_; }

 private:
  AdamOptions options_;
  int64_t steps_ = 0;
  std::map<std::string, std::vector<double>> first_, second_;
};

}  // namespace fhmr
