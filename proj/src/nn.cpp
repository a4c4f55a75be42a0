#include "fhmr/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace fhmr {

Tensor ParameterStore::add_parameter(const std::string& name, Tensor value) {
  if (parameters_.count(name) || buffers_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  value.set_requires_grad(true);
  parameters_.emplace(name, value);
  return value;
}

Tensor ParameterStore::add_buffer(const std::string& name, Tensor value) {
  if (parameters_.count(name) || buffers_.count(name)) throw std::invalid_argument("duplicate buffer " + name);
  value.set_requires_grad(false);
  buffers_.emplace(name, value);
  return value;
}

Tensor ParameterStore::parameter(const std::string& name) const {
  auto it = parameters_.find(name);
  if (it == parameters_.end()) throw std::out_of_range("no parameter " + name);
  return it->second;
}

Tensor ParameterStore::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw std::out_of_range("no buffer " + name);
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : parameters_) t.zero_grad();
}

int64_t ParameterStore::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : parameters_) n += t.numel();
  return n;
}

Tensor uniform_init(Shape shape, double fan_in, std::mt19937_64& rng, double gain) {
  const double bound = gain / std::sqrt(fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Linear::Linear(ParameterStore& store, const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng,
               double gain) {
  weight = store.add_parameter(name + ".weight", uniform_init({in, out}, static_cast<double>(in), rng, gain));
  bias = store.add_parameter(name + ".bias", uniform_init({out}, static_cast<double>(in), rng, gain));
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out, int kernel, int stride,
               int padding, std::mt19937_64& rng)
    : geometry{stride, padding} {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  weight = store.add_parameter(name + ".weight", uniform_init({out, in, kernel, kernel}, fan_in, rng));
  bias = store.add_parameter(name + ".bias", uniform_init({out}, fan_in, rng));
}

ConvTranspose2d::ConvTranspose2d(ParameterStore& store, const std::string& name, int64_t in, int64_t out,
                                 int kernel, int stride, int padding, std::mt19937_64& rng)
    : geometry{stride, padding} {
  const double fan_in = static_cast<double>(out * kernel * kernel);
  weight = store.add_parameter(name + ".weight", uniform_init({in, out, kernel, kernel}, fan_in, rng));
  bias = store.add_parameter(name + ".bias", uniform_init({out}, fan_in, rng));
}

BatchNorm2d::BatchNorm2d(ParameterStore& store, const std::string& name, int64_t channels) {
  gamma = store.add_parameter(name + ".gamma", Tensor::full({channels}, 1.0));
  beta = store.add_parameter(name + ".beta", Tensor::zeros({channels}));
  running_mean = store.add_buffer(name + ".running_mean", Tensor::zeros({channels}));
  running_var = store.add_buffer(name + ".running_var", Tensor::full({channels}, 1.0));
}

void Adam::step(ParameterStore& store) {
  ++steps_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (const auto& [name, param] : store.parameters()) {
    Tensor p = param;
    const std::vector<double> g = p.grad();
    auto& m = first_[name];
    auto& v = second_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    auto values = p.mutable_values();
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1 - options_.beta2) * g[i] * g[i];
      values[i] -= options_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.epsilon);
    }
  }
}

}  // namespace fhmr
