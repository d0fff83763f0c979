#pragma once

#include <cstdint>
#include <vector>

#include "csmtl/network.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/synthetic.hpp"

namespace csmtl::testing {

/// Scalar shared theta: input 1, a 1x1 bias-free trunk conv with no norm or
/// relu, no heads, and mse targets +1 / -1, so L1 = (theta-1)^2 and
/// L2 = (theta+1)^2.
inline ModelSpec scalar_spec(std::size_t tasks = 2) {
  ModelSpec spec;
  ConvSpec c{1, 1, 1, 1, 0};
  c.bias = false;
  c.batch_norm = false;
  c.relu = false;
  spec.trunk = {c};
  spec.heads.assign(tasks, {});
  for (std::size_t t = 0; t < tasks; ++t) spec.tasks.push_back({"t" + std::to_string(t), LossKind::mse, 1.0});
  return spec;
}

inline Batch scalar_batch(const std::vector<double>& targets) {
  Batch b;
  b.input = Tensor(Shape{1, 1, 1, 1}, 1.0);
  for (double y : targets) b.targets.push_back(Target::regression(Tensor(Shape{1, 1, 1, 1}, y)));
  return b;
}

inline Model scalar_model(double theta, std::size_t tasks = 2) {
  Model m(scalar_spec(tasks), 0);
  m.trunk_layer(0).weight[0] = theta;
  return m;
}

/// Two-task conv model matching the synthetic data: segmentation over
/// `classes` classes and one depth channel.
inline ModelSpec toy_spec(std::size_t classes = 3, std::vector<std::size_t> widths = {8, 8}, std::size_t in = 3) {
  ModelSpec spec;
  std::size_t prev = in;
  for (std::size_t w : widths) {
    spec.trunk.push_back(ConvSpec{prev, w, 3, 1, 1});
    prev = w;
  }
  spec.heads = {{ConvSpec{prev, classes, 1, 1, 0}}, {ConvSpec{prev, 1, 1, 1, 0}}};
  spec.tasks = {{"segmentation", LossKind::cross_entropy, 1.0}, {"depth", LossKind::mse, 1.0}};
  return spec;
}

inline SyntheticConfig toy_data(std::size_t batch = 4, std::size_t size = 6) {
  SyntheticConfig c;
  c.batch_size = batch;
  c.height = size;
  c.width = size;
  return c;
}

}  // namespace csmtl::testing
