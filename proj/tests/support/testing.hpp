#pragma once

// Shared oracles for unit and acceptance tests.

#include <torch/torch.h>

#include <functional>
#include <vector>

namespace mmfa::oracle {

struct GradCheck {
  double max_relative_error = 0.0;
  int points = 0;
};

using ScalarFn = std::function<torch::Tensor(const std::vector<torch::Tensor>&)>;

// Compares autograd against central differences of the scalar sum(w * fn(x))
// for fixed random weights w. `points` coordinates are drawn at random across
// all inputs (each input must be float64). Relative error is
// |a - n| / max(|a|, |n|, floor).
GradCheck check_gradient(const ScalarFn& fn, const std::vector<torch::Tensor>& inputs, int points, uint64_t seed,
                         double step = 1e-4, double floor = 1e-6);

// Random orthonormal rotations [B, 3, 3] (float64) from random Euler angles.
torch::Tensor random_rotations(int64_t batch, torch::Generator& gen);

}  // namespace mmfa::oracle

namespace mmfa::oracle {

// Same comparison for module parameters: autograd of loss() against central
// differences obtained by perturbing parameter entries in place.
GradCheck check_parameter_gradient(const std::function<torch::Tensor()>& loss, std::vector<torch::Tensor> parameters,
                                   int points, uint64_t seed, double step = 1e-4, double floor = 1e-6);

}  // namespace mmfa::oracle
