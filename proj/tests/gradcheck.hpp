#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "grn/autograd.hpp"

namespace grn::testing {

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // elements with |grad| above the floor
  std::size_t total = 0;
  std::string worst;  // "param[index]" of the largest error
};

// Compares reverse-mode gradients of the scalar `loss_fn()` with central
// differences, perturbing every element of every tensor in `params`.
// Elements where both gradients are below `floor` are counted but skipped.
template <typename LossFn>
GradReport check_gradients(LossFn&& loss_fn, std::vector<ag::Tensor> params, const std::vector<std::string>& names = {},
                           double eps = 1e-5, double floor = 1e-8) {
  for (auto& p : params) p.zero_grad();
  ag::backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.size(), 0.0));

  GradReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& data = params[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = loss_fn().item();
      data[i] = orig - eps;
      const double down = loss_fn().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      ++rep.total;
      const double scale = std::max(std::abs(a), std::abs(numeric));
      if (scale <= floor) continue;
      ++rep.checked;
      const double rel = std::abs(a - numeric) / scale;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = (k < names.size() ? names[k] : "param" + std::to_string(k)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace grn::testing
