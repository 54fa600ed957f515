#pragma once

#include <cmath>
#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "ditmem/autograd.hpp"

namespace ditmem::testing {

struct GradReport {
  double max_rel = 0.0;
  std::string worst;
  std::vector<double> per_leaf;  // worst relative error of each leaf
};

// Central differences against reverse-mode gradients for every element of
// every leaf. Relative error uses max(|a|, |n|, floor * g) as the
// denominator, where g is the largest analytic gradient magnitude.
inline GradReport gradcheck(std::vector<Var>& leaves, const std::function<Var()>& f,
                            double h = 1e-6, double floor = 1e-3) {
  for (auto& l : leaves) l.zero_grad();
  backward(f());
  double gmax = 0.0;
  for (const auto& l : leaves)
    if (l.has_grad()) gmax = std::max(gmax, l.grad().max_abs());
  const double denom_floor = std::max(floor * gmax, 1e-300);
  GradReport r;
  r.per_leaf.assign(leaves.size(), 0.0);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Var& leaf = leaves[li];
    const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor::zeros_like(leaf.value());
    for (std::size_t i = 0; i < leaf.value().numel(); ++i) {
      const double x0 = leaf.value()[i];
      leaf.mutable_value()[i] = x0 + h;
      const double fp = f().value()[0];
      leaf.mutable_value()[i] = x0 - h;
      const double fm = f().value()[0];
      leaf.mutable_value()[i] = x0;
      const double numeric = (fp - fm) / (2 * h);
      const double rel = std::abs(numeric - analytic[i]) /
                         std::max({std::abs(numeric), std::abs(analytic[i]), denom_floor});
      r.per_leaf[li] = std::max(r.per_leaf[li], rel);
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = "leaf " + std::to_string(li) + " element " + std::to_string(i);
      }
    }
  }
  return r;
}

}  // namespace ditmem::testing
