#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "distillforge/gradcheck.hpp"
#include "distillforge/ops.hpp"
#include "distillforge/rng.hpp"

namespace dftest {

using namespace distillforge;

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Shape random_shape(Rng& rng, std::size_t rank, std::size_t lo, std::size_t hi) {
  Shape s(rank);
  for (auto& e : s) e = lo + rng.below(hi - lo + 1);
  return s;
}

/// Gradient check of `fn` over freshly drawn inputs: the probe loss is a
/// random weighting of every output element, so the whole Jacobian is covered.
inline GradCheckReport check_op(Rng& rng, std::vector<Tensor<double>> inputs,
                                const std::function<Var<double>(std::vector<Var<double>>&)>& fn,
                                GradCheckOptions options = {}) {
  std::vector<std::unique_ptr<Parameter<double>>> owned;
  std::vector<Parameter<double>*> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    owned.push_back(std::make_unique<Parameter<double>>("in" + std::to_string(i), std::move(inputs[i])));
    params.push_back(owned.back().get());
  }
  auto probe = std::make_shared<Tensor<double>>();
  LossBuilder build = [&, probe](Tape<double>& tape) {
    std::vector<Var<double>> vars;
    for (auto* p : params) vars.push_back(tape.parameter(*p));
    Var<double> out = fn(vars);
    if (probe->empty()) *probe = random_tensor(rng, out.value().shape());
    return ops::weighted_sum(out, *probe);
  };
  return finite_diff_check(build, params, options);
}

}  // namespace dftest
