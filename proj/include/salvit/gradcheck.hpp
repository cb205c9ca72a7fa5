#pragma once

#include <functional>
#include <string>

#include "salvit/params.hpp"

namespace salvit::nc {

/// A scalar loss rebuilt from scratch on every call; the binder supplies
/// the current parameter values.
using LossFn = std::function<Var(Graph&, Binder&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Central-difference check of reverse-mode gradients over every component
/// of every parameter in the store. Returns
///   max over components of |analytic - numeric| / max(1, |analytic|).
double grad_check(const LossFn& f, ParamStore& params, double h = 1e-5);

GradCheckReport grad_check_report(const LossFn& f, ParamStore& params, double h = 1e-5);

}  // namespace salvit::nc
