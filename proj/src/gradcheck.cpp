#include "salvit/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace salvit::nc {

namespace {

double eval_loss(const LossFn& f, const ParamStore& params) {
  Graph g;
  Binder bind(g, params);
  Var loss = f(g, bind);
  if (loss.size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
  return loss.val()[0];
}

}  // namespace

GradCheckReport grad_check_report(const LossFn& f, ParamStore& params, double h) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

  GradientMap analytic;
  {
    Graph g;
    Binder bind(g, params);
    Var loss = f(g, bind);
    if (loss.size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    g.backward(loss);
    analytic = g.named_grads();
  }

  GradCheckReport report;
  for (auto& [name, p] : params.all()) {
    const Tensor* ag = nullptr;
    auto it = analytic.find(name);
    if (it != analytic.end()) ag = &it->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + h;
      const double fp = eval_loss(f, params);
      p[i] = saved - h;
      const double fm = eval_loss(f, params);
      p[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = ag ? (*ag)[i] : 0.0;
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const LossFn& f, ParamStore& params, double h) {
  return grad_check_report(f, params, h).max_rel_error;
}

}  // namespace salvit::nc
