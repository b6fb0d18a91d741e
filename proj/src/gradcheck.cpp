#include "l3/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace l3 {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (pass ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " (tol " << tol << ", "
     << coords_checked << " coords)";
  if (worst_index >= 0)
    os << " worst at " << worst_param << "[" << worst_index << "] analytic=" << worst_analytic
       << " numeric=" << worst_numeric;
  return os.str();
}

GradCheckReport finite_diff_check(
    const std::function<Tensor<double>()>& f,
    const std::vector<std::pair<std::string, Tensor<double>>>& params, double h, double tol,
    int64_t max_coords_per_param, Rng* rng) {
  GradCheckReport rep;
  rep.tol = tol;

  for (auto& [name, p] : params) p.node()->grad.clear();
  Tensor<double> loss = f();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) analytic.push_back(p.node()->grad);

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    auto pt = p;  // non-const handle onto the same node
    const int64_t n = pt.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param < 0 || n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      check(rng != nullptr, ErrorKind::Config,
            "finite_diff_check: rng required for coordinate sampling");
      for (int64_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<int64_t>(rng->below(static_cast<uint64_t>(n))));
    }

    for (int64_t idx : coords) {
      double* w = pt.data() + idx;
      const double saved = *w;
      double fp, fm;
      {
        NoGradGuard ng;
        *w = saved + h;
        fp = f().item();
        *w = saved - h;
        fm = f().item();
        *w = saved;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi].empty() ? 0.0 : analytic[pi][static_cast<size_t>(idx)];
      const double diff = std::abs(a - numeric);
      double err = 0;
      if (diff > 1e-9) err = diff / std::max(std::abs(a), std::abs(numeric));
      ++rep.coords_checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = name;
        rep.worst_index = idx;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace l3
