#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "caps/params.hpp"
#include "caps/tape.hpp"

namespace caps {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  size_t checked = 0;
  bool passed(double tol) const { return max_rel_err < tol; }
};

// Central finite-difference check of a scalar function built on a 64-bit
// tape. `build` must construct the full forward graph from the given store
// and return the scalar loss node; it must be deterministic.
//
// For each coordinate of each parameter: compares the analytic gradient from
// one backward() sweep against (f(x+h) - f(x-h)) / 2h.
inline GradCheckReport grad_check(
    const std::function<Tape<double>::Ref(Tape<double>&, ParameterStoreT<double>&)>& build,
    ParameterStoreT<double> params, double h = 1e-5) {
  // analytic gradients
  params.zero_grads();
  {
    Tape<double> tape;
    auto loss = build(tape, params);
    double f0 = tape.scalar_value(loss);
    // determinism guard: rebuilding must reproduce the identical value
    Tape<double> tape2;
    auto loss2 = build(tape2, params);
    if (tape2.scalar_value(loss2) != f0)
      throw ValidationError("grad_check: function is not deterministic");
    tape.backward(loss);
    tape.flush_param_grads();
  }

  auto eval = [&](ParameterStoreT<double>& p) {
    Tape<double> tape;
    auto loss = build(tape, p);
    return tape.scalar_value(loss);
  };

  GradCheckReport rep;
  for (const auto& name : params.names()) {
    auto& e = params.entry(name);
    for (size_t i = 0; i < e.value.size(); ++i) {
      double orig = e.value.data[i];
      e.value.data[i] = orig + h;
      double fp = eval(params);
      e.value.data[i] = orig - h;
      double fm = eval(params);
      e.value.data[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = e.grad.data[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1.0});
      double rel = std::abs(fd - an) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace caps
