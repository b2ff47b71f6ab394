#pragma once

#include <functional>
#include <ostream>

#include "mimseq/tensor.hpp"

namespace mimseq {

// Relative error between an analytic and a numeric derivative.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Elements checked per parameter; <= 0 checks every element. When sampling,
  // the subset is drawn deterministically from select_seed.
  long max_elems_per_param = 0;
  uint64_t select_seed = 0x9c0ffee;
};

struct ParamCheck {
  std::string name;
  long elements = 0;  // elements actually probed
  double max_rel_err = 0.0;
  long worst_element = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_err = 0.0;
  bool pass = true;

  void print(std::ostream& os) const {
    for (const auto& p : params) {
      os << (p.pass ? "  ok   " : "  FAIL ") << p.name << "  elems=" << p.elements
         << "  max_rel_err=" << p.max_rel_err;
      if (!p.pass)
        os << "  (elem " << p.worst_element << ": analytic=" << p.worst_analytic
           << " numeric=" << p.worst_numeric << ")";
      os << '\n';
    }
    os << (pass ? "gradcheck PASS" : "gradcheck FAIL")
       << "  max_rel_err=" << max_rel_err << '\n';
  }
};

// Central-difference check of reverse-mode gradients. `f` rebuilds the loss
// from the current parameter values on every call and must be deterministic
// (re-seed any internal randomness per call).
template <typename S, typename F>
GradCheckReport grad_check(F&& f, const std::vector<Parameter<S>*>& params,
                           const GradCheckOptions& opt = {}) {
  for (auto* p : params) p->zero_grad();
  Tensor<S> loss = f();
  loss.backward();
  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad());

  GradCheckReport report;
  const S h = S(opt.step);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<S>& param = *params[pi];
    ParamCheck pc;
    pc.name = param.name;
    const long n = param.numel();
    std::vector<long> elems;
    if (opt.max_elems_per_param > 0 && n > opt.max_elems_per_param) {
      // Deterministic sample without replacement.
      RngStream rng(opt.select_seed, pi);
      std::vector<long> all(size_t(n));
      for (long i = 0; i < n; ++i) all[size_t(i)] = i;
      for (long i = 0; i < opt.max_elems_per_param; ++i) {
        const long j = i + rng.uniform_int(n - i);
        std::swap(all[size_t(i)], all[size_t(j)]);
        elems.push_back(all[size_t(i)]);
      }
    } else {
      elems.resize(size_t(n));
      for (long i = 0; i < n; ++i) elems[size_t(i)] = i;
    }
    pc.elements = long(elems.size());
    for (long e : elems) {
      S& slot = param.value.values()[size_t(e)];
      const S saved = slot;
      double fplus, fminus;
      {
        NoGradGuard ng;
        slot = saved + h;
        fplus = double(f().item());
        slot = saved - h;
        fminus = double(f().item());
        slot = saved;
      }
      const double numeric = (fplus - fminus) / (2.0 * double(h));
      const double a = double(analytic[pi][size_t(e)]);
      const double err = relative_error(a, numeric);
      if (err > pc.max_rel_err) {
        pc.max_rel_err = err;
        pc.worst_element = e;
        pc.worst_analytic = a;
        pc.worst_numeric = numeric;
      }
    }
    pc.pass = pc.max_rel_err < opt.tolerance;
    report.max_rel_err = std::max(report.max_rel_err, pc.max_rel_err);
    report.pass = report.pass && pc.pass;
    report.params.push_back(std::move(pc));
  }
  return report;
}

}  // namespace mimseq
