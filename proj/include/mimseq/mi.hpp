#pragma once

#include <cmath>
#include <vector>

#include "mimseq/common.hpp"
#include "mimseq/rng.hpp"

namespace mimseq {
namespace mi {

// phi(k) = log(1 + e^k), overflow-safe.
inline double softplus_phi(double k) {
  return std::max(k, 0.0) + std::log1p(std::exp(-std::abs(k)));
}

// Raw discriminator scores on joint samples (paired) and on
// product-of-marginals samples (unpaired).
struct DiscriminatorScores {
  std::vector<double> paired;
  std::vector<double> unpaired;
};

// Dependence objective over raw scores:
//   mean over paired of -phi(-t)  -  mean over unpaired of phi(t).
// Identical to mean log sigma(t_paired) + mean log(1 - sigma(t_unpaired)),
// i.e. the negative binary cross-entropy of the scores; never positive.
inline double jsd_objective(const DiscriminatorScores& scores) {
  if (scores.paired.empty() || scores.unpaired.empty())
    throw DataError("jsd_objective: paired and unpaired score vectors must be non-empty");
  double pos = 0.0;
  for (double t : scores.paired) pos -= softplus_phi(-t);
  double neg = 0.0;
  for (double t : scores.unpaired) neg += softplus_phi(t);
  return pos / double(scores.paired.size()) - neg / double(scores.unpaired.size());
}

// Cyclic unpaired-sample index map for an in-batch shuffle: every position i
// is mapped to (i + k) mod B with one uniformly drawn offset k in [1, B-1],
// so no sample keeps its own partner.
inline std::vector<long> unpaired_indices(long batch, RngStream& rng) {
  if (batch < 2)
    throw DataError("unpaired sampling needs batch size >= 2, got " +
                    std::to_string(batch));
  const long k = 1 + rng.uniform_int(batch - 1);
  std::vector<long> idx(size_t(batch));
  for (long i = 0; i < batch; ++i) idx[size_t(i)] = (i + k) % batch;
  return idx;
}

// Convenience over (feature, label) pairs: features keep their position,
// labels are cyclically shifted.
template <typename F, typename L>
std::vector<std::pair<F, L>> sample_unpaired(const std::vector<std::pair<F, L>>& batch,
                                             RngStream& rng) {
  const auto idx = unpaired_indices(long(batch.size()), rng);
  std::vector<std::pair<F, L>> out;
  out.reserve(batch.size());
  for (size_t i = 0; i < batch.size(); ++i)
    out.emplace_back(batch[i].first, batch[size_t(idx[i])].second);
  return out;
}

// Finite joint distribution over an M x K alphabet, row-major probabilities.
struct DiscreteJoint {
  long rows = 0;
  long cols = 0;
  std::vector<double> p;  // rows * cols entries

  double at(long m, long k) const { return p[size_t(m * cols + k)]; }

  void validate() const {
    if (rows < 1 || cols < 1 || long(p.size()) != rows * cols)
      throw DataError("discrete joint: bad table extents");
    double sum = 0.0;
    for (double v : p) {
      if (v < 0.0) throw DataError("discrete joint: negative probability");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw DataError("discrete joint: probabilities sum to " + std::to_string(sum));
  }

  std::vector<double> row_marginal() const {
    std::vector<double> out(size_t(rows), 0.0);
    for (long m = 0; m < rows; ++m)
      for (long k = 0; k < cols; ++k) out[size_t(m)] += at(m, k);
    return out;
  }

  std::vector<double> col_marginal() const {
    std::vector<double> out(size_t(cols), 0.0);
    for (long m = 0; m < rows; ++m)
      for (long k = 0; k < cols; ++k) out[size_t(k)] += at(m, k);
    return out;
  }
};

// Exact expectation of the dependence objective for a given raw-score table.
inline double tabular_objective(const DiscreteJoint& joint,
                                const std::vector<double>& scores) {
  const auto pa = joint.row_marginal();
  const auto pb = joint.col_marginal();
  double value = 0.0;
  for (long m = 0; m < joint.rows; ++m)
    for (long k = 0; k < joint.cols; ++k) {
      const double t = scores[size_t(m * joint.cols + k)];
      value += joint.at(m, k) * (-softplus_phi(-t));
      value -= pa[size_t(m)] * pb[size_t(k)] * softplus_phi(t);
    }
  return value;
}

// Supremum of the objective over all discriminators, evaluated in closed form
// at D*(a,b) = p(a,b) / (p(a,b) + p(a)p(b)) by full enumeration. Equals
// 2 * JSD(joint, product of marginals) - 2 log 2.
inline double optimal_discrete_estimate(const DiscreteJoint& joint) {
  joint.validate();
  const auto pa = joint.row_marginal();
  const auto pb = joint.col_marginal();
  double value = 0.0;
  for (long m = 0; m < joint.rows; ++m)
    for (long k = 0; k < joint.cols; ++k) {
      const double p = joint.at(m, k);
      const double q = pa[size_t(m)] * pb[size_t(k)];
      if (p + q == 0.0) continue;
      const double d = p / (p + q);
      if (p > 0.0) value += p * std::log(d);
      if (q > 0.0 && d < 1.0) value += q * std::log(1.0 - d);
    }
  return value;
}

struct TabularFit {
  std::vector<double> scores;  // raw score per cell
  double objective = 0.0;
};

// Gradient ascent on the exact-expectation objective over a raw-score table.
// dJ/dt = p * sigma(-t) - p(a)p(b) * sigma(t); scores are kept in a bounded
// range since zero-probability cells otherwise drift toward -inf.
inline TabularFit fit_tabular_discriminator(const DiscreteJoint& joint, long steps,
                                            double lr) {
  joint.validate();
  const auto pa = joint.row_marginal();
  const auto pb = joint.col_marginal();
  auto sigma = [](double t) {
    return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  };
  TabularFit fit;
  fit.scores.assign(size_t(joint.rows * joint.cols), 0.0);
  for (long it = 0; it < steps; ++it) {
    for (long m = 0; m < joint.rows; ++m)
      for (long k = 0; k < joint.cols; ++k) {
        double& t = fit.scores[size_t(m * joint.cols + k)];
        const double g =
            joint.at(m, k) * sigma(-t) - pa[size_t(m)] * pb[size_t(k)] * sigma(t);
        t += lr * g;
        t = std::min(30.0, std::max(-30.0, t));
      }
  }
  fit.objective = tabular_objective(joint, fit.scores);
  return fit;
}

}  // namespace mi
}  // namespace mimseq
