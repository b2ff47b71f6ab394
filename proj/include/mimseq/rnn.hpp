#pragma once

#include <Eigen/QR>

#include "mimseq/tensor.hpp"

namespace mimseq {

// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
Tensor<S> init_fan_in(Shape shape, long fan_in, RngStream& rng) {
  const S bound = S(1.0 / std::sqrt(double(fan_in)));
  return Tensor<S>::uniform(std::move(shape), rng, -bound, bound);
}

// Square orthogonal matrix from the QR decomposition of a Gaussian draw,
// sign-corrected against the diagonal of R.
template <typename S>
std::vector<S> orthogonal_square(long n, RngStream& rng) {
  EigenRM<double> m(n, n);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) m(i, j) = rng.normal();
  Eigen::HouseholderQR<EigenRM<double>> qr(m);
  EigenRM<double> q = qr.householderQ() * EigenRM<double>::Identity(n, n);
  EigenRM<double> r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (long j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  std::vector<S> out(size_t(n * n));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < n; ++j) out[size_t(i * n + j)] = S(q(i, j));
  return out;
}

// Recurrent weight matrix (N, G*N): one orthogonal N x N block per gate.
template <typename S>
Tensor<S> init_recurrent(long n, long gates, RngStream& rng) {
  Tensor<S> t = Tensor<S>::zeros({n, gates * n});
  for (long g = 0; g < gates; ++g) {
    const auto block = orthogonal_square<S>(n, rng);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < n; ++j)
        t.values()[size_t(i * gates * n + g * n + j)] = block[size_t(i * n + j)];
  }
  return t;
}

// Gated recurrent cell. Gate order inside the packed matrices is z, r, n:
//   z = sigma(x Wx_z + h Wh_z + b_z)
//   r = sigma(x Wx_r + h Wh_r + b_r)
//   n = tanh(x Wx_n + r * (h Wh_n) + b_n)
//   h' = (1 - z) * n + z * h
template <typename S>
struct GruCell {
  Parameter<S> wx;  // (in, 3N)
  Parameter<S> wh;  // (N, 3N)
  Parameter<S> b;   // (3N)
  long in_dim = 0;
  long hidden = 0;

  GruCell() = default;
  GruCell(long in, long n, RngStream& rng, const std::string& prefix)
      : wx(init_fan_in<S>({in, 3 * n}, in, rng), prefix + ".wx"),
        wh(init_recurrent<S>(n, 3, rng), prefix + ".wh"),
        b(Tensor<S>::zeros({3 * n}), prefix + ".b"),
        in_dim(in),
        hidden(n) {}

  Tensor<S> step(const Tensor<S>& x, const Tensor<S>& h) const {
    const long n = hidden;
    Tensor<S> a = add_row_bias(matmul(x, wx.value), b.value);
    Tensor<S> u = matmul(h, wh.value);
    Tensor<S> z = sigmoid(add(slice(a, 1, 0, n), slice(u, 1, 0, n)));
    Tensor<S> r = sigmoid(add(slice(a, 1, n, 2 * n), slice(u, 1, n, 2 * n)));
    Tensor<S> cand = tanh(add(slice(a, 1, 2 * n, 3 * n), mul(r, slice(u, 1, 2 * n, 3 * n))));
    return add(mul(affine(z, S(-1), S(1)), cand), mul(z, h));
  }

  std::vector<Parameter<S>*> parameters() { return {&wx, &wh, &b}; }
};

// Long short-term memory cell. Gate order is i, f, g, o; the forget-gate
// bias starts at 1.
template <typename S>
struct LstmCell {
  Parameter<S> wx;  // (in, 4N)
  Parameter<S> wh;  // (N, 4N)
  Parameter<S> b;   // (4N)
  long in_dim = 0;
  long hidden = 0;

  LstmCell() = default;
  LstmCell(long in, long n, RngStream& rng, const std::string& prefix)
      : wx(init_fan_in<S>({in, 4 * n}, in, rng), prefix + ".wx"),
        wh(init_recurrent<S>(n, 4, rng), prefix + ".wh"),
        b(Tensor<S>::zeros({4 * n}), prefix + ".b"),
        in_dim(in),
        hidden(n) {
    for (long j = 0; j < n; ++j) b.value.values()[size_t(n + j)] = S(1);
  }

  struct State {
    Tensor<S> h;
    Tensor<S> c;
  };

  State step(const Tensor<S>& x, const State& s) const {
    const long n = hidden;
    Tensor<S> a = add(add_row_bias(matmul(x, wx.value), b.value), matmul(s.h, wh.value));
    Tensor<S> i = sigmoid(slice(a, 1, 0, n));
    Tensor<S> f = sigmoid(slice(a, 1, n, 2 * n));
    Tensor<S> g = tanh(slice(a, 1, 2 * n, 3 * n));
    Tensor<S> o = sigmoid(slice(a, 1, 3 * n, 4 * n));
    Tensor<S> c = add(mul(f, s.c), mul(i, g));
    return {mul(o, tanh(c)), c};
  }

  std::vector<Parameter<S>*> parameters() { return {&wx, &wh, &b}; }
};

// Runs a GRU over a time-major sequence (T, B, in) and returns (T, B, N).
template <typename S>
Tensor<S> gru_run(const GruCell<S>& cell, const Tensor<S>& seq) {
  const long t = seq.extent(0), b = seq.extent(1), in = seq.extent(2);
  if (in != cell.in_dim)
    throw ShapeError("gru_run: input width " + std::to_string(in) + " != cell input " +
                     std::to_string(cell.in_dim));
  Tensor<S> h = Tensor<S>::zeros({b, cell.hidden});
  std::vector<Tensor<S>> steps;
  steps.reserve(size_t(t));
  for (long ti = 0; ti < t; ++ti) {
    Tensor<S> x = reshape(slice(seq, 0, ti, ti + 1), {b, in});
    h = cell.step(x, h);
    steps.push_back(reshape(h, {1, b, cell.hidden}));
  }
  return concat(steps, 0);
}

// Bidirectional GRU layer; output is (T, B, 2N) with the forward direction in
// the first N channels and the time-reversed backward direction in the rest.
template <typename S>
struct BiGruLayer {
  GruCell<S> fwd;
  GruCell<S> bwd;

  BiGruLayer() = default;
  BiGruLayer(long in, long n, RngStream& rng, const std::string& prefix)
      : fwd(in, n, rng, prefix + ".fwd"), bwd(in, n, rng, prefix + ".bwd") {}

  Tensor<S> forward(const Tensor<S>& seq) const {
    Tensor<S> f = gru_run(fwd, seq);
    Tensor<S> r = reverse(gru_run(bwd, reverse(seq, 0)), 0);
    return concat<S>({f, r}, 2);
  }

  std::vector<Parameter<S>*> parameters() {
    std::vector<Parameter<S>*> out = fwd.parameters();
    for (auto* p : bwd.parameters()) out.push_back(p);
    return out;
  }
};

// Runs an LSTM over a time-major sequence (T, B, in), returning hidden states
// (T, B, N).
template <typename S>
Tensor<S> lstm_run(const LstmCell<S>& cell, const Tensor<S>& seq) {
  const long t = seq.extent(0), b = seq.extent(1), in = seq.extent(2);
  if (in != cell.in_dim)
    throw ShapeError("lstm_run: input width " + std::to_string(in) +
                     " != cell input " + std::to_string(cell.in_dim));
  typename LstmCell<S>::State s{Tensor<S>::zeros({b, cell.hidden}),
                                Tensor<S>::zeros({b, cell.hidden})};
  std::vector<Tensor<S>> steps;
  steps.reserve(size_t(t));
  for (long ti = 0; ti < t; ++ti) {
    Tensor<S> x = reshape(slice(seq, 0, ti, ti + 1), {b, in});
    s = cell.step(x, s);
    steps.push_back(reshape(s.h, {1, b, cell.hidden}));
  }
  return concat(steps, 0);
}

}  // namespace mimseq
