#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"

namespace hmf {

struct Hyperparams {
  int k{8};
  Real lambda_p{0.05};
  Real lambda_q{0.05};
  Real gamma{0.005};
  int epochs{20};

  void validate() const {
    if (k < 1) throw Error("k must be at least 1");
    if (lambda_p < 0 || lambda_q < 0) throw Error("regularization must be non-negative");
    if (!(gamma > 0)) throw Error("learning rate must be positive");
    if (epochs < 1) throw Error("epoch count must be at least 1");
  }
};

// P is m x k with p_u contiguous. Q is logically k x n but stored item-major so
// that q_v is contiguous as well.
class FactorMatrices {
 public:
  FactorMatrices() = default;
  FactorMatrices(std::uint32_t m, std::uint32_t n, int k)
      : _m{m}, _n{n}, _k{k}, _p(static_cast<std::size_t>(m) * k), _q(static_cast<std::size_t>(n) * k) {
    if (k < 1) throw Error("k must be at least 1");
  }

  std::uint32_t m() const noexcept { return _m; }
  std::uint32_t n() const noexcept { return _n; }
  int k() const noexcept { return _k; }

  std::span<Real> p(std::uint32_t u) { return {_p.data() + static_cast<std::size_t>(u) * _k, static_cast<std::size_t>(_k)}; }
  std::span<const Real> p(std::uint32_t u) const {
    return {_p.data() + static_cast<std::size_t>(u) * _k, static_cast<std::size_t>(_k)};
  }
  std::span<Real> q(std::uint32_t v) { return {_q.data() + static_cast<std::size_t>(v) * _k, static_cast<std::size_t>(_k)}; }
  std::span<const Real> q(std::uint32_t v) const {
    return {_q.data() + static_cast<std::size_t>(v) * _k, static_cast<std::size_t>(_k)};
  }

  std::vector<Real>& p_data() noexcept { return _p; }
  const std::vector<Real>& p_data() const noexcept { return _p; }
  std::vector<Real>& q_data() noexcept { return _q; }
  const std::vector<Real>& q_data() const noexcept { return _q; }

  bool all_finite() const {
    auto finite = [](Real x) { return std::isfinite(x); };
    return std::all_of(_p.begin(), _p.end(), finite) && std::all_of(_q.begin(), _q.end(), finite);
  }

  friend bool operator==(const FactorMatrices&, const FactorMatrices&) = default;

 private:
  std::uint32_t _m{0};
  std::uint32_t _n{0};
  int _k{1};
  std::vector<Real> _p;
  std::vector<Real> _q;
};

struct UpdateTrace {
  Real e{0};
  Real delta_p_norm{0};
  Real delta_q_norm{0};
};

// Entries uniform on [0, 1/sqrt(k)].
inline FactorMatrices init_model(std::uint32_t m, std::uint32_t n, const Hyperparams& hp, std::uint64_t seed) {
  if (hp.k < 1) throw Error("k must be at least 1");
  FactorMatrices f(m, n, hp.k);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> dist(0.0, 1.0 / std::sqrt(static_cast<Real>(hp.k)));
  for (auto& x : f.p_data()) x = dist(rng);
  for (auto& x : f.q_data()) x = dist(rng);
  return f;
}

inline Real predict(std::span<const Real> p, std::span<const Real> q) {
  if (p.size() != q.size()) throw Error("factor length mismatch");
  Real dot = 0.0;
  for (std::size_t f = 0; f < p.size(); ++f) dot += p[f] * q[f];
  return dot;
}

namespace detail {

struct PlainAccess {
  static Real load(const Real& x) noexcept { return x; }
  static void store(Real& x, Real v) noexcept { x = v; }
};

// Component-wise relaxed atomics: concurrent lanes may interleave updates to
// one vector, but each component read or write is whole.
struct RelaxedAccess {
  static Real load(const Real& x) noexcept {
    return std::atomic_ref<Real>(const_cast<Real&>(x)).load(std::memory_order_relaxed);
  }
  static void store(Real& x, Real v) noexcept { std::atomic_ref<Real>(x).store(v, std::memory_order_relaxed); }
};

// One SGD step; both gradients use the pre-update vectors. Returns the residual.
template <typename Access>
inline Real apply_update(Real* p, Real* q, std::size_t k, Real r, Real gamma, Real lambda_p, Real lambda_q) noexcept {
  Real dot = 0.0;
  for (std::size_t f = 0; f < k; ++f) dot += Access::load(p[f]) * Access::load(q[f]);
  const Real e = r - dot;
  for (std::size_t f = 0; f < k; ++f) {
    const Real pf = Access::load(p[f]);
    const Real qf = Access::load(q[f]);
    Access::store(p[f], pf + gamma * (e * qf - lambda_p * pf));
    Access::store(q[f], qf + gamma * (e * pf - lambda_q * qf));
  }
  return e;
}

inline constexpr std::size_t visit_chunk = 64;

}  // namespace detail

inline UpdateTrace sgd_update(FactorMatrices& factors, const RatingTriple& t, const Hyperparams& hp) {
  if (t.u >= factors.m() || t.v >= factors.n()) throw Error("triple index out of range");
  auto p = factors.p(t.u);
  auto q = factors.q(t.v);
  std::vector<Real> p_old(p.begin(), p.end());
  std::vector<Real> q_old(q.begin(), q.end());
  UpdateTrace trace;
  trace.e = detail::apply_update<detail::PlainAccess>(p.data(), q.data(), p.size(), t.r, hp.gamma, hp.lambda_p,
                                                      hp.lambda_q);
  for (std::size_t f = 0; f < p.size(); ++f) {
    trace.delta_p_norm += (p[f] - p_old[f]) * (p[f] - p_old[f]);
    trace.delta_q_norm += (q[f] - q_old[f]) * (q[f] - q_old[f]);
  }
  trace.delta_p_norm = std::sqrt(trace.delta_p_norm);
  trace.delta_q_norm = std::sqrt(trace.delta_q_norm);
  return trace;
}

// Per-epoch visit order over `count` triples: fixed-size chunks of the stored
// (already shuffled) sequence, visited in a seed-determined permutation.
// Returns chunk start offsets.
inline std::vector<std::size_t> visit_order(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> chunks((count + detail::visit_chunk - 1) / detail::visit_chunk);
  for (std::size_t i = 0; i < chunks.size(); ++i) chunks[i] = i * detail::visit_chunk;
  std::mt19937_64 rng(seed);
  std::shuffle(chunks.begin(), chunks.end(), rng);
  return chunks;
}

template <typename Fn>
inline void for_each_in_visit_order(std::size_t count, std::uint64_t seed, Fn&& fn) {
  for (auto start : visit_order(count, seed)) {
    auto stop = std::min(count, start + detail::visit_chunk);
    for (auto i = start; i < stop; ++i) fn(i);
  }
}

// Applies every triple once in the seeded visit order.
inline std::size_t epoch_over(FactorMatrices& factors, std::span<const RatingTriple> triples, const Hyperparams& hp,
                              std::uint64_t order_seed) {
  const auto k = static_cast<std::size_t>(factors.k());
  for_each_in_visit_order(triples.size(), order_seed, [&](std::size_t i) {
    const auto& t = triples[i];
    detail::apply_update<detail::PlainAccess>(factors.p(t.u).data(), factors.q(t.v).data(), k, t.r, hp.gamma,
                                              hp.lambda_p, hp.lambda_q);
  });
  return triples.size();
}

// Caller must hold an exclusive lease on `block`.
inline std::size_t block_epoch(FactorMatrices& factors, const BlockGrid& grid, const BlockId& block,
                               const Hyperparams& hp, std::uint64_t order_seed) {
  return epoch_over(factors, grid.block_triples(block), hp, order_seed);
}

// Sum over observed entries of squared error plus both regularizers.
inline Real regularized_loss(std::span<const RatingTriple> triples, const FactorMatrices& factors, Real lambda_p,
                             Real lambda_q) {
  Real loss = 0.0;
  for (const auto& t : triples) {
    auto p = factors.p(t.u);
    auto q = factors.q(t.v);
    Real e = t.r - predict(p, q);
    Real pp = 0.0;
    Real qq = 0.0;
    for (std::size_t f = 0; f < p.size(); ++f) {
      pp += p[f] * p[f];
      qq += q[f] * q[f];
    }
    loss += e * e + lambda_p * pp + lambda_q * qq;
  }
  return loss;
}

inline Real regularized_loss(const SparseMatrix& matrix, const FactorMatrices& factors, Real lambda_p, Real lambda_q) {
  if (matrix.m != factors.m() || matrix.n != factors.n()) throw Error("matrix and factor dimensions differ");
  return regularized_loss(matrix.triples, factors, lambda_p, lambda_q);
}

struct RmseResult {
  Real value{0};
  std::size_t evaluated{0};
  std::size_t skipped{0};
};

// Entries outside the factor index space are skipped and counted, together
// with any entries already dropped at load time.
inline RmseResult rmse(std::span<const RatingTriple> triples, const FactorMatrices& factors, std::size_t pre_skipped = 0) {
  RmseResult out;
  out.skipped = pre_skipped;
  Real sum = 0.0;
  for (const auto& t : triples) {
    if (t.u >= factors.m() || t.v >= factors.n()) {
      ++out.skipped;
      continue;
    }
    Real e = t.r - predict(factors.p(t.u), factors.q(t.v));
    sum += e * e;
    ++out.evaluated;
  }
  if (out.evaluated == 0) throw Error("no ratings to evaluate");
  out.value = std::sqrt(sum / static_cast<Real>(out.evaluated));
  return out;
}

inline RmseResult rmse(const SparseMatrix& testset, const FactorMatrices& factors) {
  return rmse(testset.triples, factors, testset.unresolved);
}

// ----------------------------------------------------------------------------
// Factors file: "HMFP1", u64 m, n, k, then P row-major (m x k) and Q row-major
// (k x n), all little-endian f64.

inline constexpr char factors_magic[5] = {'H', 'M', 'F', 'P', '1'};

inline void save_factors(const std::string& path, const FactorMatrices& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write factors: " + path);
  os.write(factors_magic, 5);
  detail::write_le<std::uint64_t>(os, f.m());
  detail::write_le<std::uint64_t>(os, f.n());
  detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(f.k()));
  for (auto x : f.p_data()) detail::write_le(os, x);
  for (int r = 0; r < f.k(); ++r) {
    for (std::uint32_t v = 0; v < f.n(); ++v) detail::write_le(os, f.q(v)[r]);
  }
  if (!os) throw Error("write failed: " + path);
}

inline FactorMatrices load_factors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open factors: " + path);
  char magic[5];
  if (!is.read(magic, 5) || !std::equal(magic, magic + 5, factors_magic)) {
    throw Error("not an HMFP1 factors file: " + path);
  }
  auto m = detail::read_le<std::uint64_t>(is);
  auto n = detail::read_le<std::uint64_t>(is);
  auto k = detail::read_le<std::uint64_t>(is);
  if (m > UINT32_MAX || n > UINT32_MAX || k < 1 || k > 1u << 20) throw Error("bad factors header: " + path);
  FactorMatrices f(static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(n), static_cast<int>(k));
  for (auto& x : f.p_data()) x = detail::read_le<Real>(is);
  for (std::uint64_t r = 0; r < k; ++r) {
    for (std::uint32_t v = 0; v < n; ++v) f.q(v)[r] = detail::read_le<Real>(is);
  }
  return f;
}

}  // namespace hmf
