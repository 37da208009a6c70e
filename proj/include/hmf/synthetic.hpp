#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <unordered_set>
#include <vector>

#include "data.hpp"

namespace hmf {

// Low-rank ratings R = P* Q* + N(0, noise^2) sampled at a uniform density.
struct SyntheticSpec {
  std::uint32_t m{500};
  std::uint32_t n{500};
  int rank{8};
  double density{0.05};
  double noise{0.1};
  // Fraction of sampled entries moved to the held-out set.
  double test_fraction{0.0};
  std::uint64_t seed{1};
};

struct SyntheticData {
  SparseMatrix train;
  SparseMatrix test;
  // Ground-truth factors, row-major m x rank and n x rank.
  std::vector<Real> p_true;
  std::vector<Real> q_true;
};

inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.rank < 1 || spec.density <= 0.0 || spec.density > 1.0 || spec.noise < 0.0) {
    throw Error("invalid synthetic data parameters");
  }
  SyntheticData data;
  std::mt19937_64 rng(spec.seed);
  const auto k = static_cast<std::size_t>(spec.rank);
  // Planted factors follow the init_model law, uniform on [0, 1/sqrt(rank)].
  std::uniform_real_distribution<Real> factor(0.0, 1.0 / std::sqrt(static_cast<Real>(spec.rank)));
  data.p_true.resize(spec.m * k);
  data.q_true.resize(spec.n * k);
  for (auto& x : data.p_true) x = factor(rng);
  for (auto& x : data.q_true) x = factor(rng);

  const auto cells = static_cast<std::uint64_t>(spec.m) * spec.n;
  const auto target = static_cast<std::uint64_t>(std::llround(spec.density * static_cast<double>(cells)));
  std::unordered_set<std::uint64_t> picked;
  picked.reserve(target * 2);
  std::uniform_int_distribution<std::uint64_t> cell(0, cells == 0 ? 0 : cells - 1);
  std::normal_distribution<Real> noise(0.0, spec.noise);
  std::bernoulli_distribution held_out(spec.test_fraction);

  for (auto* mx : {&data.train, &data.test}) {
    mx->m = spec.m;
    mx->n = spec.n;
  }
  while (cells > 0 && picked.size() < target) {
    auto c = cell(rng);
    if (!picked.insert(c).second) {
      continue;
    }
    auto u = static_cast<std::uint32_t>(c / spec.n);
    auto v = static_cast<std::uint32_t>(c % spec.n);
    Real dot = 0.0;
    for (std::size_t f = 0; f < k; ++f) {
      dot += data.p_true[u * k + f] * data.q_true[v * k + f];
    }
    auto r = static_cast<float>(dot + (spec.noise > 0.0 ? noise(rng) : 0.0));
    auto& dest = (spec.test_fraction > 0.0 && held_out(rng)) ? data.test : data.train;
    dest.triples.push_back({u, v, r});
  }
  return data;
}

// Uniformly random ratings over an m x n index space, for throughput sweeps.
inline SparseMatrix make_random_triples(std::uint32_t m, std::uint32_t n, std::size_t count, std::uint64_t seed) {
  SparseMatrix matrix;
  matrix.m = m;
  matrix.n = n;
  matrix.triples.resize(count);
  std::mt19937_64 rng(seed);
  for (auto& t : matrix.triples) {
    auto bits = rng();
    t.u = static_cast<std::uint32_t>((bits & 0xffffffffULL) % m);
    t.v = static_cast<std::uint32_t>((bits >> 32) % n);
    t.r = static_cast<float>(1.0 + 4.0 * std::generate_canonical<double, 32>(rng));
  }
  return matrix;
}

}  // namespace hmf
