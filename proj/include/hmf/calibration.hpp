#pragma once

#include <span>
#include <string>
#include <vector>

#include "cost_model.hpp"
#include "workers.hpp"

namespace hmf {

// N nested prefixes of the (shuffled) triple sequence with sizes i/N * nnz.
inline std::vector<std::span<const RatingTriple>> make_prefixes(const SparseMatrix& matrix, int segments) {
  if (segments < 2) throw Error("calibration needs at least 2 segments");
  if (matrix.nnz() < static_cast<std::size_t>(segments)) throw Error("fewer ratings than calibration segments");
  std::vector<std::span<const RatingTriple>> out;
  for (int i = 1; i <= segments; ++i) {
    const auto size = matrix.nnz() * static_cast<std::size_t>(i) / static_cast<std::size_t>(segments);
    out.emplace_back(matrix.triples.data(), size);
  }
  return out;
}

struct MeasureResult {
  std::vector<CalibrationSample> total;
  // Batch class only.
  std::vector<CalibrationSample> stage_in;
  std::vector<CalibrationSample> compute;
  std::vector<CalibrationSample> stage_out;
};

// Mean elapsed time per prefix on throwaway factors.
inline MeasureResult measure_worker(WorkerClass cls, std::span<const std::span<const RatingTriple>> prefixes,
                                    int repeats, std::uint32_t m, std::uint32_t n, int k,
                                    const BatchWorkerConfig& config = {}, std::uint64_t seed = 1) {
  if (repeats < 3) throw Error("calibration needs at least 3 repeats");
  if (prefixes.empty()) throw Error("no calibration prefixes");
  const auto hp = detail::sweep_hyperparams(k);
  auto factors = init_model(m, n, hp, seed);
  std::optional<BatchEngine> engine;
  if (cls == WorkerClass::batch) engine.emplace(config, k);
  MeasureResult out;
  for (const auto& prefix : prefixes) {
    const auto s = detail::measure_once(cls, engine ? &*engine : nullptr, factors, prefix, hp, repeats, seed);
    if (!(s.seconds > 0)) throw Error("timer resolution too coarse for the smallest prefix; increase repeats");
    const auto size = static_cast<double>(s.size);
    out.total.push_back({size, s.seconds});
    if (cls == WorkerClass::batch) {
      out.stage_in.push_back({size, s.stage_in});
      out.compute.push_back({size, s.compute});
      out.stage_out.push_back({size, s.stage_out});
    }
  }
  return out;
}

struct CalibrateOptions {
  int segments{16};
  int repeats{5};
  std::uint64_t seed{1};
  CurveFamily transfer_family{CurveFamily::sqrt_log};
  CurveFamily kernel_family{CurveFamily::log};
};

struct CalibrationReport {
  CalibrationProfile profile;
  MeasureResult stream;
  MeasureResult batch;
  std::vector<std::string> warnings;
};

namespace detail {

// Larger prefixes should not run noticeably faster than the smallest one.
inline void check_monotone(const std::vector<CalibrationSample>& samples, const char* name,
                           std::vector<std::string>& warnings) {
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].elapsed < samples.front().elapsed * 0.95) {
      warnings.push_back(std::string(name) + ": prefix " + std::to_string(i) +
                         " ran faster than the smallest prefix beyond the noise band");
      return;
    }
  }
}

}  // namespace detail

// Measures both worker classes on prefixes of `matrix` and fits their cost models.
inline CalibrationReport calibrate(const SparseMatrix& matrix, DeviceTopology topology, const BatchWorkerConfig& config,
                                   int k, const CalibrateOptions& options = {}) {
  topology.validate();
  config.validate();
  const auto prefixes = make_prefixes(matrix, options.segments);
  CalibrationReport rep;
  rep.stream = measure_worker(WorkerClass::stream, prefixes, options.repeats, matrix.m, matrix.n, k, config, options.seed);
  rep.batch = measure_worker(WorkerClass::batch, prefixes, options.repeats, matrix.m, matrix.n, k, config, options.seed);
  detail::check_monotone(rep.stream.total, "stream", rep.warnings);
  detail::check_monotone(rep.batch.total, "batch", rep.warnings);

  auto& p = rep.profile;
  p.f_c = fit_linear_model(rep.stream.total);
  p.f_g_transfer_in = fit_piecewise(rep.batch.stage_in, options.transfer_family);
  p.f_g_transfer_out = fit_piecewise(rep.batch.stage_out, options.transfer_family);
  p.f_g_kernel = fit_piecewise(rep.batch.compute, options.kernel_family);
  p.fingerprint = {topology, config.inner_parallelism, config.launch_overhead, config.staging_bandwidth, k};
  return rep;
}

}  // namespace hmf
