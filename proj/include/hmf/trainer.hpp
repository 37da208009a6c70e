#pragma once

#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "calibration.hpp"
#include "partition.hpp"
#include "scheduler.hpp"
#include "workers.hpp"

namespace hmf {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class ScheduleMode { hsgd, hsgd_star, stream_only, batch_only };
enum class DivisionMode { uniform, nonuniform };

inline const char* to_string(ScheduleMode s) {
  switch (s) {
    case ScheduleMode::hsgd: return "hsgd";
    case ScheduleMode::hsgd_star: return "hsgd-star";
    case ScheduleMode::stream_only: return "stream-only";
    case ScheduleMode::batch_only: return "batch-only";
  }
  return "?";
}

inline const char* to_string(DivisionMode d) { return d == DivisionMode::uniform ? "uniform" : "nonuniform"; }

inline ScheduleMode parse_schedule(const std::string& s) {
  if (s == "hsgd") return ScheduleMode::hsgd;
  if (s == "hsgd-star") return ScheduleMode::hsgd_star;
  if (s == "stream-only") return ScheduleMode::stream_only;
  if (s == "batch-only") return ScheduleMode::batch_only;
  throw ConfigError("unknown schedule: " + s);
}

inline DivisionMode parse_division(const std::string& s) {
  if (s == "uniform") return DivisionMode::uniform;
  if (s == "nonuniform") return DivisionMode::nonuniform;
  throw ConfigError("unknown division: " + s);
}

struct RunConfig {
  std::string train_path;
  std::string test_path;
  std::string profile_path;
  std::string out_dir{"."};
  bool synthetic{false};
  SyntheticSpec synthetic_spec;
  Hyperparams hp;
  DeviceTopology topology{1, 0};
  BatchWorkerConfig batch;
  ScheduleMode schedule{ScheduleMode::stream_only};
  DivisionMode division{DivisionMode::uniform};
  std::optional<double> alpha;
  std::optional<double> target_rmse;
  std::uint64_t seed{1};
  bool trace{false};
  bool train_loss{false};

  // Worker counts actually spawned: single-class modes drop the other class.
  DeviceTopology effective_topology() const {
    switch (schedule) {
      case ScheduleMode::stream_only: return {topology.n_c, 0};
      case ScheduleMode::batch_only: return {0, topology.n_g};
      default: return topology;
    }
  }

  DivisionMode default_division() const {
    return schedule == ScheduleMode::hsgd_star ? DivisionMode::nonuniform : DivisionMode::uniform;
  }

  void validate() const {
    try {
      hp.validate();
      topology.validate();
      batch.validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (alpha && !(*alpha >= 0 && *alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
    if (target_rmse && !(*target_rmse > 0)) throw ConfigError("target RMSE must be positive");
    if (schedule == ScheduleMode::hsgd_star) {
      if (division != DivisionMode::nonuniform) throw ConfigError("hsgd-star needs nonuniform division");
      if (topology.n_c < 1 || topology.n_g < 1) throw ConfigError("hsgd-star needs at least one worker of each class");
    } else if (division != DivisionMode::uniform) {
      throw ConfigError(std::string(to_string(schedule)) + " needs uniform division");
    }
    if (schedule == ScheduleMode::stream_only && topology.n_c < 1) throw ConfigError("stream-only needs n_c >= 1");
    if (schedule == ScheduleMode::batch_only && topology.n_g < 1) throw ConfigError("batch-only needs n_g >= 1");
  }
};

struct EpochMetrics {
  int epoch{0};
  double wall_seconds{0};
  double train_seconds{0};  // wall time excluding evaluation
  double train_loss{NAN};
  double train_rmse{NAN};
  double test_rmse{NAN};
};

inline void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& metrics) {
  os << "epoch,wall_seconds,train_seconds,train_loss,train_rmse,test_rmse\n";
  auto field = [&](double v) {
    if (std::isfinite(v)) os << v;
  };
  for (const auto& m : metrics) {
    os << m.epoch << ',' << m.wall_seconds << ',' << m.train_seconds << ',';
    field(m.train_loss);
    os << ',';
    field(m.train_rmse);
    os << ',';
    field(m.test_rmse);
    os << '\n';
  }
}

struct TrainResult {
  FactorMatrices factors;
  std::vector<EpochMetrics> metrics;
  ImbalanceReport imbalance;
  DivisionPlan plan;
  GridGeometry geometry;
  std::vector<TraceRecord> trace;
  std::vector<WorkerStats> worker_stats;
  double alpha{0};
  bool target_reached{false};
  std::size_t test_skipped{0};

  int epochs_run() const { return static_cast<int>(metrics.size()); }
  double train_seconds() const { return metrics.empty() ? 0.0 : metrics.back().train_seconds; }
};

// Batch fraction for hsgd-star: the override if given, else the balanced
// solution of the profile clamped away from the degenerate ends.
inline double choose_alpha(const RunConfig& config, DeviceTopology topo, const CalibrationProfile* profile,
                           std::size_t nnz) {
  if (config.alpha) return *config.alpha;
  if (!profile) throw NotCalibrated("nonuniform division needs a calibration profile or an explicit alpha");
  const auto solved = solve_alpha(*profile, topo, static_cast<double>(nnz));
  return std::clamp(solved.alpha, 0.05, 0.95);
}

inline DivisionPlan make_plan(const RunConfig& config, const SparseMatrix& shuffled, const CalibrationProfile* profile) {
  const auto topo = config.effective_topology();
  DivisionPlan plan;
  if (config.division == DivisionMode::uniform) {
    plan = uniform_plan(topo);
  } else {
    plan = nonuniform_plan(topo, choose_alpha(config, topo, profile, shuffled.nnz()), shuffled);
  }
  const auto issues = validate_plan(plan, topo);
  if (!issues.empty()) {
    std::string msg = "invalid plan:";
    for (const auto& i : issues) msg += "\n  " + i;
    throw InvalidPlan(msg);
  }
  return plan;
}

// Trains until the epoch budget is spent or the target RMSE is met. The target
// is checked against test RMSE when a test set is given, else train RMSE.
inline TrainResult train(const RunConfig& config, const SparseMatrix& train_set, const SparseMatrix* test_set = nullptr,
                         const CalibrationProfile* profile = nullptr) {
  config.validate();
  train_set.validate();
  const auto topo = config.effective_topology();
  const auto& hp = config.hp;

  const auto shuffled = shuffle_triples(train_set, detail::mix_seed(config.seed, 1));
  TrainResult result;
  result.plan = make_plan(config, shuffled, profile);
  result.alpha = result.plan.alpha;
  result.geometry = materialize(result.plan, shuffled);
  const auto grid = build_grid(shuffled, result.geometry);
  result.factors = init_model(train_set.m, train_set.n, hp, detail::mix_seed(config.seed, 2));

  std::vector<WorkerClass> classes(static_cast<std::size_t>(topo.n_c), WorkerClass::stream);
  classes.insert(classes.end(), static_cast<std::size_t>(topo.n_g), WorkerClass::batch);
  SchedulerOptions options;
  options.policy = config.schedule == ScheduleMode::hsgd_star ? SchedulePolicy::hsgd_star : SchedulePolicy::hsgd;
  options.seed = detail::mix_seed(config.seed, 3);
  options.max_epochs = hp.epochs;
  options.harness_controlled = true;
  options.prefetch = config.schedule != ScheduleMode::hsgd;
  options.trace = config.trace;
  Scheduler scheduler(result.geometry, classes, options);

  std::mutex error_mutex;
  std::exception_ptr error;
  result.worker_stats.resize(classes.size());
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < classes.size(); ++w) {
    threads.emplace_back([&, w] {
      try {
        const int id = static_cast<int>(w);
        result.worker_stats[w] = classes[w] == WorkerClass::stream
                                     ? run_stream_worker({id}, scheduler, result.factors, grid, hp)
                                     : run_batch_worker(id, config.batch, scheduler, result.factors, grid, hp);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        scheduler.terminate();
      }
    });
  }

  const auto t_start = detail::clock::now();
  auto t_resume = t_start;
  double train_seconds = 0;
  for (int epoch = 1;; ++epoch) {
    const auto status = scheduler.wait_epoch();
    if (!status.epoch_complete) break;
    train_seconds += detail::seconds_since(t_resume);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_seconds = train_seconds;
    m.train_rmse = rmse(grid.triples(), result.factors).value;
    if (config.train_loss) m.train_loss = regularized_loss(grid.triples(), result.factors, hp.lambda_p, hp.lambda_q);
    if (test_set) {
      const auto r = rmse(*test_set, result.factors);
      m.test_rmse = r.value;
      result.test_skipped = r.skipped;
    }
    m.wall_seconds = detail::seconds_since(t_start);
    result.metrics.push_back(m);

    const double watched = test_set ? m.test_rmse : m.train_rmse;
    if (config.target_rmse && watched <= *config.target_rmse) {
      result.target_reached = true;
      scheduler.terminate();
      break;
    }
    if (epoch >= hp.epochs) {
      scheduler.terminate();
      break;
    }
    t_resume = detail::clock::now();
    scheduler.resume();
  }
  scheduler.terminate();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);

  result.imbalance = scheduler.imbalance_report();
  result.trace = scheduler.trace();
  return result;
}

}  // namespace hmf
