#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <future>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "scheduler.hpp"
#include "sgd.hpp"
#include "synthetic.hpp"

namespace hmf {

struct StreamWorkerConfig {
  int id{0};
};

// Batch worker emulation: inner compute lanes, a per-block launch overhead
// and a staged copy at a fixed bandwidth.
struct BatchWorkerConfig {
  int inner_parallelism{8};
  double launch_overhead{0.0};     // seconds
  double staging_bandwidth{12e9};  // bytes per second
  static constexpr int pipeline_depth = 3;

  void validate() const {
    if (inner_parallelism < 1) throw Error("inner_parallelism must be at least 1");
    if (!(launch_overhead >= 0)) throw Error("launch_overhead must be non-negative");
    if (!(staging_bandwidth > 0)) throw Error("staging_bandwidth must be positive");
  }
};

struct WorkerStats {
  std::size_t blocks{0};
  std::size_t triples{0};
  double stage_in_seconds{0};
  double compute_seconds{0};
  double stage_out_seconds{0};
};

namespace detail {

using clock = std::chrono::steady_clock;

inline double seconds_since(clock::time_point t0) {
  return std::chrono::duration<double>(clock::now() - t0).count();
}

inline void hold_until(clock::time_point t0, double seconds) {
  if (seconds <= 0) return;
  std::this_thread::sleep_until(t0 + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(seconds)));
}

}  // namespace detail

// Fixed set of compute lanes. The calling thread acts as lane 0.
class LanePool {
 public:
  explicit LanePool(int lanes) : _lanes{lanes} {
    if (lanes < 1) throw Error("lane count must be at least 1");
    for (int i = 1; i < lanes; ++i) _threads.emplace_back([this, i] { loop(i); });
  }

  ~LanePool() {
    {
      std::lock_guard lock(_mutex);
      _stop = true;
    }
    _start.notify_all();
    for (auto& t : _threads) t.join();
  }

  LanePool(const LanePool&) = delete;
  LanePool& operator=(const LanePool&) = delete;

  int lanes() const noexcept { return _lanes; }

  void run(const std::function<void(int)>& fn) {
    if (_lanes == 1) {
      fn(0);
      return;
    }
    {
      std::lock_guard lock(_mutex);
      _task = &fn;
      _pending = _lanes - 1;
      ++_generation;
    }
    _start.notify_all();
    fn(0);
    std::unique_lock lock(_mutex);
    _done.wait(lock, [&] { return _pending == 0; });
    _task = nullptr;
  }

 private:
  void loop(int lane) {
    std::uint64_t seen = 0;
    while (true) {
      const std::function<void(int)>* task;
      {
        std::unique_lock lock(_mutex);
        _start.wait(lock, [&] { return _stop || _generation != seen; });
        if (_stop) return;
        seen = _generation;
        task = _task;
      }
      (*task)(lane);
      std::lock_guard lock(_mutex);
      if (--_pending == 0) _done.notify_one();
    }
  }

  int _lanes;
  std::vector<std::thread> _threads;
  std::mutex _mutex;
  std::condition_variable _start;
  std::condition_variable _done;
  const std::function<void(int)>* _task{nullptr};
  int _pending{0};
  std::uint64_t _generation{0};
  bool _stop{false};
};

// Private copy of one block: its triples in visit order plus the P rows and Q
// columns of its bands.
struct StagingBuffer {
  BlockId block;
  std::uint32_t row_first{0};
  std::uint32_t row_last{0};
  std::uint32_t col_first{0};
  std::uint32_t col_last{0};
  std::vector<RatingTriple> triples;
  std::vector<Real> p;
  std::vector<Real> q;
  bool p_loaded{false};
};

enum class Stage : std::uint8_t { stage_in, load_p, compute, stage_out };

struct StageEvent {
  Stage stage;
  int buffer;
  BlockId block;
  double begin;
  double end;
};

struct StageTimes {
  double stage_in{0};
  double compute{0};
  double stage_out{0};

  double total() const { return stage_in + compute + stage_out; }
};

class BatchEngine {
 public:
  BatchEngine(BatchWorkerConfig config, int k) : _config{config}, _k{static_cast<std::size_t>(k)}, _lanes{config.inner_parallelism} {
    _config.validate();
  }

  const BatchWorkerConfig& config() const noexcept { return _config; }

  void enable_log() { _logging = true; }

  std::vector<StageEvent> log() const {
    std::lock_guard lock(_log_mutex);
    return _log;
  }

  // Copies `triples` in the order given by `order_seed`, the Q columns and,
  // with `with_p`, the P rows. Takes at least max(launch overhead, bytes / bandwidth).
  double stage_in(StagingBuffer& buf, const FactorMatrices& f, std::span<const RatingTriple> triples,
                  std::pair<std::uint32_t, std::uint32_t> rows, std::pair<std::uint32_t, std::uint32_t> cols,
                  std::uint64_t order_seed, bool with_p, int buffer_id = 0, BlockId block = {}) {
    const auto t0 = detail::clock::now();
    buf.block = block;
    buf.row_first = rows.first;
    buf.row_last = rows.second;
    buf.col_first = cols.first;
    buf.col_last = cols.second;
    buf.triples.clear();
    buf.triples.reserve(triples.size());
    for_each_in_visit_order(triples.size(), order_seed, [&](std::size_t i) { buf.triples.push_back(triples[i]); });
    const auto& qd = f.q_data();
    buf.q.assign(qd.begin() + static_cast<std::ptrdiff_t>(cols.first * _k),
                 qd.begin() + static_cast<std::ptrdiff_t>(cols.second * _k));
    std::size_t bytes = triples.size() * sizeof(RatingTriple) + buf.q.size() * sizeof(Real);
    buf.p_loaded = false;
    if (with_p) {
      copy_p(buf, f);
      bytes += buf.p.size() * sizeof(Real);
    }
    detail::hold_until(t0, std::max(_config.launch_overhead, static_cast<double>(bytes) / _config.staging_bandwidth));
    return finish(Stage::stage_in, buffer_id, block, t0);
  }

  double stage_in(StagingBuffer& buf, const FactorMatrices& f, const BlockGrid& grid, const Grant& g, bool with_p,
                  int buffer_id = 0) {
    return stage_in(buf, f, grid.block_triples(g.block), grid.row_span(g.block), grid.col_span(g.block), g.order_seed,
                    with_p, buffer_id, g.block);
  }

  // P rows of a prefetched block, loaded once the previous block on the same
  // rows has been staged out.
  double load_p(StagingBuffer& buf, const FactorMatrices& f, int buffer_id = 0) {
    const auto t0 = detail::clock::now();
    copy_p(buf, f);
    detail::hold_until(t0, static_cast<double>(buf.p.size() * sizeof(Real)) / _config.staging_bandwidth);
    return finish(Stage::load_p, buffer_id, buf.block, t0);
  }

  // Lanes take contiguous chunks of the staged order and update the buffer
  // without locks.
  double compute(StagingBuffer& buf, const Hyperparams& hp, int buffer_id = 0) {
    if (!buf.p_loaded) throw Error("compute before P rows are staged");
    const auto t0 = detail::clock::now();
    const std::size_t count = buf.triples.size();
    const int lanes = _lanes.lanes();
    auto body = [&](int lane) {
      const std::size_t first = count * static_cast<std::size_t>(lane) / static_cast<std::size_t>(lanes);
      const std::size_t last = count * static_cast<std::size_t>(lane + 1) / static_cast<std::size_t>(lanes);
      for (std::size_t i = first; i < last; ++i) {
        const auto& t = buf.triples[i];
        Real* p = buf.p.data() + (t.u - buf.row_first) * _k;
        Real* q = buf.q.data() + (t.v - buf.col_first) * _k;
        if (lanes == 1) {
          detail::apply_update<detail::PlainAccess>(p, q, _k, t.r, hp.gamma, hp.lambda_p, hp.lambda_q);
        } else {
          detail::apply_update<detail::RelaxedAccess>(p, q, _k, t.r, hp.gamma, hp.lambda_p, hp.lambda_q);
        }
      }
    };
    _lanes.run(body);
    return finish(Stage::compute, buffer_id, buf.block, t0);
  }

  double stage_out(const StagingBuffer& buf, FactorMatrices& f, int buffer_id = 0) {
    const auto t0 = detail::clock::now();
    std::copy(buf.p.begin(), buf.p.end(), f.p_data().begin() + static_cast<std::ptrdiff_t>(buf.row_first * _k));
    std::copy(buf.q.begin(), buf.q.end(), f.q_data().begin() + static_cast<std::ptrdiff_t>(buf.col_first * _k));
    const auto bytes = (buf.p.size() + buf.q.size()) * sizeof(Real);
    detail::hold_until(t0, static_cast<double>(bytes) / _config.staging_bandwidth);
    return finish(Stage::stage_out, buffer_id, buf.block, t0);
  }

  // One block through all three stages, without overlap.
  StageTimes process(StagingBuffer& buf, FactorMatrices& f, const BlockGrid& grid, const Grant& g,
                     const Hyperparams& hp) {
    StageTimes t;
    t.stage_in = stage_in(buf, f, grid, g, true);
    t.compute = compute(buf, hp);
    t.stage_out = stage_out(buf, f);
    return t;
  }

 private:
  void copy_p(StagingBuffer& buf, const FactorMatrices& f) {
    const auto& pd = f.p_data();
    buf.p.assign(pd.begin() + static_cast<std::ptrdiff_t>(buf.row_first * _k),
                 pd.begin() + static_cast<std::ptrdiff_t>(buf.row_last * _k));
    buf.p_loaded = true;
  }

  double finish(Stage stage, int buffer_id, const BlockId& block, detail::clock::time_point t0) {
    const auto t1 = detail::clock::now();
    if (_logging) {
      const auto rel = [&](detail::clock::time_point t) { return std::chrono::duration<double>(t - _epoch).count(); };
      std::lock_guard lock(_log_mutex);
      _log.push_back({stage, buffer_id, block, rel(t0), rel(t1)});
    }
    return std::chrono::duration<double>(t1 - t0).count();
  }

  BatchWorkerConfig _config;
  std::size_t _k;
  LanePool _lanes;
  bool _logging{false};
  mutable std::mutex _log_mutex;
  std::vector<StageEvent> _log;
  detail::clock::time_point _epoch{detail::clock::now()};
};

// acquire, block epoch, release, until the scheduler terminates.
inline WorkerStats run_stream_worker(const StreamWorkerConfig& config, Scheduler& scheduler, FactorMatrices& factors,
                                     const BlockGrid& grid, const Hyperparams& hp) {
  WorkerStats stats;
  auto lease = scheduler.acquire(config.id);
  while (lease) {
    const auto t0 = detail::clock::now();
    const auto done = block_epoch(factors, grid, lease->current.block, hp, lease->current.order_seed);
    stats.compute_seconds += detail::seconds_since(t0);
    ++stats.blocks;
    stats.triples += done;
    lease = scheduler.rotate(*lease, done);
  }
  return stats;
}

// Double-buffered pipeline: the prefetched block is staged in while the current
// one computes. Its P rows are loaded after the current block is staged out.
inline WorkerStats run_batch_worker(int worker_id, const BatchWorkerConfig& config, Scheduler& scheduler,
                                    FactorMatrices& factors, const BlockGrid& grid, const Hyperparams& hp,
                                    BatchEngine* engine_override = nullptr) {
  std::optional<BatchEngine> own;
  if (!engine_override) own.emplace(config, factors.k());
  BatchEngine& engine = engine_override ? *engine_override : *own;

  WorkerStats stats;
  StagingBuffer buffers[2];
  int cur = 0;
  auto lease = scheduler.acquire(worker_id);
  if (!lease) return stats;
  stats.stage_in_seconds += engine.stage_in(buffers[cur], factors, grid, lease->current, true, cur);

  while (lease) {
    const int nxt = 1 - cur;
    std::future<double> staged;
    if (lease->prefetch) {
      staged = std::async(std::launch::async, [&, g = *lease->prefetch] {
        return engine.stage_in(buffers[nxt], factors, grid, g, false, nxt);
      });
    }
    try {
      stats.compute_seconds += engine.compute(buffers[cur], hp, cur);
      stats.stage_out_seconds += engine.stage_out(buffers[cur], factors, cur);
    } catch (...) {
      if (staged.valid()) staged.wait();
      throw;
    }
    if (staged.valid()) stats.stage_in_seconds += staged.get();
    const auto done = buffers[cur].triples.size();
    ++stats.blocks;
    stats.triples += done;

    const bool had_prefetch = lease->prefetch.has_value();
    lease = scheduler.rotate(*lease, done);
    if (!lease) break;
    if (had_prefetch) {
      stats.stage_in_seconds += engine.load_p(buffers[nxt], factors, nxt);
      cur = nxt;
    } else {
      stats.stage_in_seconds += engine.stage_in(buffers[cur], factors, grid, lease->current, true, cur);
    }
  }
  return stats;
}

// ----------------------------------------------------------------------------
// Throughput sweeps

struct SweepOptions {
  std::uint32_t m{1u << 14};
  std::uint32_t n{1u << 14};
  int k{8};
  std::uint64_t seed{7};
  // Small sizes are repeated beyond `repeats` until this much time is measured.
  double min_seconds{0.05};
};

struct SweepSample {
  std::size_t size{0};
  double seconds{0};     // mean wall time per run
  double throughput{0};  // elements per second
  double stage_in{0};
  double compute{0};
  double stage_out{0};
};

namespace detail {

inline Hyperparams sweep_hyperparams(int k) {
  Hyperparams hp;
  hp.k = k;
  hp.gamma = 0.002;
  return hp;
}

// One run over `triples`, using the whole index space as the block bands.
// Times are added to `acc` unless this is a warm-up run.
inline void run_once(WorkerClass cls, BatchEngine* engine, FactorMatrices& factors,
                     std::span<const RatingTriple> triples, const Hyperparams& hp, std::uint64_t order,
                     SweepSample& acc, bool timed) {
  const double keep = timed ? 1.0 : 0.0;
  if (cls == WorkerClass::stream) {
    const auto t0 = clock::now();
    epoch_over(factors, triples, hp, order);
    acc.seconds += keep * seconds_since(t0);
    return;
  }
  StagingBuffer buf;
  const double in = engine->stage_in(buf, factors, triples, {0, factors.m()}, {0, factors.n()}, order, true);
  const double comp = engine->compute(buf, hp);
  const double out = engine->stage_out(buf, factors);
  acc.stage_in += keep * in;
  acc.compute += keep * comp;
  acc.stage_out += keep * out;
  acc.seconds += keep * (in + comp + out);
}

inline void finish_sample(SweepSample& s, int runs) {
  const double reps = static_cast<double>(runs);
  s.seconds /= reps;
  s.stage_in /= reps;
  s.compute /= reps;
  s.stage_out /= reps;
  s.throughput = s.seconds > 0 ? static_cast<double>(s.size) / s.seconds : 0.0;
}

// Mean time of `repeats` runs after one untimed warm-up run that faults in
// pages and fills caches.
inline SweepSample measure_once(WorkerClass cls, BatchEngine* engine, FactorMatrices& factors,
                                std::span<const RatingTriple> triples, const Hyperparams& hp, int repeats,
                                std::uint64_t seed) {
  SweepSample s;
  s.size = triples.size();
  for (int r = -1; r < repeats; ++r) {
    run_once(cls, engine, factors, triples, hp, mix_seed(seed, triples.size(), static_cast<std::uint64_t>(r + 1)), s,
             r >= 0);
  }
  finish_sample(s, repeats);
  return s;
}

}  // namespace detail

// Elements per second for each size; batch samples also carry per-stage times.
inline std::vector<SweepSample> throughput_sweep(WorkerClass cls, const BatchWorkerConfig& config,
                                                 std::span<const std::size_t> sizes, int repeats,
                                                 const SweepOptions& options = {}) {
  if (sizes.empty()) throw Error("sweep needs at least one size");
  if (repeats < 1) throw Error("repeats must be at least 1");
  if (!std::is_sorted(sizes.begin(), sizes.end()) || sizes.front() == 0) {
    throw Error("sweep sizes must be positive and ascending");
  }
  const auto data = make_random_triples(options.m, options.n, sizes.back(), options.seed);
  const auto hp = detail::sweep_hyperparams(options.k);
  auto factors = init_model(options.m, options.n, hp, options.seed);
  std::optional<BatchEngine> engine;
  if (cls == WorkerClass::batch) engine.emplace(config, options.k);
  // Sizes are measured round-robin so slow drift in machine speed lands on
  // all of them alike; small sizes keep going until min_seconds is measured.
  std::vector<SweepSample> out(sizes.size());
  std::vector<int> runs(sizes.size(), 0);
  auto prefix = [&](std::size_t i) { return std::span<const RatingTriple>(data.triples.data(), sizes[i]); };
  auto* eng = engine ? &*engine : nullptr;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    out[i].size = sizes[i];
    detail::run_once(cls, eng, factors, prefix(i), hp, detail::mix_seed(options.seed, sizes[i], 0), out[i], false);
  }
  for (int round = 0; round < 100000; ++round) {
    bool any = false;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (round >= repeats && out[i].seconds >= options.min_seconds) continue;
      any = true;
      const auto order = detail::mix_seed(options.seed, sizes[i], static_cast<std::uint64_t>(round + 1));
      detail::run_once(cls, eng, factors, prefix(i), hp, order, out[i], true);
      ++runs[i];
    }
    if (!any) break;
  }
  for (std::size_t i = 0; i < sizes.size(); ++i) detail::finish_sample(out[i], runs[i]);
  return out;
}

}  // namespace hmf
