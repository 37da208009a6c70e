#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"

namespace hmf {

// hsgd: one region, FPSGD least-update selection, an epoch is a fixed number of
// block grants. hsgd_star: stream and batch regions, static/dynamic phases,
// every block exactly once per epoch.
enum class SchedulePolicy { hsgd, hsgd_star };

enum class Phase { static_phase, dynamic_phase };

inline const char* to_string(Phase p) { return p == Phase::static_phase ? "static" : "dynamic"; }

struct Grant {
  BlockId block;
  std::uint64_t order_seed{0};
};

struct Lease {
  int worker{-1};
  Grant current;
  // Batch workers only: the next block, same row band, already conflict-checked.
  std::optional<Grant> prefetch;
};

struct SchedulerOptions {
  SchedulePolicy policy{SchedulePolicy::hsgd};
  std::uint64_t seed{1};
  // Epochs before automatic termination; ignored when harness_controlled.
  int max_epochs{1};
  // Pause at every epoch boundary until resume() or terminate().
  bool harness_controlled{false};
  bool prefetch{true};
  bool trace{false};
};

struct EpochStatus {
  int epochs_completed{0};
  Phase phase{Phase::static_phase};
  // Blocks not yet granted in the running epoch, at each region's static granularity.
  std::size_t stream_remaining{0};
  std::size_t batch_remaining{0};
  bool epoch_complete{false};
  bool terminated{false};
};

struct RegionStats {
  std::size_t blocks{0};
  std::uint64_t total{0};
  std::uint64_t min{0};
  std::uint64_t max{0};
  double mean{0};
};

struct ImbalanceReport {
  std::uint32_t rows{0};
  std::uint32_t cols{0};
  // Row-major update counts of the fine blocks.
  std::vector<std::uint64_t> counts;
  std::uint64_t min{0};
  std::uint64_t max{0};
  // max / max(min, 1)
  double ratio{1};
  RegionStats stream;
  RegionStats batch;

  std::string to_text() const {
    std::ostringstream os;
    os << "update counts (" << cols << " columns x " << rows << " rows)\n";
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) os << (c ? " " : "") << counts[r * cols + c];
      os << '\n';
    }
    os << "max/min ratio: " << ratio << " (max " << max << ", min " << min << ")\n";
    auto region = [&](const char* name, const RegionStats& s) {
      if (s.blocks == 0) return;
      os << name << " region: blocks " << s.blocks << ", total " << s.total << ", mean " << s.mean << ", min "
         << s.min << ", max " << s.max << '\n';
    };
    region("stream", stream);
    region("batch", batch);
    return os.str();
  }
};

struct TraceRecord {
  double seconds{0};
  int worker{-1};
  WorkerClass worker_class{WorkerClass::stream};
  BlockId block;
  std::uint64_t order_seed{0};
  Phase phase{Phase::static_phase};
  const char* event{""};
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& trace) {
  os << "timestamp,worker,class,block,order_seed,phase,event\n";
  for (const auto& t : trace) {
    os << t.seconds << ',' << t.worker << ',' << to_string(t.worker_class) << ",\"" << to_string(t.block) << "\","
       << t.order_seed << ',' << to_string(t.phase) << ',' << t.event << '\n';
  }
}

// All state transitions happen under one mutex; block epochs run outside it.
class Scheduler {
 public:
  Scheduler(const GridGeometry& geometry, std::vector<WorkerClass> workers, SchedulerOptions options)
      : _geometry{geometry},
        _rows{geometry.rows()},
        _cols{geometry.cols()},
        _workers{std::move(workers)},
        _options{options},
        _rng{options.seed},
        _held(_workers.size()),
        _row_owner(_rows, -1),
        _row_refs(_rows, 0),
        _col_owner(_cols, -1),
        _counts(static_cast<std::size_t>(_rows) * _cols, 0),
        _marks(_counts.size(), Mark::open),
        _start{std::chrono::steady_clock::now()} {
    if (_workers.empty()) throw Error("scheduler needs at least one worker");
    if (_options.max_epochs < 1) throw Error("max_epochs must be at least 1");
    // Coarse groups: maximal runs of fine rows sharing a sub_row_parent.
    _coarse_of.assign(_rows, -1);
    for (std::uint32_t r = 0; r < _rows; ++r) {
      const int parent = _geometry.sub_row_parent[r];
      if (parent < 0) continue;
      if (r > 0 && _geometry.sub_row_parent[r - 1] == parent) {
        _coarse_of[r] = _coarse_of[r - 1];
        ++_coarse[_coarse_of[r]].row_count;
      } else {
        _coarse_of[r] = static_cast<int>(_coarse.size());
        _coarse.push_back({r, 1, 0});
      }
    }
    for (std::uint32_t r = 0; r < _rows; ++r) {
      (_geometry.region_of_row[r] == Region::batch ? _region_cells[1] : _region_cells[0]) += _cols;
    }
    reset_epoch();
  }

  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;

  const GridGeometry& geometry() const noexcept { return _geometry; }
  std::size_t worker_count() const noexcept { return _workers.size(); }
  WorkerClass worker_class(int worker) const { return _workers.at(static_cast<std::size_t>(worker)); }

  // Non-blocking; nullopt when no independent block is available.
  std::optional<Lease> try_acquire(int worker) {
    std::lock_guard lock(_mutex);
    return grant(worker);
  }

  // Blocks until a block is granted; nullopt once terminated.
  std::optional<Lease> acquire(int worker) {
    std::unique_lock lock(_mutex);
    while (true) {
      if (_terminated) return std::nullopt;
      if (auto lease = grant(worker)) return lease;
      _worker_cv.wait(lock);
    }
  }

  // Completes the current block. A prefetch still held is handed back unprocessed.
  void release(const Lease& lease, std::size_t processed) {
    std::lock_guard lock(_mutex);
    finish_current(lease, processed);
    auto& held = _held.at(static_cast<std::size_t>(lease.worker));
    if (held && held->prefetch) {
      unclaim(held->prefetch->block);
      free_block(lease.worker, held->prefetch->block);
    }
    held.reset();
    after_release();
  }

  // Completes the current block, promotes the prefetch and requests a new one.
  // Without a prefetch this is release + acquire.
  std::optional<Lease> rotate(const Lease& lease, std::size_t processed, bool blocking = true) {
    std::unique_lock lock(_mutex);
    finish_current(lease, processed);
    auto& held = _held.at(static_cast<std::size_t>(lease.worker));
    std::optional<Grant> next = held ? held->prefetch : std::nullopt;
    held.reset();
    if (next) {
      held = Lease{lease.worker, *next, std::nullopt};
      held->prefetch = pick_prefetch(lease.worker, held->current.block);
      if (held->prefetch) {
        take(lease.worker, *held->prefetch, "prefetch");
      }
      auto out = *held;
      after_release();
      return out;
    }
    after_release();
    while (true) {
      if (_terminated) return std::nullopt;
      if (auto l = grant(lease.worker)) return l;
      if (!blocking) return std::nullopt;
      _worker_cv.wait(lock);
    }
  }

  void enter_dynamic_phase(Region exhausted) {
    std::lock_guard lock(_mutex);
    enter_dynamic_locked(exhausted);
  }

  // Harness side: blocks until the running epoch has completed (no leases
  // outstanding) or the scheduler terminated.
  EpochStatus wait_epoch() {
    std::unique_lock lock(_mutex);
    _harness_cv.wait(lock, [&] { return _epoch_complete || _terminated; });
    return status_locked();
  }

  void resume() {
    std::lock_guard lock(_mutex);
    if (!_epoch_complete) return;
    start_next_epoch();
  }

  void terminate() {
    std::lock_guard lock(_mutex);
    _terminated = true;
    _worker_cv.notify_all();
    _harness_cv.notify_all();
  }

  EpochStatus status() const {
    std::lock_guard lock(_mutex);
    return status_locked();
  }

  std::vector<Lease> outstanding() const {
    std::lock_guard lock(_mutex);
    std::vector<Lease> out;
    for (const auto& h : _held)
      if (h) out.push_back(*h);
    return out;
  }

  std::uint64_t update_count(std::uint32_t row, std::uint32_t col) const {
    std::lock_guard lock(_mutex);
    return _counts[cell(row, col)];
  }

  std::uint64_t completed_block_epochs() const {
    std::lock_guard lock(_mutex);
    return _block_epochs;
  }

  std::uint64_t processed_triples() const {
    std::lock_guard lock(_mutex);
    return _processed;
  }

  std::vector<TraceRecord> trace() const {
    std::lock_guard lock(_mutex);
    return _trace;
  }

  ImbalanceReport imbalance_report() const {
    std::lock_guard lock(_mutex);
    ImbalanceReport rep;
    rep.rows = _rows;
    rep.cols = _cols;
    rep.counts.resize(_counts.size());
    for (std::uint32_t r = 0; r < _rows; ++r)
      for (std::uint32_t c = 0; c < _cols; ++c) rep.counts[r * _cols + c] = _counts[cell(r, c)];
    rep.min = *std::min_element(rep.counts.begin(), rep.counts.end());
    rep.max = *std::max_element(rep.counts.begin(), rep.counts.end());
    rep.ratio = static_cast<double>(rep.max) / static_cast<double>(std::max<std::uint64_t>(rep.min, 1));
    for (std::uint32_t r = 0; r < _rows; ++r) {
      auto& s = _geometry.region_of_row[r] == Region::batch ? rep.batch : rep.stream;
      for (std::uint32_t c = 0; c < _cols; ++c) {
        const auto v = _counts[cell(r, c)];
        s.min = s.blocks == 0 ? v : std::min(s.min, v);
        s.max = s.blocks == 0 ? v : std::max(s.max, v);
        s.total += v;
        ++s.blocks;
      }
    }
    for (auto* s : {&rep.stream, &rep.batch})
      if (s->blocks) s->mean = static_cast<double>(s->total) / static_cast<double>(s->blocks);
    return rep;
  }

 private:
  enum class Mark : std::uint8_t { open, claimed, done };

  std::size_t cell(std::uint32_t row, std::uint32_t col) const { return static_cast<std::size_t>(row) * _cols + col; }

  static int region_index(Region r) { return r == Region::batch ? 1 : 0; }

  Region own_region(int worker) const {
    return _workers[static_cast<std::size_t>(worker)] == WorkerClass::batch ? Region::batch : Region::stream;
  }

  bool once_per_epoch() const { return _options.policy == SchedulePolicy::hsgd_star; }

  bool wants_prefetch(int worker) const {
    return _options.prefetch && _workers[static_cast<std::size_t>(worker)] == WorkerClass::batch;
  }

  std::uint64_t block_count(const BlockId& b) const {
    std::uint64_t v = 0;
    for (auto r = b.row; r < b.row_end(); ++r) v = std::max(v, _counts[cell(r, b.col)]);
    return v;
  }

  bool block_open(const BlockId& b) const {
    if (!once_per_epoch()) return _granted < grant_limit();
    for (auto r = b.row; r < b.row_end(); ++r)
      if (_marks[cell(r, b.col)] != Mark::open) return false;
    return true;
  }

  // Under hsgd the epoch is a count of completions. Free-running mode keeps
  // granting across epoch boundaries; harness mode pauses at each one.
  std::size_t grant_limit() const {
    if (_options.harness_controlled) return _count_quota;
    const auto left = static_cast<std::size_t>(std::max(0, _options.max_epochs - _epochs_completed));
    return left > SIZE_MAX / std::max<std::size_t>(_count_quota, 1) ? SIZE_MAX : _count_quota * left;
  }

  bool rows_free(const BlockId& b, int self) const {
    for (auto r = b.row; r < b.row_end(); ++r)
      if (_row_owner[r] != -1 && _row_owner[r] != self) return false;
    return true;
  }

  // Candidate blocks of one region at the active granularity.
  void enumerate(Region region, std::vector<BlockId>& out) const {
    const bool coarse = once_per_epoch() && region == Region::batch && _phase == Phase::static_phase;
    for (std::uint32_t r = 0; r < _rows;) {
      if (once_per_epoch() && _geometry.region_of_row[r] != region) {
        ++r;
        continue;
      }
      std::uint32_t span = 1;
      if (coarse && _coarse_of[r] >= 0) span = _coarse[_coarse_of[r]].row_count;
      for (std::uint32_t c = 0; c < _cols; ++c) out.push_back({r, span, c});
      r += span;
    }
  }

  std::optional<BlockId> pick_least(const std::vector<BlockId>& candidates) {
    if (candidates.empty()) return std::nullopt;
    std::uint64_t best = UINT64_MAX;
    std::vector<const BlockId*> ties;
    for (const auto& b : candidates) {
      const auto v = block_count(b);
      if (v < best) {
        best = v;
        ties.clear();
      }
      if (v == best) ties.push_back(&b);
    }
    std::uniform_int_distribution<std::size_t> pick(0, ties.size() - 1);
    return *ties[pick(_rng)];
  }

  std::optional<Lease> grant(int worker) {
    if (worker < 0 || static_cast<std::size_t>(worker) >= _workers.size()) throw Error("unknown worker id");
    auto& held = _held[static_cast<std::size_t>(worker)];
    if (held) throw Error("worker already holds a lease");
    if (_terminated) return std::nullopt;

    std::vector<Region> order;
    if (!once_per_epoch()) {
      order = {Region::stream};
    } else {
      const Region own = own_region(worker);
      order.push_back(own);
      if (_phase == Phase::dynamic_phase) order.push_back(own == Region::batch ? Region::stream : Region::batch);
    }

    std::vector<BlockId> all;
    std::vector<BlockId> candidates;
    for (auto region : order) {
      all.clear();
      candidates.clear();
      enumerate(region, all);
      for (const auto& b : all)
        if (_col_owner[b.col] == -1 && rows_free(b, -1) && block_open(b)) candidates.push_back(b);
      if (auto b = pick_least(candidates)) {
        held = Lease{worker, make_grant(*b), std::nullopt};
        take(worker, held->current, "acquire");
        if (wants_prefetch(worker)) {
          held->prefetch = pick_prefetch(worker, held->current.block);
          if (held->prefetch) take(worker, *held->prefetch, "prefetch");
        }
        return held;
      }
    }
    return std::nullopt;
  }

  // Same row band as `current` (at the active granularity), any free column.
  std::optional<Grant> pick_prefetch(int worker, const BlockId& current) {
    if (!wants_prefetch(worker)) return std::nullopt;
    std::vector<BlockId> candidates;
    const Region region = _geometry.region_of_row[current.row];
    const bool coarse = once_per_epoch() && region == Region::batch && _phase == Phase::static_phase;
    for (auto r = current.row; r < current.row_end();) {
      std::uint32_t span = 1;
      if (coarse && _coarse_of[r] >= 0) span = _coarse[_coarse_of[r]].row_count;
      if (r + span > current.row_end()) break;
      for (std::uint32_t c = 0; c < _cols; ++c) {
        BlockId b{r, span, c};
        if (_col_owner[c] == -1 && rows_free(b, worker) && block_open(b)) candidates.push_back(b);
      }
      r += span;
    }
    if (auto b = pick_least(candidates)) return make_grant(*b);
    return std::nullopt;
  }

  Grant make_grant(const BlockId& b) const {
    return {b, detail::mix_seed(_options.seed, b.row, b.row_count, b.col, block_count(b))};
  }

  void take(int worker, const Grant& g, const char* event) {
    const auto& b = g.block;
    for (auto r = b.row; r < b.row_end(); ++r) {
      _row_owner[r] = worker;
      ++_row_refs[r];
    }
    _col_owner[b.col] = worker;
    if (once_per_epoch()) {
      for (auto r = b.row; r < b.row_end(); ++r) {
        _marks[cell(r, b.col)] = Mark::claimed;
        --_remaining[region_index(_geometry.region_of_row[r])];
      }
      check_exhaustion();
    } else {
      ++_granted;
    }
    record(worker, g, event);
  }

  void unclaim(const BlockId& b) {
    if (once_per_epoch()) {
      for (auto r = b.row; r < b.row_end(); ++r) {
        _marks[cell(r, b.col)] = Mark::open;
        ++_remaining[region_index(_geometry.region_of_row[r])];
      }
    } else {
      --_granted;
    }
  }

  void free_block(int worker, const BlockId& b) {
    for (auto r = b.row; r < b.row_end(); ++r) {
      if (--_row_refs[r] == 0) _row_owner[r] = -1;
    }
    if (_col_owner[b.col] == worker) _col_owner[b.col] = -1;
  }

  void finish_current(const Lease& lease, std::size_t processed) {
    if (lease.worker < 0 || static_cast<std::size_t>(lease.worker) >= _workers.size()) throw Error("unknown worker id");
    const auto& held = _held[static_cast<std::size_t>(lease.worker)];
    if (!held || !(held->current.block == lease.current.block)) throw Error("release of a block that is not leased");
    const auto& b = held->current.block;
    for (auto r = b.row; r < b.row_end(); ++r) {
      ++_counts[cell(r, b.col)];
      if (once_per_epoch()) {
        _marks[cell(r, b.col)] = Mark::done;
        --_undone;
      }
    }
    if (!once_per_epoch()) ++_done;
    ++_block_epochs;
    _processed += processed;
    free_block(lease.worker, b);
    record(lease.worker, held->current, "release");
  }

  void after_release() {
    if (!once_per_epoch() && !_options.harness_controlled) {
      while (!_terminated && _count_quota > 0 && _done >= _count_quota) {
        _done -= _count_quota;
        _granted -= _count_quota;
        if (++_epochs_completed >= _options.max_epochs) _terminated = true;
        _harness_cv.notify_all();
      }
      _worker_cv.notify_all();
      return;
    }
    const bool complete = once_per_epoch() ? _undone == 0 : _done >= _count_quota;
    if (complete && !_epoch_complete) {
      _epoch_complete = true;
      ++_epochs_completed;
      if (!_options.harness_controlled) {
        if (_epochs_completed >= _options.max_epochs) {
          _terminated = true;
        } else {
          start_next_epoch();
        }
      }
      _harness_cv.notify_all();
    }
    _worker_cv.notify_all();
  }

  void check_exhaustion() {
    if (_phase != Phase::static_phase) return;
    const bool stream_out = _remaining[0] == 0;
    const bool batch_out = _remaining[1] == 0;
    if (stream_out == batch_out) return;  // neither, or both (epoch barrier)
    if (_region_cells[0] == 0 || _region_cells[1] == 0) return;
    enter_dynamic_locked(stream_out ? Region::stream : Region::batch);
  }

  void enter_dynamic_locked(Region exhausted) {
    _phase = Phase::dynamic_phase;
    _exhausted = exhausted;
    _worker_cv.notify_all();
  }

  void reset_epoch() {
    std::fill(_marks.begin(), _marks.end(), Mark::open);
    _remaining[0] = _region_cells[0];
    _remaining[1] = _region_cells[1];
    _undone = _marks.size();
    _count_quota = _marks.size();
    _granted = 0;
    _done = 0;
    _phase = Phase::static_phase;
    _epoch_complete = false;
  }

  void start_next_epoch() {
    reset_epoch();
    _worker_cv.notify_all();
  }

  EpochStatus status_locked() const {
    EpochStatus s;
    s.epochs_completed = _epochs_completed;
    s.phase = _phase;
    s.epoch_complete = _epoch_complete;
    s.terminated = _terminated;
    if (once_per_epoch()) {
      for (std::uint32_t r = 0; r < _rows; ++r) {
        if (_geometry.region_of_row[r] == Region::batch) continue;
        for (std::uint32_t c = 0; c < _cols; ++c) s.stream_remaining += _marks[cell(r, c)] == Mark::open;
      }
      for (const auto& g : _coarse) {
        for (std::uint32_t c = 0; c < _cols; ++c) {
          bool any_open = false;
          for (auto r = g.row; r < g.row_end(); ++r) any_open |= _marks[cell(r, c)] == Mark::open;
          s.batch_remaining += any_open;
        }
      }
    } else {
      s.stream_remaining = _granted >= _count_quota ? 0 : _count_quota - _granted;
    }
    return s;
  }

  void record(int worker, const Grant& g, const char* event) {
    if (!_options.trace) return;
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - _start).count();
    _trace.push_back({t, worker, _workers[static_cast<std::size_t>(worker)], g.block, g.order_seed, _phase, event});
  }

  GridGeometry _geometry;
  std::uint32_t _rows;
  std::uint32_t _cols;
  std::vector<WorkerClass> _workers;
  SchedulerOptions _options;
  std::mt19937_64 _rng;

  std::vector<std::optional<Lease>> _held;
  std::vector<int> _row_owner;
  std::vector<int> _row_refs;
  std::vector<int> _col_owner;
  std::vector<std::uint64_t> _counts;
  std::vector<Mark> _marks;
  std::vector<int> _coarse_of;
  std::vector<BlockId> _coarse;  // fine row span of each coarse batch row (col unused)

  std::size_t _region_cells[2]{0, 0};
  std::size_t _remaining[2]{0, 0};
  std::size_t _undone{0};
  std::size_t _count_quota{0};
  std::size_t _granted{0};
  std::size_t _done{0};

  Phase _phase{Phase::static_phase};
  std::optional<Region> _exhausted;
  int _epochs_completed{0};
  bool _epoch_complete{false};
  bool _terminated{false};
  std::uint64_t _block_epochs{0};
  std::uint64_t _processed{0};

  std::vector<TraceRecord> _trace;
  std::chrono::steady_clock::time_point _start;

  mutable std::mutex _mutex;
  std::condition_variable _worker_cv;
  std::condition_variable _harness_cv;
};

}  // namespace hmf
