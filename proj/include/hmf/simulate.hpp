#pragma once

#include <functional>
#include <optional>
#include <queue>
#include <vector>

#include "scheduler.hpp"

namespace hmf {

// A worker in virtual time: a block of s elements takes overhead + s / speed seconds.
struct SimWorker {
  WorkerClass worker_class{WorkerClass::stream};
  double speed{1.0};
  double overhead{0.0};
};

struct SimResult {
  double virtual_seconds{0};
  std::uint64_t block_epochs{0};
  int epochs_completed{0};
  ImbalanceReport imbalance;
};

// Drives the real scheduler through its non-blocking calls with a
// deterministic event queue. Stops when the budget is spent, the scheduler
// terminates, or every worker is idle with nothing in flight.
inline SimResult simulate_schedule(Scheduler& scheduler, const std::vector<SimWorker>& workers,
                                   const std::function<double(const BlockId&)>& block_size, double budget) {
  if (workers.size() != scheduler.worker_count()) throw Error("simulated worker count differs from the scheduler's");
  struct Event {
    double time;
    int worker;
    bool operator>(const Event& o) const { return time != o.time ? time > o.time : worker > o.worker; }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
  std::vector<std::optional<Lease>> leases(workers.size());
  std::vector<double> sizes(workers.size(), 0);

  auto duration = [&](int w, const BlockId& b) {
    const auto& sw = workers[static_cast<std::size_t>(w)];
    sizes[static_cast<std::size_t>(w)] = block_size(b);
    return std::max(1e-12, sw.overhead + sizes[static_cast<std::size_t>(w)] / sw.speed);
  };
  auto start_idle = [&](double now) {
    for (std::size_t w = 0; w < workers.size(); ++w) {
      if (leases[w]) continue;
      leases[w] = scheduler.try_acquire(static_cast<int>(w));
      if (leases[w]) events.push({now + duration(static_cast<int>(w), leases[w]->current.block), static_cast<int>(w)});
    }
  };

  SimResult out;
  start_idle(0.0);
  while (!events.empty()) {
    const auto ev = events.top();
    if (ev.time > budget) break;
    events.pop();
    out.virtual_seconds = ev.time;
    auto& lease = leases[static_cast<std::size_t>(ev.worker)];
    lease = scheduler.rotate(*lease, static_cast<std::size_t>(sizes[static_cast<std::size_t>(ev.worker)]), false);
    if (lease) events.push({ev.time + duration(ev.worker, lease->current.block), ev.worker});
    start_idle(ev.time);
  }
  out.block_epochs = scheduler.completed_block_epochs();
  out.epochs_completed = scheduler.status().epochs_completed;
  out.imbalance = scheduler.imbalance_report();
  return out;
}

}  // namespace hmf
