#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "hmf/hmf.hpp"

namespace {

namespace fs = std::filesystem;

enum exit_code : int { ok = 0, usage = 2, target_missed = 3, invalid_plan = 4, failure = 1 };

struct Options {
  hmf::RunConfig run;
  std::string schedule{"stream-only"};
  std::string division;
  double overhead_ms{0.0};
  double bandwidth_gbs{12.0};
  double alpha{-1};
  double target_rmse{-1};
  double synthetic_test_fraction{0.0};

  // calibrate
  int segments{16};
  int repeats{5};
  bool allow_oversubscribe{false};

  // partition
  bool dry_run{false};

  // bench
  std::vector<std::size_t> stream_sizes{10000, 31623, 100000, 316228, 1000000};
  std::vector<std::size_t> batch_sizes{1000, 10000, 100000, 1000000, 10000000};
  int bench_repeats{3};
};

struct Dataset {
  hmf::SparseMatrix train;
  std::optional<hmf::SparseMatrix> test;
};

void finish_config(Options& o) {
  auto& r = o.run;
  r.schedule = hmf::parse_schedule(o.schedule);
  r.division = o.division.empty() ? r.default_division() : hmf::parse_division(o.division);
  r.batch.launch_overhead = o.overhead_ms / 1000.0;
  r.batch.staging_bandwidth = o.bandwidth_gbs * 1e9;
  if (o.alpha >= 0) r.alpha = o.alpha;
  if (o.target_rmse > 0) r.target_rmse = o.target_rmse;
  r.synthetic_spec.test_fraction = o.synthetic_test_fraction;
  r.synthetic_spec.seed = r.seed;
}

Dataset load_dataset(const Options& o) {
  Dataset d;
  if (o.run.synthetic) {
    auto s = hmf::make_synthetic(o.run.synthetic_spec);
    d.train = std::move(s.train);
    if (!s.test.triples.empty()) d.test = std::move(s.test);
    return d;
  }
  if (o.run.train_path.empty()) throw hmf::ConfigError("no training data: pass --train PATH or --synthetic");
  d.train = hmf::load_ratings(o.run.train_path);
  if (!o.run.test_path.empty()) d.test = hmf::load_ratings(o.run.test_path, d.train);
  return d;
}

fs::path out_path(const Options& o, const std::string& name) {
  fs::create_directories(o.run.out_dir);
  return fs::path(o.run.out_dir) / name;
}

std::string profile_path(const Options& o) {
  return o.run.profile_path.empty() ? out_path(o, "profile.txt").string() : o.run.profile_path;
}

void print_model(const char* name, const hmf::PiecewiseCostModel& m, std::span<const hmf::CalibrationSample> samples) {
  std::cout << name << ": family " << hmf::to_string(m.family);
  if (m.family != hmf::CurveFamily::linear) std::cout << " a1 " << m.a1 << " b1 " << m.b1 << " tau " << m.tau;
  std::cout << " a2 " << m.a2 << " b2 " << m.b2 << " refit residual " << hmf::fit_residual(m, samples) << '\n';
}

int cmd_calibrate(const Options& o) {
  const auto topo = o.run.topology;
  const auto hw = std::thread::hardware_concurrency();
  if (hw != 0 && hw < static_cast<unsigned>(topo.total()) && !o.allow_oversubscribe) {
    std::cerr << "error: " << topo.total() << " workers requested but only " << hw
              << " hardware threads available (use --allow-oversubscribe to calibrate anyway)\n";
    return usage;
  }
  auto data = load_dataset(o);
  const auto shuffled = hmf::shuffle_triples(data.train, o.run.seed);
  hmf::CalibrateOptions opts;
  opts.segments = o.segments;
  opts.repeats = o.repeats;
  opts.seed = o.run.seed;
  const auto rep = hmf::calibrate(shuffled, topo, o.run.batch, o.run.hp.k, opts);
  const auto path = profile_path(o);
  hmf::save_profile(rep.profile, path);

  print_model("stream", rep.profile.f_c, rep.stream.total);
  print_model("batch.transfer_in", rep.profile.f_g_transfer_in, rep.batch.stage_in);
  print_model("batch.kernel", rep.profile.f_g_kernel, rep.batch.compute);
  print_model("batch.transfer_out", rep.profile.f_g_transfer_out, rep.batch.stage_out);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  if (topo.n_c >= 1 && topo.n_g >= 1) {
    const auto a = hmf::solve_alpha(rep.profile, topo, static_cast<double>(shuffled.nnz()));
    std::cout << "alpha " << a.alpha << " (batch side " << a.batch_side << " s, stream side " << a.stream_side
              << " s)\n";
  }
  std::cout << "profile written to " << path << '\n';
  return ok;
}

int cmd_train(const Options& o) {
  o.run.validate();
  auto data = load_dataset(o);
  std::optional<hmf::CalibrationProfile> profile;
  if (o.run.division == hmf::DivisionMode::nonuniform && !o.run.alpha) {
    profile = hmf::load_profile(profile_path(o), o.run.effective_topology());
    if (profile->stale) std::cerr << "warning: profile was calibrated for a different topology\n";
  }
  const auto result = hmf::train(o.run, data.train, data.test ? &*data.test : nullptr, profile ? &*profile : nullptr);

  hmf::save_factors(out_path(o, "factors.hmfp").string(), result.factors);
  {
    std::ofstream os(out_path(o, "metrics.csv"));
    hmf::write_metrics_csv(os, result.metrics);
  }
  {
    std::ofstream os(out_path(o, "imbalance.txt"));
    os << result.imbalance.to_text();
  }
  {
    std::ofstream os(out_path(o, "plan.txt"));
    os << hmf::describe_plan(result.plan, result.geometry, data.train);
  }
  if (o.run.trace) {
    std::ofstream os(out_path(o, "trace.csv"));
    hmf::write_trace_csv(os, result.trace);
  }

  const auto& last = result.metrics.back();
  std::cout << "epochs " << result.epochs_run() << ", train seconds " << last.train_seconds << ", train rmse "
            << last.train_rmse;
  if (std::isfinite(last.test_rmse)) std::cout << ", test rmse " << last.test_rmse;
  std::cout << ", imbalance ratio " << result.imbalance.ratio << '\n';
  if (result.test_skipped) std::cout << "test ratings skipped (unseen ids): " << result.test_skipped << '\n';
  if (o.run.target_rmse && !result.target_reached) {
    std::cerr << "target RMSE " << *o.run.target_rmse << " not reached within " << o.run.hp.epochs << " epochs\n";
    return target_missed;
  }
  return ok;
}

int cmd_partition(const Options& o) {
  if (!o.dry_run) throw hmf::ConfigError("partition only supports --dry-run");
  const auto topo = o.run.topology;
  topo.validate();
  auto data = load_dataset(o);
  const auto shuffled = hmf::shuffle_triples(data.train, o.run.seed);
  hmf::DivisionPlan plan;
  if (o.run.division == hmf::DivisionMode::uniform) {
    plan = hmf::uniform_plan(topo);
  } else {
    std::optional<hmf::CalibrationProfile> profile;
    if (!o.run.alpha) profile = hmf::load_profile(profile_path(o), topo);
    plan = hmf::nonuniform_plan(topo, hmf::choose_alpha(o.run, topo, profile ? &*profile : nullptr, shuffled.nnz()), shuffled);
  }
  const auto issues = hmf::validate_plan(plan, topo);
  const auto geometry = hmf::materialize(plan, shuffled);
  const auto report = hmf::describe_plan(plan, geometry, shuffled);
  std::cout << report;
  std::ofstream(out_path(o, "plan.txt")) << report;
  for (const auto& i : issues) std::cerr << "invalid: " << i << '\n';
  return issues.empty() ? ok : invalid_plan;
}

int cmd_bench(const Options& o) {
  hmf::SweepOptions sweep;
  sweep.k = o.run.hp.k;
  sweep.seed = o.run.seed;
  const auto stream = hmf::throughput_sweep(hmf::WorkerClass::stream, o.run.batch, o.stream_sizes, o.bench_repeats, sweep);
  const auto batch = hmf::throughput_sweep(hmf::WorkerClass::batch, o.run.batch, o.batch_sizes, o.bench_repeats, sweep);
  {
    std::ofstream os(out_path(o, "stream.csv"));
    os << "size,seconds,throughput\n";
    for (const auto& s : stream) os << s.size << ',' << s.seconds << ',' << s.throughput << '\n';
  }
  {
    std::ofstream os(out_path(o, "batch_kernel.csv"));
    os << "size,seconds,throughput,compute_seconds,compute_throughput\n";
    for (const auto& s : batch) {
      os << s.size << ',' << s.seconds << ',' << s.throughput << ',' << s.compute << ','
         << static_cast<double>(s.size) / s.compute << '\n';
    }
  }
  {
    std::ofstream os(out_path(o, "batch_staging.csv"));
    os << "size,stage_in_seconds,stage_out_seconds,stage_in_throughput,stage_out_throughput\n";
    for (const auto& s : batch) {
      os << s.size << ',' << s.stage_in << ',' << s.stage_out << ',' << static_cast<double>(s.size) / s.stage_in
         << ',' << static_cast<double>(s.size) / s.stage_out << '\n';
    }
  }
  for (const auto& s : stream) std::cout << "stream " << s.size << " " << s.throughput << " elements/s\n";
  for (const auto& s : batch) std::cout << "batch " << s.size << " " << s.throughput << " elements/s\n";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blocked parallel SGD matrix factorization over stream and batch workers"};
  app.set_config("--config", "", "key = value configuration file; command-line flags take precedence");
  app.require_subcommand(1);
  Options o;
  auto& r = o.run;

  app.add_option("--train", r.train_path, "training ratings (user item rating per line)");
  app.add_option("--test", r.test_path, "held-out ratings");
  app.add_flag("--synthetic", r.synthetic, "use generated low-rank data instead of --train");
  app.add_option("--synthetic-m", r.synthetic_spec.m, "synthetic row count")->check(CLI::PositiveNumber);
  app.add_option("--synthetic-n", r.synthetic_spec.n, "synthetic column count")->check(CLI::PositiveNumber);
  app.add_option("--synthetic-rank", r.synthetic_spec.rank, "synthetic true rank")->check(CLI::PositiveNumber);
  app.add_option("--density", r.synthetic_spec.density, "synthetic density")->check(CLI::Range(0.0, 1.0));
  app.add_option("--noise", r.synthetic_spec.noise, "synthetic noise standard deviation")->check(CLI::NonNegativeNumber);
  app.add_option("--synthetic-test-fraction", o.synthetic_test_fraction, "held-out share of synthetic ratings")
      ->check(CLI::Range(0.0, 0.9));
  app.add_option("--k", r.hp.k, "latent dimension")->check(CLI::PositiveNumber);
  app.add_option("--lambda-p", r.hp.lambda_p, "user regularization")->check(CLI::NonNegativeNumber);
  app.add_option("--lambda-q", r.hp.lambda_q, "item regularization")->check(CLI::NonNegativeNumber);
  app.add_option("--gamma", r.hp.gamma, "learning rate")->check(CLI::PositiveNumber);
  app.add_option("--epochs", r.hp.epochs, "epoch budget")->check(CLI::PositiveNumber);
  app.add_option("--target-rmse", o.target_rmse, "stop once this RMSE is reached")->check(CLI::PositiveNumber);
  app.add_option("--threads", r.topology.n_c, "stream workers")->check(CLI::NonNegativeNumber);
  app.add_option("--accel", r.topology.n_g, "batch workers")->check(CLI::NonNegativeNumber);
  app.add_option("--accel-lanes", r.batch.inner_parallelism, "compute lanes per batch worker")
      ->check(CLI::PositiveNumber);
  app.add_option("--accel-overhead-ms", o.overhead_ms, "per-block launch overhead")->check(CLI::NonNegativeNumber);
  app.add_option("--accel-bandwidth-gbs", o.bandwidth_gbs, "staging copy rate in GB/s")->check(CLI::PositiveNumber);
  app.add_option("--schedule", o.schedule, "hsgd | hsgd-star | stream-only | batch-only")
      ->check(CLI::IsMember({"hsgd", "hsgd-star", "stream-only", "batch-only"}));
  app.add_option("--division", o.division, "uniform | nonuniform (default follows --schedule)")
      ->check(CLI::IsMember({"uniform", "nonuniform"}));
  app.add_option("--alpha", o.alpha, "batch-region share of ratings")->check(CLI::Range(0.0, 1.0));
  app.add_option("--seed", r.seed, "random seed");
  app.add_option("--profile", r.profile_path, "calibration profile (default OUT/profile.txt)");
  app.add_option("--out", r.out_dir, "output directory");
  app.add_flag("--trace", r.trace, "write the lease trace CSV");
  app.add_flag("--train-loss", r.train_loss, "record the regularized training loss every epoch");

  auto* calibrate = app.add_subcommand("calibrate", "measure both worker classes and fit cost models")->fallthrough();
  calibrate->add_option("--n", o.segments, "prefix segments")->check(CLI::Range(2, 1 << 20));
  calibrate->add_option("--repeats", o.repeats, "runs per prefix")->check(CLI::Range(3, 1000));
  calibrate->add_flag("--allow-oversubscribe", o.allow_oversubscribe, "calibrate with fewer hardware threads than workers");

  auto* train = app.add_subcommand("train", "train factors")->fallthrough();
  auto* partition = app.add_subcommand("partition", "print the division plan")->fallthrough();
  partition->add_flag("--dry-run", o.dry_run, "plan only, no training");

  auto* bench = app.add_subcommand("bench", "throughput sweeps for both worker classes")->fallthrough();
  bench->add_option("--stream-sizes", o.stream_sizes, "stream sweep sizes")->expected(1, 64);
  bench->add_option("--batch-sizes", o.batch_sizes, "batch sweep sizes")->expected(1, 64);
  bench->add_option("--repeats", o.bench_repeats, "runs per size")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    finish_config(o);
    if (calibrate->parsed()) return cmd_calibrate(o);
    if (partition->parsed()) return cmd_partition(o);
    if (bench->parsed()) return cmd_bench(o);
    if (train->parsed()) return cmd_train(o);
  } catch (const hmf::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return usage;
  } catch (const hmf::NotCalibrated& e) {
    std::cerr << "error: " << e.what() << " (run calibrate or pass --alpha)\n";
    return usage;
  } catch (const hmf::InvalidPlan& e) {
    std::cerr << "error: " << e.what() << '\n';
    return invalid_plan;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
  return usage;
}
