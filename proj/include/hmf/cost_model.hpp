#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include "common.hpp"

namespace hmf {

struct CalibrationSample {
  double size{0};     // elements
  double elapsed{0};  // seconds
};

// Pre-threshold speed family. `linear` means the model has no pre-threshold
// piece and is a plain line a2 * size + b2.
enum class CurveFamily { linear, sqrt_log, log };

inline const char* to_string(CurveFamily f) {
  switch (f) {
    case CurveFamily::linear: return "linear";
    case CurveFamily::sqrt_log: return "sqrt-log";
    case CurveFamily::log: return "log";
  }
  return "?";
}

inline CurveFamily parse_family(const std::string& s) {
  if (s == "linear") return CurveFamily::linear;
  if (s == "sqrt-log") return CurveFamily::sqrt_log;
  if (s == "log") return CurveFamily::log;
  throw Error("unknown curve family: " + s);
}

// size <= tau: size / (a1 * g(size) + b1), with g = sqrt(ln size) or ln size.
// size  > tau: a2 * size + b2.
struct PiecewiseCostModel {
  CurveFamily family{CurveFamily::linear};
  double a1{0};
  double b1{0};
  double tau{0};
  double a2{0};
  double b2{0};

  friend bool operator==(const PiecewiseCostModel&, const PiecewiseCostModel&) = default;
};

inline double family_basis(CurveFamily family, double size) {
  const double ln = std::log(size);
  return family == CurveFamily::sqrt_log ? std::sqrt(ln) : ln;
}

inline double eval_cost(const PiecewiseCostModel& model, double size) {
  if (!(size > 0)) throw Error("cost model evaluated at non-positive size");
  if (model.family != CurveFamily::linear && size <= model.tau) {
    const double speed = model.a1 * family_basis(model.family, std::max(size, 1.0)) + model.b1;
    if (!(speed > 0)) throw Error("cost model predicts non-positive speed");
    return size / speed;
  }
  return model.a2 * size + model.b2;
}

// Relative jump between the two pieces at tau.
inline double continuity_gap(const PiecewiseCostModel& model) {
  if (model.family == CurveFamily::linear || model.tau <= 0) return 0.0;
  const double pre = eval_cost(model, model.tau);
  const double post = model.a2 * model.tau + model.b2;
  return std::abs(pre - post) / std::max(std::abs(post), 1e-300);
}

// Worst relative error of the model against the samples it was fitted on.
inline double fit_residual(const PiecewiseCostModel& model, std::span<const CalibrationSample> samples) {
  double worst = 0.0;
  for (const auto& s : samples) {
    worst = std::max(worst, std::abs(eval_cost(model, s.size) - s.elapsed) / s.elapsed);
  }
  return worst;
}

namespace detail {

// Weighted by 1/y^2, so each point counts by its relative residual; timing
// noise is multiplicative.
inline std::pair<double, double> least_squares_line(std::span<const double> x, std::span<const double> y) {
  double sw = 0;
  double mx = 0;
  double my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = 1.0 / (y[i] * y[i]);
    sw += w;
    mx += w * x[i];
    my += w * y[i];
  }
  mx /= sw;
  my /= sw;
  double sxx = 0;
  double sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = 1.0 / (y[i] * y[i]);
    sxx += w * (x[i] - mx) * (x[i] - mx);
    sxy += w * (x[i] - mx) * (y[i] - my);
  }
  if (!std::isfinite(sw) || !(sxx > 1e-24 * std::max(1.0, mx * mx) * sw)) throw Error("singular least-squares system");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

}  // namespace detail

// Smallest sample size from which every later step in speed changes by less than 2%.
inline double detect_threshold(std::span<const CalibrationSample> samples) {
  if (samples.size() < 4) throw Error("threshold detection needs at least 4 samples");
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (!(samples[i].size > samples[i - 1].size)) throw Error("samples must have ascending sizes");
  }
  std::vector<double> speed;
  for (const auto& s : samples) speed.push_back(s.size / s.elapsed);
  std::size_t first_stable = samples.size() - 1;
  for (std::size_t j = samples.size() - 1; j-- > 0;) {
    if (std::abs(speed[j + 1] - speed[j]) / speed[j] < 0.02) {
      first_stable = j;
    } else {
      break;
    }
  }
  return samples[first_stable].size;
}

// Least squares on speed = a1 * g(size) + b1.
inline std::pair<double, double> fit_pre_threshold(std::span<const CalibrationSample> samples, CurveFamily family) {
  if (family == CurveFamily::linear) throw Error("pre-threshold fit needs a sqrt-log or log family");
  if (samples.size() < 2) throw Error("pre-threshold fit needs at least 2 samples");
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& s : samples) {
    x.push_back(family_basis(family, s.size));
    y.push_back(s.size / s.elapsed);
  }
  return detail::least_squares_line(x, y);
}

// Least squares on elapsed = a2 * size + b2.
inline std::pair<double, double> fit_linear(std::span<const CalibrationSample> samples) {
  if (samples.size() < 2) throw Error("linear fit needs at least 2 samples");
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& s : samples) {
    x.push_back(s.size);
    y.push_back(s.elapsed);
  }
  return detail::least_squares_line(x, y);
}

inline PiecewiseCostModel fit_linear_model(std::span<const CalibrationSample> samples) {
  auto [a2, b2] = fit_linear(samples);
  return {CurveFamily::linear, 0, 0, 0, a2, b2};
}

namespace detail {

// Both fits with the split at tau; nullopt when either side is underdetermined
// or the pre-threshold speed turns non-positive on its samples.
inline std::optional<PiecewiseCostModel> fit_at(std::span<const CalibrationSample> samples, CurveFamily family,
                                                double tau) {
  std::vector<CalibrationSample> pre;
  std::vector<CalibrationSample> post;
  for (const auto& s : samples) {
    if (s.size <= tau) pre.push_back(s);
    if (s.size >= tau) post.push_back(s);
  }
  if (pre.size() < 2) return std::nullopt;
  if (post.size() < 2) post.assign(samples.end() - 2, samples.end());
  PiecewiseCostModel model{family, 0, 0, tau, 0, 0};
  std::tie(model.a1, model.b1) = fit_pre_threshold(pre, family);
  std::tie(model.a2, model.b2) = fit_linear(post);
  for (const auto& s : pre) {
    if (!(model.a1 * family_basis(family, s.size) + model.b1 > 0)) return std::nullopt;
  }
  return model;
}

inline double squared_relative_error(const PiecewiseCostModel& model, std::span<const CalibrationSample> samples) {
  double sum = 0.0;
  for (const auto& s : samples) {
    const double e = (eval_cost(model, s.size) - s.elapsed) / s.elapsed;
    sum += e * e;
  }
  return sum;
}

}  // namespace detail

// Threshold detection followed by both fits. Timing noise can push the 2%
// rule past the true knee, so the split is the best-fitting sample size at or
// below the detected threshold. Degenerates to a single line when no split
// leaves two samples before the plateau with a positive fitted speed.
inline PiecewiseCostModel fit_piecewise(std::span<const CalibrationSample> samples, CurveFamily family) {
  const double detected = detect_threshold(samples);
  std::optional<PiecewiseCostModel> best;
  double best_error = 0.0;
  for (auto it = samples.rbegin(); it != samples.rend(); ++it) {
    if (it->size > detected) continue;
    const auto model = detail::fit_at(samples, family, it->size);
    if (!model) continue;
    const double error = detail::squared_relative_error(*model, samples);
    if (!best || error < best_error) {
      best = model;
      best_error = error;
    }
  }
  return best ? *best : fit_linear_model(samples);
}

// ----------------------------------------------------------------------------
// Calibration profile

struct HardwareFingerprint {
  DeviceTopology topology;
  int lanes{1};
  double launch_overhead{0};
  double staging_bandwidth{0};
  int k{8};

  friend bool operator==(const HardwareFingerprint&, const HardwareFingerprint&) = default;
};

struct CalibrationProfile {
  PiecewiseCostModel f_c;
  PiecewiseCostModel f_g_transfer_in;
  PiecewiseCostModel f_g_transfer_out;
  PiecewiseCostModel f_g_kernel;
  HardwareFingerprint fingerprint;
  // Set on load when the fingerprint does not match the current topology.
  bool stale{false};
};

namespace detail {

// Cost with a line fallback when the curved piece is unusable; zero work costs nothing.
inline double side_cost(const PiecewiseCostModel& model, double size) {
  if (size <= 0) return 0.0;
  try {
    return eval_cost(model, size);
  } catch (const Error&) {
    return std::max(0.0, model.a2 * size + model.b2);
  }
}

}  // namespace detail

inline double stream_cost(const CalibrationProfile& profile, double size) {
  return detail::side_cost(profile.f_c, size);
}

// Overlapped pipeline: the slowest of the three stages bounds the total.
inline double batch_total_cost(const CalibrationProfile& profile, double size) {
  return std::max({detail::side_cost(profile.f_g_transfer_in, size), detail::side_cost(profile.f_g_kernel, size),
                   detail::side_cost(profile.f_g_transfer_out, size)});
}

// Predicted wall time when a fraction alpha of `total_size` goes to the batch workers.
inline double predicted_makespan(const CalibrationProfile& profile, DeviceTopology topo, double total_size,
                                 double alpha) {
  const double batch = topo.n_g > 0 ? batch_total_cost(profile, alpha * total_size) / topo.n_g
                                    : (alpha > 0 ? INFINITY : 0.0);
  const double stream = topo.n_c > 0 ? stream_cost(profile, (1 - alpha) * total_size) / topo.n_c
                                     : (alpha < 1 ? INFINITY : 0.0);
  return std::max(batch, stream);
}

struct AlphaSolution {
  double alpha{0};
  double batch_side{0};   // T_g(alpha) / n_g
  double stream_side{0};  // T_c(1 - alpha) / n_c
  bool grid_scan{false};

  double residual() const { return std::abs(batch_side - stream_side); }
};

// Balances T_g(alpha)/n_g against T_c(1-alpha)/n_c by bisection on their
// difference, which is monotone for monotone cost models. A non-monotone
// difference falls back to a 1000-point scan.
inline AlphaSolution solve_alpha(const CalibrationProfile& profile, DeviceTopology topo, double total_size) {
  topo.validate();
  AlphaSolution out;
  auto evaluate = [&](double alpha) {
    AlphaSolution s;
    s.alpha = alpha;
    s.batch_side = topo.n_g > 0 ? batch_total_cost(profile, alpha * total_size) / topo.n_g : 0.0;
    s.stream_side = topo.n_c > 0 ? stream_cost(profile, (1 - alpha) * total_size) / topo.n_c : 0.0;
    return s;
  };
  if (topo.n_g == 0) return evaluate(0.0);
  if (topo.n_c == 0) return evaluate(1.0);

  auto diff = [&](double alpha) {
    auto s = evaluate(alpha);
    return s.batch_side - s.stream_side;
  };

  constexpr int probes = 64;
  bool monotone = true;
  double prev = diff(0.0);
  for (int i = 1; i <= probes; ++i) {
    double d = diff(static_cast<double>(i) / probes);
    if (d < prev - 1e-12 * std::max(1.0, std::abs(prev))) monotone = false;
    prev = d;
  }

  if (!monotone) {
    AlphaSolution best = evaluate(0.0);
    for (int i = 1; i < 1000; ++i) {
      auto s = evaluate(static_cast<double>(i) / 999.0);
      if (s.residual() < best.residual()) best = s;
    }
    best.grid_scan = true;
    return best;
  }

  double lo = 0.0;
  double hi = 1.0;
  while (true) {
    const double mid = 0.5 * (lo + hi);
    auto s = evaluate(mid);
    const double mean = 0.5 * (s.batch_side + s.stream_side);
    if (s.residual() <= 1e-9 * mean || hi - lo < 1e-9) return s;
    if (s.batch_side < s.stream_side) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
}

// ----------------------------------------------------------------------------
// Profile file: "hmf-profile v1" header, then "key = value" lines.

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, ptr);
}

inline void write_model(std::ostream& os, const std::string& prefix, const PiecewiseCostModel& m) {
  os << prefix << ".family = " << to_string(m.family) << '\n';
  os << prefix << ".a1 = " << format_double(m.a1) << '\n';
  os << prefix << ".b1 = " << format_double(m.b1) << '\n';
  os << prefix << ".tau = " << format_double(m.tau) << '\n';
  os << prefix << ".a2 = " << format_double(m.a2) << '\n';
  os << prefix << ".b2 = " << format_double(m.b2) << '\n';
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline constexpr const char* profile_header = "hmf-profile v1";

inline void save_profile(const CalibrationProfile& p, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write profile: " + path);
  os << profile_header << '\n';
  os << "# fitted cost models; sizes in elements, times in seconds\n";
  detail::write_model(os, "stream", p.f_c);
  detail::write_model(os, "batch.transfer_in", p.f_g_transfer_in);
  detail::write_model(os, "batch.transfer_out", p.f_g_transfer_out);
  detail::write_model(os, "batch.kernel", p.f_g_kernel);
  os << "fingerprint.n_c = " << p.fingerprint.topology.n_c << '\n';
  os << "fingerprint.n_g = " << p.fingerprint.topology.n_g << '\n';
  os << "fingerprint.lanes = " << p.fingerprint.lanes << '\n';
  os << "fingerprint.launch_overhead = " << detail::format_double(p.fingerprint.launch_overhead) << '\n';
  os << "fingerprint.staging_bandwidth = " << detail::format_double(p.fingerprint.staging_bandwidth) << '\n';
  os << "fingerprint.k = " << p.fingerprint.k << '\n';
  if (!os) throw Error("write failed: " + path);
}

inline CalibrationProfile load_profile(const std::string& path, std::optional<DeviceTopology> current = std::nullopt) {
  std::ifstream is(path);
  if (!is) {
    throw NotCalibrated("no calibration profile at " + path + " (run `hmf calibrate` first)");
  }
  std::string line;
  if (!std::getline(is, line) || detail::trim(line) != profile_header) {
    throw Error("not an hmf-profile v1 file: " + path);
  }
  std::map<std::string, std::string> kv;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value in " + path, line_no);
    kv[detail::trim(std::string_view(text).substr(0, eq))] = detail::trim(std::string_view(text).substr(eq + 1));
  }

  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error("profile is missing key " + key);
    return it->second;
  };
  auto number = [&](const std::string& key) {
    const auto& s = get(key);
    double x = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw Error("bad number for " + key + ": " + s);
    return x;
  };
  auto integer = [&](const std::string& key) {
    const auto& s = get(key);
    int x = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw Error("bad integer for " + key + ": " + s);
    return x;
  };
  auto model = [&](const std::string& prefix) {
    PiecewiseCostModel m;
    m.family = parse_family(get(prefix + ".family"));
    m.a1 = number(prefix + ".a1");
    m.b1 = number(prefix + ".b1");
    m.tau = number(prefix + ".tau");
    m.a2 = number(prefix + ".a2");
    m.b2 = number(prefix + ".b2");
    return m;
  };

  CalibrationProfile p;
  p.f_c = model("stream");
  p.f_g_transfer_in = model("batch.transfer_in");
  p.f_g_transfer_out = model("batch.transfer_out");
  p.f_g_kernel = model("batch.kernel");
  p.fingerprint.topology.n_c = integer("fingerprint.n_c");
  p.fingerprint.topology.n_g = integer("fingerprint.n_g");
  p.fingerprint.lanes = integer("fingerprint.lanes");
  p.fingerprint.launch_overhead = number("fingerprint.launch_overhead");
  p.fingerprint.staging_bandwidth = number("fingerprint.staging_bandwidth");
  p.fingerprint.k = integer("fingerprint.k");
  if (current) p.stale = !(p.fingerprint.topology == *current);
  return p;
}

}  // namespace hmf
