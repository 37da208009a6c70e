#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"

namespace hmf {

enum class DivisionKind { uniform, nonuniform };

inline const char* to_string(DivisionKind k) { return k == DivisionKind::uniform ? "uniform" : "nonuniform"; }

// Grid shape. Uniform plans have one region of `stream_rows` row bands. Nonuniform
// plans put the batch region on top (n_g coarse rows, each split into sub-rows)
// and the stream region below; column bands are shared by both regions.
struct DivisionPlan {
  DivisionKind kind{DivisionKind::uniform};
  double alpha{0};
  int col_count{1};
  int stream_rows{1};
  int batch_coarse_rows{0};
  int batch_sub_rows_per_coarse{0};
  std::uint32_t region_boundary_row{0};
  std::size_t batch_region_nnz{0};
  // Filled by nonuniform_plan or materialize().
  GridGeometry geometry;

  int fine_rows() const noexcept { return stream_rows + batch_coarse_rows * batch_sub_rows_per_coarse; }
  bool has_geometry() const noexcept { return geometry.row_cuts.size() >= 2; }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Minimal grid satisfying (n_c + n_g + 1) x (n_c + n_g): n_c + n_g + 1 column
// bands and n_c + n_g row bands.
inline DivisionPlan uniform_plan(DeviceTopology topo) {
  topo.validate();
  DivisionPlan plan;
  plan.kind = DivisionKind::uniform;
  plan.col_count = topo.total() + 1;
  plan.stream_rows = topo.total();
  return plan;
}

namespace detail {

// `parts` bands of equal width over [lo, hi); the first (hi - lo) % parts bands get one extra.
inline std::vector<std::uint32_t> equal_width_cuts(std::uint32_t lo, std::uint32_t hi, int parts) {
  if (parts < 1 || hi - lo < static_cast<std::uint32_t>(parts)) {
    throw InvalidPlan("cannot split " + std::to_string(hi - lo) + " rows/columns into " + std::to_string(parts) +
                      " bands");
  }
  const auto width = (hi - lo) / static_cast<std::uint32_t>(parts);
  const auto extra = (hi - lo) % static_cast<std::uint32_t>(parts);
  std::vector<std::uint32_t> cuts{lo};
  for (std::uint32_t i = 0; i < static_cast<std::uint32_t>(parts); ++i) {
    cuts.push_back(cuts.back() + width + (i < extra ? 1 : 0));
  }
  return cuts;
}

// `prefix[x]` = nnz in indices [0, x). Cuts [lo, hi) into `parts` non-empty bands
// whose nnz are as equal as possible.
inline std::vector<std::uint32_t> equal_mass_cuts(const std::vector<std::size_t>& prefix, std::uint32_t lo,
                                                  std::uint32_t hi, int parts) {
  if (parts < 1 || hi - lo < static_cast<std::uint32_t>(parts)) {
    throw InvalidPlan("cannot split " + std::to_string(hi - lo) + " rows/columns into " + std::to_string(parts) +
                      " bands");
  }
  const double base = static_cast<double>(prefix[lo]);
  const double total = static_cast<double>(prefix[hi] - prefix[lo]);
  std::vector<std::uint32_t> cuts{lo};
  for (int i = 1; i < parts; ++i) {
    const double target = base + total * i / parts;
    const std::uint32_t min_cut = cuts.back() + 1;
    const std::uint32_t max_cut = hi - static_cast<std::uint32_t>(parts - i);
    auto it = std::lower_bound(prefix.begin() + min_cut, prefix.begin() + max_cut + 1, target,
                               [](std::size_t a, double t) { return static_cast<double>(a) < t; });
    auto cut = static_cast<std::uint32_t>(it - prefix.begin());
    cut = std::clamp(cut, min_cut, max_cut);
    if (cut > min_cut && std::abs(static_cast<double>(prefix[cut - 1]) - target) <=
                             std::abs(static_cast<double>(prefix[cut]) - target)) {
      --cut;
    }
    cuts.push_back(cut);
  }
  cuts.push_back(hi);
  return cuts;
}

inline std::vector<std::size_t> prefix_counts(const SparseMatrix& matrix, bool rows) {
  std::vector<std::size_t> prefix((rows ? matrix.m : matrix.n) + 1, 0);
  for (const auto& t : matrix.triples) ++prefix[(rows ? t.u : t.v) + 1];
  for (std::size_t i = 1; i < prefix.size(); ++i) prefix[i] += prefix[i - 1];
  return prefix;
}

}  // namespace detail

// Batch region on top holding the row prefix whose nnz is closest to alpha * nnz.
// Coarse batch rows and stream rows are cut by equal nnz, sub-rows by equal width,
// and n_c + 2 n_g + 1 equal-nnz column bands span the whole matrix.
inline DivisionPlan nonuniform_plan(DeviceTopology topo, double alpha, const SparseMatrix& matrix) {
  topo.validate();
  if (topo.n_c < 1 || topo.n_g < 1) throw InvalidPlan("nonuniform division needs n_c >= 1 and n_g >= 1");
  if (!(alpha > 0 && alpha < 1)) throw InvalidPlan("alpha must lie strictly between 0 and 1");

  DivisionPlan plan;
  plan.kind = DivisionKind::nonuniform;
  plan.alpha = alpha;
  plan.col_count = topo.n_c + 2 * topo.n_g + 1;
  plan.stream_rows = topo.n_c + topo.n_g;
  plan.batch_coarse_rows = topo.n_g;
  plan.batch_sub_rows_per_coarse = ceil_div(topo.n_g + topo.n_c, topo.n_g);

  const auto row_prefix = detail::prefix_counts(matrix, true);
  const double target = alpha * static_cast<double>(matrix.nnz());
  std::uint32_t boundary = 0;
  double best = INFINITY;
  for (std::uint32_t r = 0; r <= matrix.m; ++r) {
    const double gap = std::abs(static_cast<double>(row_prefix[r]) - target);
    if (gap < best) {
      best = gap;
      boundary = r;
    }
  }
  if (boundary == 0 || boundary == matrix.m) {
    throw InvalidPlan("alpha leaves one region without any rows");
  }
  const auto batch_fine = static_cast<std::uint32_t>(plan.batch_coarse_rows * plan.batch_sub_rows_per_coarse);
  if (boundary < batch_fine || matrix.m - boundary < static_cast<std::uint32_t>(plan.stream_rows)) {
    throw InvalidPlan("too few rows in a region for its bands");
  }
  plan.region_boundary_row = boundary;
  plan.batch_region_nnz = row_prefix[boundary];

  auto& g = plan.geometry;
  auto coarse = detail::equal_mass_cuts(row_prefix, 0, boundary, plan.batch_coarse_rows);
  g.row_cuts = {0};
  for (int c = 0; c < plan.batch_coarse_rows; ++c) {
    auto sub = detail::equal_width_cuts(coarse[c], coarse[c + 1], plan.batch_sub_rows_per_coarse);
    g.row_cuts.insert(g.row_cuts.end(), sub.begin() + 1, sub.end());
    for (int s = 0; s < plan.batch_sub_rows_per_coarse; ++s) {
      g.region_of_row.push_back(Region::batch);
      g.sub_row_parent.push_back(c);
    }
  }
  auto stream = detail::equal_mass_cuts(row_prefix, boundary, matrix.m, plan.stream_rows);
  g.row_cuts.insert(g.row_cuts.end(), stream.begin() + 1, stream.end());
  for (int s = 0; s < plan.stream_rows; ++s) {
    g.region_of_row.push_back(Region::stream);
    g.sub_row_parent.push_back(-1);
  }
  g.col_cuts = detail::equal_mass_cuts(detail::prefix_counts(matrix, false), 0, matrix.n, plan.col_count);
  return plan;
}

// Cuts for a uniform plan: equal-width bands over the matrix extent.
inline GridGeometry materialize(const DivisionPlan& plan, const SparseMatrix& matrix) {
  if (plan.has_geometry()) return plan.geometry;
  if (plan.kind != DivisionKind::uniform) throw InvalidPlan("nonuniform plan has no geometry");
  return simple_geometry(detail::equal_width_cuts(0, matrix.m, plan.stream_rows),
                         detail::equal_width_cuts(0, matrix.n, plan.col_count));
}

// Empty result means the plan is valid for `topo`.
inline std::vector<std::string> validate_plan(const DivisionPlan& plan, DeviceTopology topo) {
  std::vector<std::string> issues;
  const int workers = topo.total();
  const long rule1 = static_cast<long>(workers + 1) * workers;
  const long blocks = static_cast<long>(plan.fine_rows()) * plan.col_count;
  if (blocks < rule1) {
    issues.push_back("rule 1: " + std::to_string(blocks) + " blocks < (n_c+n_g+1)*(n_c+n_g) = " +
                     std::to_string(rule1));
  }
  if (plan.kind == DivisionKind::nonuniform) {
    if (topo.n_c < 1 || topo.n_g < 1) issues.push_back("nonuniform plan needs n_c >= 1 and n_g >= 1");
    if (plan.col_count != topo.n_c + 2 * topo.n_g + 1) {
      issues.push_back("column count " + std::to_string(plan.col_count) + " != n_c+2*n_g+1 = " +
                       std::to_string(topo.n_c + 2 * topo.n_g + 1));
    }
    if (plan.stream_rows != workers) {
      issues.push_back("stream rows " + std::to_string(plan.stream_rows) + " != n_c+n_g = " + std::to_string(workers));
    }
    if (plan.batch_coarse_rows != topo.n_g) {
      issues.push_back("coarse batch rows " + std::to_string(plan.batch_coarse_rows) + " != n_g = " +
                       std::to_string(topo.n_g));
    }
    if (topo.n_g >= 1 && plan.batch_sub_rows_per_coarse != ceil_div(workers, topo.n_g)) {
      issues.push_back("sub-rows per coarse row " + std::to_string(plan.batch_sub_rows_per_coarse) +
                       " != ceil((n_c+n_g)/n_g) = " + std::to_string(ceil_div(workers, std::max(topo.n_g, 1))));
    }
    // Every worker plus one prefetch slot per batch worker holds a distinct column, with one to spare.
    if (plan.col_count < workers + topo.n_g + 1) {
      issues.push_back("spare column: " + std::to_string(plan.col_count) + " columns < workers + n_g + 1 = " +
                       std::to_string(workers + topo.n_g + 1));
    }
  }
  if (plan.has_geometry()) {
    const auto& g = plan.geometry;
    if (static_cast<int>(g.rows()) != plan.fine_rows() || static_cast<int>(g.cols()) != plan.col_count) {
      issues.push_back("geometry does not match the plan's band counts");
    }
  }
  return issues;
}

// Text report: band boundaries and per-band nnz.
inline std::string describe_plan(const DivisionPlan& plan, const GridGeometry& g, const SparseMatrix& matrix) {
  const auto row_prefix = detail::prefix_counts(matrix, true);
  const auto col_prefix = detail::prefix_counts(matrix, false);
  std::ostringstream os;
  os << "division: " << to_string(plan.kind) << '\n';
  os << "grid: " << g.cols() << " columns x " << g.rows() << " rows (" << g.cols() * g.rows() << " blocks)\n";
  if (plan.kind == DivisionKind::nonuniform) {
    const double batch = static_cast<double>(plan.batch_region_nnz);
    const double cols = plan.col_count;
    os << "alpha: " << plan.alpha << '\n';
    os << "batch region: rows [0, " << plan.region_boundary_row << "), nnz " << plan.batch_region_nnz << ", "
       << plan.batch_coarse_rows << " coarse rows x " << plan.batch_sub_rows_per_coarse << " sub-rows\n";
    os << "stream region: rows [" << plan.region_boundary_row << ", " << matrix.m << "), nnz "
       << matrix.nnz() - plan.batch_region_nnz << ", " << plan.stream_rows << " rows\n";
    os << "static batch block: R_g/(" << plan.col_count << "x" << plan.batch_coarse_rows
       << ") = " << batch / (cols * plan.batch_coarse_rows) << " elements\n";
    os << "dynamic granularity: R_g/(" << plan.col_count << "x"
       << plan.batch_coarse_rows * plan.batch_sub_rows_per_coarse
       << ") = " << batch / (cols * plan.batch_coarse_rows * plan.batch_sub_rows_per_coarse) << " elements\n";
  }
  os << "row bands:\n";
  for (std::uint32_t r = 0; r < g.rows(); ++r) {
    os << "  " << r << " [" << g.row_cuts[r] << ", " << g.row_cuts[r + 1] << ") " << to_string(g.region_of_row[r]);
    if (g.sub_row_parent[r] >= 0) os << " coarse " << g.sub_row_parent[r];
    os << " nnz " << row_prefix[g.row_cuts[r + 1]] - row_prefix[g.row_cuts[r]] << '\n';
  }
  os << "column bands:\n";
  for (std::uint32_t c = 0; c < g.cols(); ++c) {
    os << "  " << c << " [" << g.col_cuts[c] << ", " << g.col_cuts[c + 1] << ") nnz "
       << col_prefix[g.col_cuts[c + 1]] - col_prefix[g.col_cuts[c]] << '\n';
  }
  return os.str();
}

}  // namespace hmf
