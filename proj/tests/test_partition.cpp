#include <gtest/gtest.h>

#include "hmf/partition.hpp"
#include "hmf/synthetic.hpp"

using namespace hmf;

namespace {

SparseMatrix synthetic(std::uint32_t m = 400, std::uint32_t n = 300, std::uint64_t seed = 3) {
  return make_synthetic({.m = m, .n = n, .rank = 2, .density = 0.05, .seed = seed}).train;
}

int expected_sub_rows(int nc, int ng) { return (nc + ng + ng - 1) / ng; }

}  // namespace

TEST(UniformPlan, MatchesWorkerCountRule) {
  for (int nc = 1; nc <= 8; ++nc) {
    for (int ng = 0; ng <= 2; ++ng) {
      auto plan = uniform_plan({nc, ng});
      EXPECT_EQ(plan.fine_rows(), nc + ng);
      EXPECT_EQ(plan.col_count, nc + ng + 1);
      EXPECT_TRUE(validate_plan(plan, {nc, ng}).empty());
    }
  }
}

TEST(UniformPlan, SixteenThreadsOneAccelerator) {
  auto plan = uniform_plan({16, 1});
  EXPECT_EQ(plan.col_count, 18);
  EXPECT_EQ(plan.fine_rows(), 17);
}

TEST(NonuniformPlan, FourThreadsTwoAccelerators) {
  auto m = synthetic();
  auto plan = nonuniform_plan({4, 2}, 0.4, m);
  EXPECT_EQ(plan.col_count, 9);
  EXPECT_EQ(plan.batch_coarse_rows, 2);
  EXPECT_EQ(plan.batch_sub_rows_per_coarse, 3);
  EXPECT_EQ(plan.stream_rows, 6);
  EXPECT_TRUE(validate_plan(plan, {4, 2}).empty());
  auto grid = build_grid(m, materialize(plan, m));
  EXPECT_EQ(grid.rows(), 12u);
  EXPECT_EQ(grid.cols(), 9u);
}

TEST(NonuniformPlan, CountsForAllSmallTopologies) {
  auto m = synthetic();
  for (int nc = 1; nc <= 8; ++nc) {
    for (int ng = 1; ng <= 2; ++ng) {
      auto plan = nonuniform_plan({nc, ng}, 0.5, m);
      EXPECT_EQ(plan.col_count, nc + 2 * ng + 1);
      EXPECT_EQ(plan.stream_rows, nc + ng);
      EXPECT_EQ(plan.batch_coarse_rows, ng);
      EXPECT_EQ(plan.batch_sub_rows_per_coarse, expected_sub_rows(nc, ng));
      EXPECT_TRUE(validate_plan(plan, {nc, ng}).empty()) << nc << "," << ng;
      auto grid = build_grid(m, materialize(plan, m));
      EXPECT_EQ(grid.cols(), static_cast<std::uint32_t>(nc + 2 * ng + 1));
    }
  }
}

TEST(NonuniformPlan, BatchRegionTracksAlpha) {
  auto m = synthetic(1000, 200, 5);
  for (double alpha : {0.1, 0.3, 0.5, 0.8}) {
    auto plan = nonuniform_plan({4, 1}, alpha, m);
    // Oracle: row prefix closest to alpha * nnz.
    std::vector<std::size_t> row_counts(m.m, 0);
    for (const auto& t : m.triples) ++row_counts[t.u];
    std::size_t acc = 0;
    double best = 1e300;
    std::uint32_t best_row = 0;
    for (std::uint32_t r = 0; r <= m.m; ++r) {
      if (std::abs(static_cast<double>(acc) - alpha * m.nnz()) < best) {
        best = std::abs(static_cast<double>(acc) - alpha * m.nnz());
        best_row = r;
      }
      if (r < m.m) acc += row_counts[r];
    }
    EXPECT_EQ(plan.region_boundary_row, best_row);
    EXPECT_NEAR(static_cast<double>(plan.batch_region_nnz) / m.nnz(), alpha, 0.01);
  }
}

TEST(NonuniformPlan, RegionsAndSubRowsAreConsistent) {
  auto m = synthetic();
  auto plan = nonuniform_plan({3, 2}, 0.35, m);
  const auto& g = plan.geometry;
  const int fine_batch = plan.batch_coarse_rows * plan.batch_sub_rows_per_coarse;
  for (int r = 0; r < plan.fine_rows(); ++r) {
    EXPECT_EQ(g.region_of_row[r], r < fine_batch ? Region::batch : Region::stream);
    EXPECT_EQ(g.sub_row_parent[r], r < fine_batch ? r / plan.batch_sub_rows_per_coarse : -1);
  }
  EXPECT_EQ(g.row_cuts[fine_batch], plan.region_boundary_row);
  for (int c = 0; c < plan.batch_coarse_rows; ++c) {
    std::uint32_t lo = UINT32_MAX;
    std::uint32_t hi = 0;
    for (int s = 0; s < plan.batch_sub_rows_per_coarse; ++s) {
      const int r = c * plan.batch_sub_rows_per_coarse + s;
      lo = std::min(lo, g.row_cuts[r + 1] - g.row_cuts[r]);
      hi = std::max(hi, g.row_cuts[r + 1] - g.row_cuts[r]);
    }
    EXPECT_LE(hi - lo, 1u);
  }
}

TEST(NonuniformPlan, RejectsDegenerateAlphaAndTopology) {
  auto m = synthetic();
  EXPECT_THROW(nonuniform_plan({4, 1}, 1.5, m), InvalidPlan);
  EXPECT_THROW(nonuniform_plan({4, 1}, 0.0, m), InvalidPlan);
  EXPECT_THROW(nonuniform_plan({4, 1}, 1.0, m), InvalidPlan);
  EXPECT_THROW(nonuniform_plan({4, 0}, 0.5, m), InvalidPlan);
  EXPECT_THROW(nonuniform_plan({0, 2}, 0.5, m), InvalidPlan);
  EXPECT_THROW(nonuniform_plan({4, 1}, 0.0001, m), InvalidPlan);
}

TEST(ValidatePlan, FlagsEachBrokenInvariant) {
  auto m = synthetic();
  const DeviceTopology topo{4, 2};
  auto good = nonuniform_plan(topo, 0.4, m);

  auto few_cols = good;
  few_cols.col_count = 8;
  few_cols.geometry = {};
  EXPECT_FALSE(validate_plan(few_cols, topo).empty());

  auto few_rows = uniform_plan({4, 1});
  few_rows.stream_rows = 3;
  EXPECT_FALSE(validate_plan(few_rows, {4, 1}).empty());

  auto wrong_sub = good;
  wrong_sub.batch_sub_rows_per_coarse = 2;
  EXPECT_FALSE(validate_plan(wrong_sub, topo).empty());

  auto wrong_coarse = good;
  wrong_coarse.batch_coarse_rows = 1;
  EXPECT_FALSE(validate_plan(wrong_coarse, topo).empty());

  EXPECT_FALSE(validate_plan(good, {4, 1}).empty());
}

TEST(DescribePlan, ReportsGeometry) {
  auto m = synthetic();
  auto plan = nonuniform_plan({4, 2}, 0.4, m);
  auto text = describe_plan(plan, materialize(plan, m), m);
  EXPECT_NE(text.find("9 columns x 12 rows"), std::string::npos);
  EXPECT_NE(text.find("2 coarse rows x 3 sub-rows"), std::string::npos);
  EXPECT_NE(text.find("6 rows"), std::string::npos);
  EXPECT_NE(text.find("R_g/(9x2)"), std::string::npos);
  EXPECT_NE(text.find("R_g/(9x6)"), std::string::npos);
}
