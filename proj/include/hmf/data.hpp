#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace hmf {

struct RatingTriple {
  std::uint32_t u{0};
  std::uint32_t v{0};
  float r{0.0F};

  friend bool operator==(const RatingTriple&, const RatingTriple&) = default;
};

static_assert(sizeof(RatingTriple) == 12);

// Original-id <-> dense-index table for one axis.
class IndexRemap {
 public:
  std::uint32_t intern(std::int64_t original) {
    auto [it, inserted] = _index.try_emplace(original, static_cast<std::uint32_t>(_ids.size()));
    if (inserted) {
      _ids.push_back(original);
    }
    return it->second;
  }

  std::optional<std::uint32_t> find(std::int64_t original) const {
    auto it = _index.find(original);
    if (it == _index.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  std::int64_t original(std::uint32_t dense) const { return _ids.at(dense); }

  std::size_t size() const noexcept { return _ids.size(); }
  bool empty() const noexcept { return _ids.empty(); }

 private:
  std::vector<std::int64_t> _ids;
  std::unordered_map<std::int64_t, std::uint32_t> _index;
};

// Coordinate-form rating matrix with dense 0-based indices.
struct SparseMatrix {
  std::uint32_t m{0};
  std::uint32_t n{0};
  std::vector<RatingTriple> triples;
  // Empty when the matrix was not produced from text ids.
  IndexRemap row_remap;
  IndexRemap col_remap;
  // Entries dropped because their ids were unknown to a reference matrix.
  std::size_t unresolved{0};

  std::size_t nnz() const noexcept { return triples.size(); }

  void validate() const {
    for (const auto& t : triples) {
      if (t.u >= m || t.v >= n) {
        throw Error("triple index out of range");
      }
      if (!std::isfinite(t.r)) {
        throw Error("non-finite rating");
      }
    }
  }
};

namespace detail {

inline std::string_view next_field(std::string_view& line) {
  constexpr std::string_view ws = " \t\r\f\v";
  auto start = line.find_first_not_of(ws);
  if (start == std::string_view::npos) {
    line = {};
    return {};
  }
  line.remove_prefix(start);
  auto end = line.find_first_of(ws);
  auto field = line.substr(0, end);
  line.remove_prefix(end == std::string_view::npos ? line.size() : end);
  return field;
}

template <typename T>
bool parse_number(std::string_view field, T& out) {
  if (field.empty()) {
    return false;
  }
  if (field.front() == '+') {
    field.remove_prefix(1);
  }
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc{} && ptr == field.data() + field.size();
}

struct RawRating {
  std::int64_t user;
  std::int64_t item;
  float rating;
};

inline std::vector<RawRating> read_raw_ratings(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open ratings file: " + path);
  }
  std::vector<RawRating> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view rest = line;
    auto first = next_field(rest);
    if (first.empty() || first.front() == '#') {
      continue;
    }
    auto second = next_field(rest);
    auto third = next_field(rest);
    RawRating raw{};
    double value = 0.0;
    if (!parse_number(first, raw.user) || !parse_number(second, raw.item) ||
        !parse_number(third, value) || !next_field(rest).empty()) {
      throw ParseError("malformed rating line in " + path, line_no);
    }
    if (!std::isfinite(value) || !std::isfinite(static_cast<float>(value))) {
      throw ParseError("non-finite rating in " + path, line_no);
    }
    raw.rating = static_cast<float>(value);
    out.push_back(raw);
  }
  if (in.bad()) {
    throw Error("read error on " + path);
  }
  return out;
}

// Keeps the last occurrence of each (user, item) pair, at its own position.
inline void dedup_keep_last(std::vector<RatingTriple>& triples) {
  std::unordered_map<std::uint64_t, bool> seen;
  seen.reserve(triples.size());
  std::vector<RatingTriple> kept;
  kept.reserve(triples.size());
  for (auto it = triples.rbegin(); it != triples.rend(); ++it) {
    auto key = (static_cast<std::uint64_t>(it->u) << 32) | it->v;
    if (seen.try_emplace(key, true).second) {
      kept.push_back(*it);
    }
  }
  std::reverse(kept.begin(), kept.end());
  triples = std::move(kept);
}

}  // namespace detail

// Reads "user item rating" lines; ids are remapped densely in order of first appearance.
inline SparseMatrix load_ratings(const std::string& path) {
  SparseMatrix matrix;
  auto raw = detail::read_raw_ratings(path);
  matrix.triples.reserve(raw.size());
  for (const auto& r : raw) {
    auto u = matrix.row_remap.intern(r.user);
    auto v = matrix.col_remap.intern(r.item);
    matrix.triples.push_back({u, v, r.rating});
  }
  detail::dedup_keep_last(matrix.triples);
  matrix.m = static_cast<std::uint32_t>(matrix.row_remap.size());
  matrix.n = static_cast<std::uint32_t>(matrix.col_remap.size());
  return matrix;
}

// Reads a held-out set into the index space of `reference`. Ids the reference
// has never seen are dropped and counted in `unresolved`.
inline SparseMatrix load_ratings(const std::string& path, const SparseMatrix& reference) {
  SparseMatrix matrix;
  matrix.m = reference.m;
  matrix.n = reference.n;
  for (const auto& r : detail::read_raw_ratings(path)) {
    auto u = reference.row_remap.find(r.user);
    auto v = reference.col_remap.find(r.item);
    if (!u || !v) {
      ++matrix.unresolved;
      continue;
    }
    matrix.triples.push_back({*u, *v, r.rating});
  }
  detail::dedup_keep_last(matrix.triples);
  return matrix;
}

inline SparseMatrix shuffle_triples(SparseMatrix matrix, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(matrix.triples.begin(), matrix.triples.end(), rng);
  return matrix;
}

// ----------------------------------------------------------------------------
// Block grid

// A rectangle of the grid: `row_count` consecutive fine row bands in one column
// band. Coarse batch-region blocks span several fine sub-rows.
struct BlockId {
  std::uint32_t row{0};
  std::uint32_t row_count{1};
  std::uint32_t col{0};

  std::uint32_t row_end() const noexcept { return row + row_count; }

  friend bool operator==(const BlockId&, const BlockId&) = default;
};

inline std::string to_string(const BlockId& b) {
  if (b.row_count == 1) {
    return "(" + std::to_string(b.row) + "," + std::to_string(b.col) + ")";
  }
  return "(" + std::to_string(b.row) + "-" + std::to_string(b.row_end() - 1) + "," +
         std::to_string(b.col) + ")";
}

struct GridGeometry {
  std::vector<std::uint32_t> row_cuts;
  std::vector<std::uint32_t> col_cuts;
  std::vector<Region> region_of_row;
  // Coarse batch row of each fine row band, -1 outside the batch region.
  std::vector<int> sub_row_parent;

  std::uint32_t rows() const noexcept { return static_cast<std::uint32_t>(row_cuts.size() - 1); }
  std::uint32_t cols() const noexcept { return static_cast<std::uint32_t>(col_cuts.size() - 1); }
};

// Rating matrix re-bucketed so that each block's triples are contiguous.
// Blocks are laid out column-major, so any BlockId (a vertical run of fine
// blocks in one column band) is one contiguous range.
class BlockGrid {
 public:
  BlockGrid() = default;

  std::uint32_t m() const noexcept { return _m; }
  std::uint32_t n() const noexcept { return _n; }
  std::size_t nnz() const noexcept { return _triples.size(); }
  std::uint32_t rows() const noexcept { return _geometry.rows(); }
  std::uint32_t cols() const noexcept { return _geometry.cols(); }
  const GridGeometry& geometry() const noexcept { return _geometry; }
  std::span<const RatingTriple> triples() const noexcept { return _triples; }

  std::size_t block_nnz(std::uint32_t row, std::uint32_t col) const {
    auto idx = flat(row, col);
    return _offsets[idx + 1] - _offsets[idx];
  }

  std::size_t block_nnz(const BlockId& b) const { return block_triples(b).size(); }

  std::span<const RatingTriple> block_triples(const BlockId& b) const {
    if (b.row_count == 0 || b.row_end() > rows() || b.col >= cols()) {
      throw Error("block outside the grid");
    }
    auto first = _offsets[flat(b.row, b.col)];
    auto last = _offsets[flat(b.row_end() - 1, b.col) + 1];
    return std::span<const RatingTriple>(_triples).subspan(first, last - first);
  }

  // Matrix row range [first, last) covered by the block.
  std::pair<std::uint32_t, std::uint32_t> row_span(const BlockId& b) const {
    return {_geometry.row_cuts[b.row], _geometry.row_cuts[b.row_end()]};
  }

  std::pair<std::uint32_t, std::uint32_t> col_span(const BlockId& b) const {
    return {_geometry.col_cuts[b.col], _geometry.col_cuts[b.col + 1]};
  }

  Region region_of_row(std::uint32_t row) const { return _geometry.region_of_row.at(row); }

  // Band lookup by binary search over the cuts.
  std::uint32_t row_band_of(std::uint32_t u) const { return band_of(_geometry.row_cuts, u); }
  std::uint32_t col_band_of(std::uint32_t v) const { return band_of(_geometry.col_cuts, v); }

  friend BlockGrid build_grid(const SparseMatrix& matrix, GridGeometry geometry);

 private:
  std::size_t flat(std::uint32_t row, std::uint32_t col) const {
    return static_cast<std::size_t>(col) * rows() + row;
  }

  static std::uint32_t band_of(const std::vector<std::uint32_t>& cuts, std::uint32_t x) {
    auto it = std::upper_bound(cuts.begin(), cuts.end(), x);
    return static_cast<std::uint32_t>(it - cuts.begin() - 1);
  }

  std::uint32_t _m{0};
  std::uint32_t _n{0};
  GridGeometry _geometry;
  std::vector<std::size_t> _offsets;
  std::vector<RatingTriple> _triples;
};

namespace detail {

inline void check_cuts(const std::vector<std::uint32_t>& cuts, std::uint32_t extent, const char* axis) {
  if (cuts.size() < 2 || cuts.front() != 0 || cuts.back() != extent) {
    throw InvalidPlan(std::string(axis) + " cuts must start at 0 and end at the matrix extent");
  }
  for (std::size_t i = 1; i < cuts.size(); ++i) {
    if (cuts[i] <= cuts[i - 1]) {
      throw InvalidPlan(std::string(axis) + " cuts must be strictly ascending");
    }
  }
}

}  // namespace detail

inline void validate_geometry(const GridGeometry& g, std::uint32_t m, std::uint32_t n) {
  detail::check_cuts(g.row_cuts, m, "row");
  detail::check_cuts(g.col_cuts, n, "column");
  if (g.region_of_row.size() != g.rows() || g.sub_row_parent.size() != g.rows()) {
    throw InvalidPlan("region and sub-row tables must have one entry per row band");
  }
  // Sub-rows of a coarse row: contiguous, inside the batch region, equal width
  // up to a front-loaded remainder of one row.
  std::uint32_t r = 0;
  while (r < g.rows()) {
    int parent = g.sub_row_parent[r];
    if (parent < 0) {
      ++r;
      continue;
    }
    std::uint32_t end = r;
    std::uint32_t widest = 0;
    std::uint32_t narrowest = UINT32_MAX;
    while (end < g.rows() && g.sub_row_parent[end] == parent) {
      if (g.region_of_row[end] != Region::batch) {
        throw InvalidPlan("sub-rows must lie in the batch region");
      }
      auto width = g.row_cuts[end + 1] - g.row_cuts[end];
      widest = std::max(widest, width);
      narrowest = std::min(narrowest, width);
      ++end;
    }
    if (widest - narrowest > 1) {
      throw InvalidPlan("sub-rows of a coarse batch row must have equal width");
    }
    for (std::uint32_t later = end; later < g.rows(); ++later) {
      if (g.sub_row_parent[later] == parent) {
        throw InvalidPlan("sub-rows of a coarse batch row must be contiguous");
      }
    }
    r = end;
  }
}

// Plain grid: one region, no sub-rows.
inline GridGeometry simple_geometry(std::vector<std::uint32_t> row_cuts, std::vector<std::uint32_t> col_cuts,
                                    Region region = Region::stream) {
  GridGeometry g;
  g.row_cuts = std::move(row_cuts);
  g.col_cuts = std::move(col_cuts);
  g.region_of_row.assign(g.row_cuts.empty() ? 0 : g.row_cuts.size() - 1, region);
  g.sub_row_parent.assign(g.region_of_row.size(), -1);
  return g;
}

// Stable counting sort of the triples into column-major block order.
inline BlockGrid build_grid(const SparseMatrix& matrix, GridGeometry geometry) {
  validate_geometry(geometry, matrix.m, matrix.n);
  BlockGrid grid;
  grid._m = matrix.m;
  grid._n = matrix.n;
  grid._geometry = std::move(geometry);

  const auto rows = grid.rows();
  const auto cols = grid.cols();
  std::vector<std::uint32_t> row_band(matrix.m);
  for (std::uint32_t b = 0; b < rows; ++b) {
    std::fill(row_band.begin() + grid._geometry.row_cuts[b], row_band.begin() + grid._geometry.row_cuts[b + 1], b);
  }
  std::vector<std::uint32_t> col_band(matrix.n);
  for (std::uint32_t b = 0; b < cols; ++b) {
    std::fill(col_band.begin() + grid._geometry.col_cuts[b], col_band.begin() + grid._geometry.col_cuts[b + 1], b);
  }

  std::vector<std::size_t> block_of(matrix.nnz());
  grid._offsets.assign(static_cast<std::size_t>(rows) * cols + 1, 0);
  for (std::size_t i = 0; i < matrix.nnz(); ++i) {
    const auto& t = matrix.triples[i];
    if (t.u >= matrix.m || t.v >= matrix.n) {
      throw Error("triple index out of range");
    }
    block_of[i] = grid.flat(row_band[t.u], col_band[t.v]);
    ++grid._offsets[block_of[i] + 1];
  }
  for (std::size_t b = 1; b < grid._offsets.size(); ++b) {
    grid._offsets[b] += grid._offsets[b - 1];
  }
  std::vector<std::size_t> cursor(grid._offsets.begin(), grid._offsets.end() - 1);
  grid._triples.resize(matrix.nnz());
  for (std::size_t i = 0; i < matrix.nnz(); ++i) {
    grid._triples[cursor[block_of[i]]++] = matrix.triples[i];
  }
  return grid;
}

inline BlockGrid build_grid(const SparseMatrix& matrix, std::vector<std::uint32_t> row_cuts,
                            std::vector<std::uint32_t> col_cuts) {
  return build_grid(matrix, simple_geometry(std::move(row_cuts), std::move(col_cuts)));
}

// ----------------------------------------------------------------------------
// Binary triple cache: "HMF1", u64 m, n, nnz, then (u32 u, u32 v, f32 r) records.

inline constexpr char cache_magic[4] = {'H', 'M', 'F', '1'};

inline void write_triples(std::ostream& os, std::uint32_t m, std::uint32_t n, std::span<const RatingTriple> triples) {
  os.write(cache_magic, 4);
  detail::write_le<std::uint64_t>(os, m);
  detail::write_le<std::uint64_t>(os, n);
  detail::write_le<std::uint64_t>(os, triples.size());
  for (const auto& t : triples) {
    detail::write_le(os, t.u);
    detail::write_le(os, t.v);
    detail::write_le(os, t.r);
  }
}

inline void save_cache(const std::string& path, const BlockGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw Error("cannot write cache: " + path);
  }
  write_triples(os, grid.m(), grid.n(), grid.triples());
}

inline void save_cache(const std::string& path, const SparseMatrix& matrix) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw Error("cannot write cache: " + path);
  }
  write_triples(os, matrix.m, matrix.n, matrix.triples);
}

// The cache carries dense indices only; remap tables are not restored.
inline SparseMatrix load_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw Error("cannot open cache: " + path);
  }
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, cache_magic)) {
    throw Error("not an HMF1 cache: " + path);
  }
  SparseMatrix matrix;
  auto m = detail::read_le<std::uint64_t>(is);
  auto n = detail::read_le<std::uint64_t>(is);
  auto nnz = detail::read_le<std::uint64_t>(is);
  if (m > UINT32_MAX || n > UINT32_MAX) {
    throw Error("cache dimensions too large");
  }
  matrix.m = static_cast<std::uint32_t>(m);
  matrix.n = static_cast<std::uint32_t>(n);
  matrix.triples.resize(nnz);
  for (auto& t : matrix.triples) {
    t.u = detail::read_le<std::uint32_t>(is);
    t.v = detail::read_le<std::uint32_t>(is);
    t.r = detail::read_le<float>(is);
  }
  matrix.validate();
  return matrix;
}

}  // namespace hmf
