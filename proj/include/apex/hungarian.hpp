#pragma once

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <vector>

namespace apex {

// Minimum-cost assignment on a rectangular cost matrix (Jonker-Volgenant style
// shortest augmenting paths, O(n^2 m)). Returns row -> column, -1 for rows
// left unassigned when rows > cols.
inline std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const int nr = static_cast<int>(cost.size());
  if (nr == 0) return {};
  const int nc = static_cast<int>(cost[0].size());
  for (const auto& row : cost)
    if (static_cast<int>(row.size()) != nc) throw std::invalid_argument("ragged cost matrix");

  // pad to square with large-but-finite costs so every row can match a dummy
  const int n = std::max(nr, nc);
  double big = 0;
  for (const auto& row : cost)
    for (double v : row) big = std::max(big, std::abs(v));
  big = big * n + 1.0;
  auto at = [&](int r, int c) -> double { return (r < nr && c < nc) ? cost[r][c] : big; };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);  // p[col] = row matched to col (1-based)
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  std::vector<int> row_to_col(nr, -1);
  for (int j = 1; j <= n; ++j) {
    const int r = p[j] - 1;
    if (r < nr && j - 1 < nc) row_to_col[r] = j - 1;
  }
  return row_to_col;
}

inline double assignment_cost(const std::vector<std::vector<double>>& cost,
                              const std::vector<int>& row_to_col) {
  double total = 0;
  for (size_t r = 0; r < row_to_col.size(); ++r)
    if (row_to_col[r] >= 0) total += cost[r][row_to_col[r]];
  return total;
}

}  // namespace apex
