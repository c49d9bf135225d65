#include "deformcast/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deformcast/error.hpp"
#include "deformcast/json_io.hpp"

namespace deformcast::explain {
namespace {

using tabular::DecisionTree;
using tabular::TreeNode;

void check_row(const TreeEnsemble& m, std::span<const double> row) {
  if (row.size() != m.feature_count) {
    throw Error(ErrorCode::FeatureCountMismatch, "row has " + std::to_string(row.size()) + " features, model expects " +
                                                     std::to_string(m.feature_count));
  }
}

void check_covers(const DecisionTree& t) {
  for (const auto& n : t.nodes) {
    if (n.is_leaf()) continue;
    if (!(n.cover > 0.0) || !(t.nodes[n.left].cover > 0.0) || !(t.nodes[n.right].cover > 0.0)) {
      throw Error(ErrorCode::ZeroCover, "tree node with non-positive cover");
    }
  }
}

double tree_expectation(const DecisionTree& t, std::size_t k) {
  const TreeNode& n = t.nodes[k];
  if (n.is_leaf()) return n.leaf_value;
  return (t.nodes[n.left].cover * tree_expectation(t, n.left) + t.nodes[n.right].cover * tree_expectation(t, n.right)) /
         n.cover;
}

// --- path-dependent recursion -----------------------------------------------

struct PathElement {
  int feature;
  double zero_fraction;  // share of cover flowing this way when the feature is absent
  double one_fraction;   // 1 when the row itself flows this way, else 0
  double weight;
};

using Path = std::vector<PathElement>;

void extend(Path& path, double zero_fraction, double one_fraction, int feature) {
  const std::size_t depth = path.size();
  path.push_back({feature, zero_fraction, one_fraction, depth == 0 ? 1.0 : 0.0});
  const auto d1 = static_cast<double>(depth + 1);
  for (std::size_t ii = depth; ii-- > 0;) {
    path[ii + 1].weight += one_fraction * path[ii].weight * static_cast<double>(ii + 1) / d1;
    path[ii].weight = zero_fraction * path[ii].weight * static_cast<double>(depth - ii) / d1;
  }
}

void unwind(Path& path, std::size_t index) {
  const std::size_t depth = path.size() - 1;
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const auto d1 = static_cast<double>(depth + 1);
  double next = path[depth].weight;
  for (std::size_t ii = depth; ii-- > 0;) {
    if (one != 0.0) {
      const double tmp = path[ii].weight;
      path[ii].weight = next * d1 / (static_cast<double>(ii + 1) * one);
      next = tmp - path[ii].weight * zero * static_cast<double>(depth - ii) / d1;
    } else {
      path[ii].weight = path[ii].weight * d1 / (zero * static_cast<double>(depth - ii));
    }
  }
  for (std::size_t ii = index; ii < depth; ++ii) {
    path[ii].feature = path[ii + 1].feature;
    path[ii].zero_fraction = path[ii + 1].zero_fraction;
    path[ii].one_fraction = path[ii + 1].one_fraction;
  }
  path.pop_back();
}

// Total weight of the path with element `index` removed, without modifying it.
double unwound_sum(const Path& path, std::size_t index) {
  const std::size_t depth = path.size() - 1;
  const double one = path[index].one_fraction;
  const double zero = path[index].zero_fraction;
  const auto d1 = static_cast<double>(depth + 1);
  double next = path[depth].weight;
  double total = 0.0;
  for (std::size_t ii = depth; ii-- > 0;) {
    if (one != 0.0) {
      const double tmp = next * d1 / (static_cast<double>(ii + 1) * one);
      total += tmp;
      next = path[ii].weight - tmp * zero * static_cast<double>(depth - ii) / d1;
    } else {
      total += path[ii].weight / zero / (static_cast<double>(depth - ii) / d1);
    }
  }
  return total;
}

void recurse(const DecisionTree& t, std::span<const double> row, std::size_t k, Path path, double zero_fraction,
             double one_fraction, int feature, std::vector<double>& phi, double scale) {
  extend(path, zero_fraction, one_fraction, feature);
  const TreeNode& n = t.nodes[k];
  if (n.is_leaf()) {
    for (std::size_t i = 1; i < path.size(); ++i) {
      const double w = unwound_sum(path, i);
      const PathElement& el = path[i];
      phi[static_cast<std::size_t>(el.feature)] += w * (el.one_fraction - el.zero_fraction) * n.leaf_value * scale;
    }
    return;
  }
  const bool go_left = row[static_cast<std::size_t>(n.feature_index)] <= n.threshold;
  const std::size_t hot = go_left ? n.left : n.right;
  const std::size_t cold = go_left ? n.right : n.left;
  double incoming_zero = 1.0, incoming_one = 1.0;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (path[i].feature == n.feature_index) {
      incoming_zero = path[i].zero_fraction;
      incoming_one = path[i].one_fraction;
      unwind(path, i);
      break;
    }
  }
  recurse(t, row, hot, path, t.nodes[hot].cover / n.cover * incoming_zero, incoming_one, n.feature_index, phi, scale);
  recurse(t, row, cold, path, t.nodes[cold].cover / n.cover * incoming_zero, 0.0, n.feature_index, phi, scale);
}

// --- coalition values -------------------------------------------------------

double tree_coalition(const DecisionTree& t, std::size_t k, std::span<const double> row,
                      const std::vector<bool>& present) {
  const TreeNode& n = t.nodes[k];
  if (n.is_leaf()) return n.leaf_value;
  const auto f = static_cast<std::size_t>(n.feature_index);
  if (present[f]) return tree_coalition(t, row[f] <= n.threshold ? n.left : n.right, row, present);
  return (t.nodes[n.left].cover * tree_coalition(t, n.left, row, present) +
          t.nodes[n.right].cover * tree_coalition(t, n.right, row, present)) /
         n.cover;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& header, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::IoError, "write to '" + path.string() + "' failed");
}

Matrix read_matrix_csv(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) throw Error(ErrorCode::FormatError, "'" + path.string() + "': too few rows");
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(ss, cell, ',')) throw Error(ErrorCode::FormatError, "'" + path.string() + "': short row");
      try {
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::stod(cell);
      } catch (const std::exception&) {
        throw Error(ErrorCode::FormatError, "'" + path.string() + "': non-numeric cell '" + cell + "'");
      }
    }
  }
  return m;
}

}  // namespace

double expected_value(const TreeEnsemble& m) {
  double out = m.base_score;
  for (const auto& t : m.trees) {
    check_covers(t);
    out += m.learning_rate * tree_expectation(t, 0);
  }
  return out;
}

Attribution tree_shap(const TreeEnsemble& m, std::span<const double> row) {
  check_row(m, row);
  Attribution a;
  a.base_value = expected_value(m);
  a.phi.assign(m.feature_count, 0.0);
  for (const auto& t : m.trees) {
    if (t.nodes[0].is_leaf()) continue;
    recurse(t, row, 0, Path{}, 1.0, 1.0, -1, a.phi, m.learning_rate);
  }
  return a;
}

double coalition_value(const TreeEnsemble& m, std::span<const double> row, const std::vector<bool>& present) {
  check_row(m, row);
  double out = m.base_score;
  for (const auto& t : m.trees) {
    check_covers(t);
    out += m.learning_rate * tree_coalition(t, 0, row, present);
  }
  return out;
}

std::vector<double> shap_brute_force(const TreeEnsemble& m, std::span<const double> row) {
  check_row(m, row);
  std::vector<bool> used(m.feature_count, false);
  for (const auto& t : m.trees) {
    for (const auto& n : t.nodes) {
      if (!n.is_leaf()) used[static_cast<std::size_t>(n.feature_index)] = true;
    }
  }
  std::vector<std::size_t> active;
  for (std::size_t f = 0; f < used.size(); ++f) {
    if (used[f]) active.push_back(f);
  }
  if (active.size() > kBruteForceMaxFeatures) {
    throw Error(ErrorCode::TooManyFeatures, std::to_string(active.size()) + " features in use; enumeration supports at most " +
                                                std::to_string(kBruteForceMaxFeatures));
  }
  const std::size_t n = active.size();
  std::vector<double> phi(m.feature_count, 0.0);
  if (n == 0) return phi;

  const std::size_t subsets = std::size_t{1} << n;
  std::vector<double> value(subsets);
  std::vector<bool> present(m.feature_count, false);
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    for (std::size_t b = 0; b < n; ++b) present[active[b]] = ((mask >> b) & 1U) != 0;
    value[mask] = coalition_value(m, row, present);
  }
  // weight[s] = s! (n - s - 1)! / n!
  std::vector<double> factorial(n + 1, 1.0);
  for (std::size_t i = 1; i <= n; ++i) factorial[i] = factorial[i - 1] * static_cast<double>(i);
  std::vector<double> weight(n);
  for (std::size_t s = 0; s < n; ++s) weight[s] = factorial[s] * factorial[n - s - 1] / factorial[n];

  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t bit = std::size_t{1} << b;
    double sum = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if ((mask & bit) != 0) continue;
      sum += weight[static_cast<std::size_t>(std::popcount(mask))] * (value[mask | bit] - value[mask]);
    }
    phi[active[b]] = sum;
  }
  return phi;
}

double ShapReport::prediction(std::size_t i) const {
  return base_value + phi.row(static_cast<Eigen::Index>(i)).sum();
}

ShapReport explain_rows(const TreeEnsemble& m, const Matrix& x, std::size_t k, std::uint64_t seed) {
  if (static_cast<std::size_t>(x.cols()) != m.feature_count) {
    throw Error(ErrorCode::FeatureCountMismatch, "input has " + std::to_string(x.cols()) + " features, model expects " +
                                                     std::to_string(m.feature_count));
  }
  const auto n = static_cast<std::size_t>(x.rows());
  if (n == 0 || k == 0) throw Error(ErrorCode::EmptyInput, "nothing to explain");
  const std::size_t count = std::min(n, k);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (count < n) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(order[i], order[pick(rng)]);
    }
    order.resize(count);
    std::sort(order.begin(), order.end());
  }

  ShapReport r;
  r.base_value = expected_value(m);
  r.feature_names = m.feature_names.size() == m.feature_count ? m.feature_names : tabular::lag_feature_names(m.feature_count);
  r.row_indices = order;
  r.phi.resize(static_cast<Eigen::Index>(count), x.cols());
  r.sample_rows.resize(static_cast<Eigen::Index>(count), x.cols());
  for (std::size_t i = 0; i < count; ++i) {
    const auto src = static_cast<Eigen::Index>(order[i]);
    const auto dst = static_cast<Eigen::Index>(i);
    r.sample_rows.row(dst) = x.row(src);
    const auto a = tree_shap(m, {x.row(src).data(), m.feature_count});
    for (std::size_t j = 0; j < m.feature_count; ++j) r.phi(dst, static_cast<Eigen::Index>(j)) = a.phi[j];
  }
  return r;
}

std::vector<FeatureSummary> shap_summary(const ShapReport& report) {
  if (report.rows() == 0) throw Error(ErrorCode::EmptyInput, "empty SHAP report");
  std::vector<FeatureSummary> out;
  for (Eigen::Index j = 0; j < report.phi.cols(); ++j) {
    FeatureSummary s;
    s.index = static_cast<std::size_t>(j);
    s.feature = s.index < report.feature_names.size() ? report.feature_names[s.index] : "f" + std::to_string(j);
    s.mean_abs_phi = report.phi.col(j).cwiseAbs().mean();
    for (Eigen::Index i = 0; i < report.phi.rows(); ++i) s.points.emplace_back(report.phi(i, j), report.sample_rows(i, j));
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FeatureSummary& a, const FeatureSummary& b) { return a.mean_abs_phi > b.mean_abs_phi; });
  return out;
}

const char* to_string(Direction d) noexcept {
  switch (d) {
    case Direction::Increase: return "increase";
    case Direction::Decrease: return "decrease";
    case Direction::None: break;
  }
  return "none";
}

ForceDecomposition force_decomposition(const ShapReport& report, std::size_t row_index) {
  if (row_index >= report.rows()) {
    throw Error(ErrorCode::IndexOutOfRange,
                "row " + std::to_string(row_index) + " out of range for a report of " + std::to_string(report.rows()));
  }
  ForceDecomposition f;
  f.base_value = report.base_value;
  f.prediction = report.prediction(row_index);
  const auto i = static_cast<Eigen::Index>(row_index);
  for (Eigen::Index j = 0; j < report.phi.cols(); ++j) {
    Contribution c;
    const auto ju = static_cast<std::size_t>(j);
    c.feature = ju < report.feature_names.size() ? report.feature_names[ju] : "f" + std::to_string(j);
    c.value = report.sample_rows(i, j);
    c.phi = report.phi(i, j);
    c.direction = c.phi > 0.0 ? Direction::Increase : (c.phi < 0.0 ? Direction::Decrease : Direction::None);
    f.contributions.push_back(std::move(c));
  }
  std::stable_sort(f.contributions.begin(), f.contributions.end(),
                   [](const Contribution& a, const Contribution& b) { return std::abs(a.phi) > std::abs(b.phi); });
  return f;
}

void write_shap_report(const ShapReport& report, const std::filesystem::path& dir) {
  detail::write_json_file(dir / "shap.json", {{"base_value", report.base_value},
                                              {"feature_names", report.feature_names},
                                              {"K", report.rows()},
                                              {"row_indices", report.row_indices}});
  write_matrix_csv(dir / "shap_phi.csv", report.feature_names, report.phi);
  write_matrix_csv(dir / "shap_values.csv", report.feature_names, report.sample_rows);
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : shap_summary(report)) {
    summary.push_back({{"feature", s.feature}, {"mean_abs_phi", s.mean_abs_phi}});
  }
  detail::write_json_file(dir / "shap_summary.json", summary);
}

ShapReport read_shap_report(const std::filesystem::path& dir) {
  const auto j = detail::read_json_file(dir / "shap.json");
  ShapReport r;
  try {
    r.base_value = j.at("base_value").get<double>();
    r.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    r.row_indices = j.at("row_indices").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, "'" + (dir / "shap.json").string() + "': " + e.what());
  }
  r.phi = read_matrix_csv(dir / "shap_phi.csv", r.row_indices.size(), r.feature_names.size());
  r.sample_rows = read_matrix_csv(dir / "shap_values.csv", r.row_indices.size(), r.feature_names.size());
  return r;
}

}  // namespace deformcast::explain
