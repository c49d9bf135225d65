#include "deformcast/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "deformcast/error.hpp"

namespace deformcast::tabular {

TabularDataset TabularDataset::subset(std::span<const std::size_t> rows) const {
  TabularDataset out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.feature_names = feature_names;
  out.pixel.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    out.x.row(static_cast<Eigen::Index>(i)) = x.row(r);
    out.y(static_cast<Eigen::Index>(i)) = y(r);
    out.pixel.push_back(pixel.empty() ? rows[i] : pixel[rows[i]]);
  }
  return out;
}

std::vector<std::string> lag_feature_names(std::size_t t_in) {
  std::vector<std::string> names;
  names.reserve(t_in);
  for (std::size_t j = 0; j < t_in; ++j) names.push_back("t-" + std::to_string(t_in - j));
  return names;
}

TabularDataset tensor_to_table(const grid::SpatioTemporalTensor& x, const grid::DisplacementMap& y) {
  if (x.steps.empty()) throw Error(ErrorCode::EmptyInput, "tensor has no steps");
  if (!(y.spec == x.spec) || y.values.size() != x.spec.cells()) {
    throw Error(ErrorCode::SpecMismatch, "target map grid differs from the input tensor grid");
  }
  const std::size_t n = x.spec.cells();
  const std::size_t t = x.steps.size();
  TabularDataset d;
  d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t));
  d.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < t; ++j) {
    const auto& values = x.steps[j].values;
    for (std::size_t k = 0; k < n; ++k) d.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = values[k];
  }
  for (std::size_t k = 0; k < n; ++k) d.y(static_cast<Eigen::Index>(k)) = y.values[k];
  d.feature_names = lag_feature_names(t);
  d.pixel.resize(n);
  std::iota(d.pixel.begin(), d.pixel.end(), std::size_t{0});
  return d;
}

grid::DisplacementMap table_to_map(std::span<const double> predictions, const grid::GridSpec& spec,
                                   std::size_t epoch_index) {
  if (predictions.size() != spec.cells()) {
    throw Error(ErrorCode::ShapeMismatch, std::to_string(predictions.size()) + " predictions for a grid of " +
                                              std::to_string(spec.cells()) + " cells");
  }
  return grid::DisplacementMap{spec, {predictions.begin(), predictions.end()}, {}, epoch_index};
}

Split split_train_val(const TabularDataset& d, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "val_fraction must lie in (0, 1)");
  }
  const std::size_t n = d.rows();
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {d.subset(train), d.subset(val)};
}

}  // namespace deformcast::tabular
