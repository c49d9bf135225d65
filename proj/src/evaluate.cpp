#include "deformcast/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "deformcast/error.hpp"
#include "deformcast/json_io.hpp"

namespace deformcast::evaluate {
namespace {

void check_pair(std::span<const double> y, std::span<const double> yhat) {
  if (y.empty()) throw Error(ErrorCode::EmptyInput, "no values to compare");
  if (y.size() != yhat.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "truth has " + std::to_string(y.size()) + " values, prediction " + std::to_string(yhat.size()));
  }
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json bins_json(const BinnedStats& b) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& s : b.bins) {
    nlohmann::json j = {{"lower", s.lower}, {"upper", s.upper}, {"count", s.count}};
    if (s.count > 0) {
      j["mae"] = optional_json(s.mae);
      j["median"] = optional_json(s.median);
      j["q1"] = optional_json(s.q1);
      j["q3"] = optional_json(s.q3);
      j["whisker_low"] = optional_json(s.whisker_low);
      j["whisker_high"] = optional_json(s.whisker_high);
      j["outliers"] = s.outliers;
    }
    bins.push_back(std::move(j));
  }
  return {{"bin_edges", b.bin_edges}, {"bins", std::move(bins)}};
}

nlohmann::json metrics_json(const MetricsRecord& m) { return {{"rmse", m.rmse}, {"mse", m.mse}, {"r2", m.r2}}; }

void open_for_write(std::ofstream& out, const std::filesystem::path& path, bool binary) {
  out.open(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
}

}  // namespace

double mse(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

double rmse(std::span<const double> y, std::span<const double> yhat) { return std::sqrt(mse(y, yhat)); }

double mae(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(yhat[i] - y[i]);
  return s / static_cast<double>(y.size());
}

double r2(std::span<const double> y, std::span<const double> yhat) {
  check_pair(y, yhat);
  if (y.size() < 2) throw Error(ErrorCode::EmptyInput, "r2 needs at least 2 values");
  const double ybar = mean_of(y);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - ybar) * (y[i] - ybar);
  }
  if (ss_tot == 0.0) throw Error(ErrorCode::ZeroVariance, "r2 is undefined for a constant truth vector");
  return 1.0 - ss_res / ss_tot;
}

MetricsRecord metrics(std::span<const double> y, std::span<const double> yhat) {
  MetricsRecord m;
  m.mse = mse(y, yhat);
  m.rmse = std::sqrt(m.mse);
  m.r2 = r2(y, yhat);
  return m;
}

std::vector<double> residuals(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "truth has " + std::to_string(y.size()) + " values, prediction " + std::to_string(yhat.size()));
  }
  std::vector<double> r(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) r[i] = yhat[i] - y[i];
  return r;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "quantile of an empty sample");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

std::vector<std::size_t> assign_bins(std::span<const double> y, std::size_t n_bins, std::vector<double>* edges) {
  if (n_bins < 1) throw Error(ErrorCode::InvalidConfig, "n_bins must be at least 1");
  if (y.empty()) throw Error(ErrorCode::EmptyInput, "no values to bin");
  const auto [lo_it, hi_it] = std::minmax_element(y.begin(), y.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  if (edges != nullptr) {
    edges->resize(n_bins + 1);
    for (std::size_t b = 0; b <= n_bins; ++b) (*edges)[b] = lo + width * static_cast<double>(b);
    edges->back() = hi;
  }
  std::vector<std::size_t> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>(std::floor((y[i] - lo) / width)) : 0;
    out[i] = std::min(b, n_bins - 1);
  }
  return out;
}

BinnedStats binned_stats(std::span<const double> y, std::span<const double> yhat, std::size_t n_bins) {
  if (y.size() != yhat.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "truth has " + std::to_string(y.size()) + " values, prediction " + std::to_string(yhat.size()));
  }
  BinnedStats out;
  const auto bin = assign_bins(y, n_bins, &out.bin_edges);
  std::vector<std::vector<double>> members(n_bins);
  for (std::size_t i = 0; i < y.size(); ++i) members[bin[i]].push_back(yhat[i] - y[i]);
  for (std::size_t b = 0; b < n_bins; ++b) {
    BinStats s;
    s.lower = out.bin_edges[b];
    s.upper = out.bin_edges[b + 1];
    auto& r = members[b];
    s.count = r.size();
    if (!r.empty()) {
      double abs_sum = 0.0;
      for (const double v : r) abs_sum += std::abs(v);
      s.mae = abs_sum / static_cast<double>(r.size());
      std::sort(r.begin(), r.end());
      s.q1 = quantile_sorted(r, 0.25);
      s.median = quantile_sorted(r, 0.5);
      s.q3 = quantile_sorted(r, 0.75);
      const double iqr = *s.q3 - *s.q1;
      const double low_fence = *s.q1 - 1.5 * iqr, high_fence = *s.q3 + 1.5 * iqr;
      for (const double v : r) {
        if (v < low_fence || v > high_fence) {
          s.outliers.push_back(v);
        } else {
          if (!s.whisker_low) s.whisker_low = v;
          s.whisker_high = v;
        }
      }
    }
    out.bins.push_back(std::move(s));
  }
  return out;
}

BinnedStats binned_mae(std::span<const double> y, std::span<const double> yhat, std::size_t n_bins) {
  auto s = binned_stats(y, yhat, n_bins);
  for (auto& b : s.bins) {
    b.median = b.q1 = b.q3 = b.whisker_low = b.whisker_high = std::nullopt;
    b.outliers.clear();
  }
  return s;
}

BinnedStats binned_residual_boxstats(std::span<const double> y, std::span<const double> yhat, std::size_t n_bins) {
  auto s = binned_stats(y, yhat, n_bins);
  for (auto& b : s.bins) b.mae = std::nullopt;
  return s;
}

Rgb diverging_color(double value, double range) {
  const double t = std::clamp(value / range, -1.0, 1.0);
  const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(t))));
  if (t < 0.0) return {fade, fade, 255};
  return {255, fade, fade};
}

std::vector<std::uint8_t> heatmap_pixels(const grid::DisplacementMap& map, double range) {
  if (!(range > 0.0) || !std::isfinite(range)) throw Error(ErrorCode::InvalidConfig, "heatmap range must be > 0");
  std::vector<std::uint8_t> px;
  px.reserve(map.values.size() * 3);
  for (std::size_t k = 0; k < map.values.size(); ++k) {
    const Rgb c = map.is_missing(k) ? Rgb{128, 128, 128} : diverging_color(map.values[k], range);
    px.insert(px.end(), {c.r, c.g, c.b});
  }
  return px;
}

void render_heatmap(const grid::DisplacementMap& map, double range, const std::filesystem::path& path) {
  const auto px = heatmap_pixels(map, range);
  std::ofstream out;
  open_for_write(out, path, true);
  out << "P6 " << map.spec.width << ' ' << map.spec.height << " 255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw Error(ErrorCode::IoError, "write to '" + path.string() + "' failed");
}

Report build_report(const grid::DisplacementMap& truth, const std::vector<NamedMap>& predictions,
                    const ReportOptions& options, const std::filesystem::path& out_dir) {
  for (const auto& p : predictions) {
    if (!(p.map.spec == truth.spec) || p.map.values.size() != truth.values.size()) {
      throw Error(ErrorCode::SpecMismatch, "model '" + p.name + "' grid differs from the truth map");
    }
  }
  for (const auto& p : predictions) {
    for (const std::size_t k : p.validation_pixels) {
      if (k >= truth.values.size()) throw Error(ErrorCode::IndexOutOfRange, "validation pixel out of range");
    }
  }
  Report report;
  report.heatmap_range = options.heatmap_range;
  if (!(report.heatmap_range > 0.0)) {
    for (const double v : truth.values) report.heatmap_range = std::max(report.heatmap_range, std::abs(v));
    if (!(report.heatmap_range > 0.0)) report.heatmap_range = 1.0;
  }

  std::filesystem::create_directories(out_dir);
  render_heatmap(truth, report.heatmap_range, out_dir / "heatmap_truth.ppm");
  nlohmann::json models = nlohmann::json::array();
  for (const auto& p : predictions) {
    ModelReport m;
    m.name = p.name;
    m.full = metrics(truth.values, p.map.values);
    if (!p.validation_pixels.empty()) {
      std::vector<double> yv, pv;
      for (const std::size_t k : p.validation_pixels) {
        yv.push_back(truth.values[k]);
        pv.push_back(p.map.values[k]);
      }
      m.validation = metrics(yv, pv);
    }
    m.bins = binned_stats(truth.values, p.map.values, options.n_bins);

    std::ofstream scatter, resid;
    open_for_write(scatter, out_dir / ("scatter_" + p.name + ".csv"), false);
    open_for_write(resid, out_dir / ("residuals_" + p.name + ".csv"), false);
    scatter << "pixel,true,predicted\n";
    resid << "pixel,true,residual\n";
    grid::DisplacementMap diff = p.map;
    diff.missing.clear();
    for (std::size_t k = 0; k < truth.values.size(); ++k) {
      const double r = p.map.values[k] - truth.values[k];
      diff.values[k] = r;
      scatter << k << ',' << format_double(truth.values[k]) << ',' << format_double(p.map.values[k]) << '\n';
      resid << k << ',' << format_double(truth.values[k]) << ',' << format_double(r) << '\n';
    }
    if (!scatter || !resid) throw Error(ErrorCode::IoError, "writing CSVs for model '" + p.name + "' failed");
    detail::write_json_file(out_dir / ("bins_" + p.name + ".json"), bins_json(m.bins));
    render_heatmap(p.map, report.heatmap_range, out_dir / ("heatmap_" + p.name + ".ppm"));
    render_heatmap(diff, report.heatmap_range, out_dir / ("heatmap_diff_" + p.name + ".ppm"));

    nlohmann::json entry = {{"name", m.name}, {"full", metrics_json(m.full)}};
    if (m.validation) entry["validation"] = metrics_json(*m.validation);
    models.push_back(std::move(entry));
    report.models.push_back(std::move(m));
  }
  detail::write_json_file(out_dir / "metrics.json",
                          {{"heatmap_range", report.heatmap_range}, {"n_bins", options.n_bins}, {"models", models}});
  return report;
}

}  // namespace deformcast::evaluate
