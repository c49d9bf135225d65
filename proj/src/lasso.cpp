#include "deformcast/lasso.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "deformcast/error.hpp"
#include "deformcast/json_io.hpp"

namespace deformcast::tabular {
namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_features(const LinearModel& m, std::size_t cols) {
  if (cols != m.weights.size()) {
    throw Error(ErrorCode::FeatureCountMismatch, "input has " + std::to_string(cols) + " features, model expects " +
                                                     std::to_string(m.weights.size()));
  }
}

}  // namespace

void LassoConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw Error(ErrorCode::InvalidConfig, "lasso.alpha must be >= 0");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "lasso.learning_rate must be > 0");
  if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "lasso.epochs must be at least 1");
}

void to_json(nlohmann::json& j, const LassoConfig& c) {
  j = {{"alpha", c.alpha}, {"learning_rate", c.learning_rate}, {"epochs", c.epochs}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, LassoConfig& c) {
  const LassoConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
}

std::vector<double> LinearModel::raw_weights() const {
  std::vector<double> out(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) out[j] = target_std * weights[j] / feature_stds[j];
  return out;
}

double LinearModel::raw_intercept() const {
  double shift = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) shift -= weights[j] * feature_means[j] / feature_stds[j];
  return target_mean + target_std * shift;
}

LinearModel lasso_train(const TabularDataset& d, const LassoConfig& config, LassoHistory* history) {
  config.validate();
  const std::size_t n = d.rows(), p = d.features();
  if (n == 0) throw Error(ErrorCode::EmptyInput, "lasso needs at least one row");
  const auto nd = static_cast<double>(n);

  LinearModel m;
  m.feature_names = d.feature_names;
  m.feature_means.resize(p);
  m.feature_stds.resize(p);
  std::vector<bool> active(p);
  Matrix z(d.x.rows(), d.x.cols());
  for (std::size_t j = 0; j < p; ++j) {
    const auto col = d.x.col(static_cast<Eigen::Index>(j));
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / nd);
    active[j] = sd > 0.0;
    m.feature_means[j] = mean;
    m.feature_stds[j] = active[j] ? sd : 1.0;
    z.col(static_cast<Eigen::Index>(j)) = (col.array() - mean) / m.feature_stds[j];
  }
  m.target_mean = d.y.mean();
  const double ysd = std::sqrt((d.y.array() - m.target_mean).square().sum() / nd);
  m.target_std = ysd > 0.0 ? ysd : 1.0;
  const Vector t = (d.y.array() - m.target_mean) / m.target_std;

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> init(-0.01, 0.01);
  Vector w = Vector::Zero(static_cast<Eigen::Index>(p));
  for (std::size_t j = 0; j < p; ++j) {
    const double draw = init(rng);
    if (active[j]) w(static_cast<Eigen::Index>(j)) = draw;
  }
  double b = 0.0;

  // Adam state; index p holds the bias.
  Vector mom = Vector::Zero(static_cast<Eigen::Index>(p + 1));
  Vector vel = Vector::Zero(static_cast<Eigen::Index>(p + 1));
  Vector grad(static_cast<Eigen::Index>(p + 1));
  LassoHistory h;
  h.objective.reserve(config.epochs);
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const Vector r = (z * w).array() + b - t.array();
    h.objective.push_back(r.squaredNorm() / nd + config.alpha * w.lpNorm<1>());
    grad.head(static_cast<Eigen::Index>(p)) = (2.0 / nd) * (z.transpose() * r);
    for (std::size_t j = 0; j < p; ++j) {
      const auto k = static_cast<Eigen::Index>(j);
      grad(k) = active[j] ? grad(k) + config.alpha * sign0(w(k)) : 0.0;
    }
    grad(static_cast<Eigen::Index>(p)) = 2.0 * r.mean();

    b1t *= kAdamBeta1;
    b2t *= kAdamBeta2;
    const double lr = config.learning_rate * (1.0 - static_cast<double>(epoch) / static_cast<double>(config.epochs));
    mom = kAdamBeta1 * mom + (1.0 - kAdamBeta1) * grad;
    vel = kAdamBeta2 * vel + (1.0 - kAdamBeta2) * grad.cwiseAbs2();
    const Vector step = lr * (mom / (1.0 - b1t)).array() / ((vel / (1.0 - b2t)).array().sqrt() + kAdamEpsilon);
    w -= step.head(static_cast<Eigen::Index>(p));
    b -= step(static_cast<Eigen::Index>(p));
  }
  m.weights.assign(w.data(), w.data() + p);
  m.bias = b;
  if (history != nullptr) *history = std::move(h);
  return m;
}

Vector lasso_predict(const LinearModel& m, const Matrix& x) {
  check_features(m, static_cast<std::size_t>(x.cols()));
  Vector out(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double s = m.bias;
    for (std::size_t j = 0; j < m.weights.size(); ++j) {
      s += m.weights[j] * (x(i, static_cast<Eigen::Index>(j)) - m.feature_means[j]) / m.feature_stds[j];
    }
    out(i) = m.target_mean + m.target_std * s;
  }
  return out;
}

void to_json(nlohmann::json& j, const LinearModel& m) {
  j = {{"format", "deformcast-lasso"},       {"weights", m.weights},           {"bias", m.bias},
       {"feature_means", m.feature_means},   {"feature_stds", m.feature_stds}, {"target_mean", m.target_mean},
       {"target_std", m.target_std},         {"feature_names", m.feature_names}};
}

void from_json(const nlohmann::json& j, LinearModel& m) {
  m.weights = j.at("weights").get<std::vector<double>>();
  m.bias = j.at("bias").get<double>();
  m.feature_means = j.at("feature_means").get<std::vector<double>>();
  m.feature_stds = j.at("feature_stds").get<std::vector<double>>();
  m.target_mean = j.at("target_mean").get<double>();
  m.target_std = j.at("target_std").get<double>();
  m.feature_names = j.value("feature_names", std::vector<std::string>{});
  if (m.feature_means.size() != m.weights.size() || m.feature_stds.size() != m.weights.size()) {
    throw Error(ErrorCode::FormatError, "linear model scaler lengths differ from the weight count");
  }
  for (const double s : m.feature_stds) {
    if (!(s > 0.0)) throw Error(ErrorCode::FormatError, "linear model feature_stds must be positive");
  }
}

void save_linear_model(const LinearModel& m, const std::filesystem::path& path) {
  detail::write_json_file(path, nlohmann::json(m));
}

LinearModel load_linear_model(const std::filesystem::path& path) {
  try {
    return detail::read_json_file(path).get<LinearModel>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, "'" + path.string() + "': " + e.what());
  }
}

}  // namespace deformcast::tabular
