/**
 * @file cnn_lstm.hpp
 * @brief Convolutional encoder + LSTM forecaster with hand-written reverse mode.
 *
 * Each input frame passes through `conv_channels.size()` blocks of
 * convolution (stride 1, zero padding (k - 1) / 2), ReLU and max-pooling.
 * The flattened encodings feed a single-layer LSTM with zero initial state;
 * a linear head maps the final hidden state to an H x W map.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "deformcast/grid.hpp"

namespace deformcast::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct CnnLstmConfig {
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::size_t kernel_size{3};
  std::size_t pool_factor{2};
  std::size_t lstm_hidden{256};
  double learning_rate{1e-3};
  std::size_t epochs{500};
  std::uint64_t seed{42};

  void validate() const;
  /// Height and width must be divisible by pool_factor^blocks.
  void validate_grid(std::size_t height, std::size_t width) const;
};

void to_json(nlohmann::json& j, const CnnLstmConfig& c);
void from_json(const nlohmann::json& j, CnnLstmConfig& c);

struct ConvBlock {
  Matrix kernel;  ///< out x (in * k * k), columns ordered (in, ky, kx)
  Vector bias;
};

/**
 * @brief Network weights for one grid shape.
 *
 * The canonical parameter order (used by flatten(), checkpoints and the
 * gradient checker) is: each conv block's kernel then bias, the LSTM input
 * weights, recurrent weights and bias (rows stacked by gate in i, f, g, o
 * order), then head weights and head bias. Matrices are row-major.
 */
struct NeuralParameters {
  std::size_t height{};
  std::size_t width{};
  std::size_t kernel_size{};
  std::size_t pool_factor{};
  std::vector<ConvBlock> conv;
  Matrix lstm_input;      ///< 4H x F
  Matrix lstm_recurrent;  ///< 4H x H
  Vector lstm_bias;       ///< 4H
  Matrix head_weight;     ///< (height * width) x H
  Vector head_bias;       ///< height * width

  [[nodiscard]] std::size_t hidden() const noexcept { return static_cast<std::size_t>(lstm_recurrent.cols()); }
  [[nodiscard]] std::size_t feature_length() const noexcept { return static_cast<std::size_t>(lstm_input.cols()); }
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] bool all_finite() const;

  /// Views over each tensor's storage in canonical order.
  [[nodiscard]] std::vector<std::span<double>> blocks();
  [[nodiscard]] std::vector<std::span<const double>> blocks() const;
  [[nodiscard]] std::vector<std::string> block_names() const;

  [[nodiscard]] std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
};

/// All-zero parameters shaped for `config` on an height x width grid.
NeuralParameters zero_parameters(const CnnLstmConfig& config, std::size_t height, std::size_t width);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, seeded by config.seed.
NeuralParameters init_parameters(const CnnLstmConfig& config, std::size_t height, std::size_t width);

Vector encode_frame(const NeuralParameters& params, std::span<const double> frame);

grid::DisplacementMap forward(const NeuralParameters& params, const grid::SpatioTemporalTensor& x);

double loss_mse(std::span<const double> prediction, std::span<const double> target);
double loss_mse(const grid::DisplacementMap& prediction, const grid::DisplacementMap& target);

struct LossGradient {
  double loss{};
  NeuralParameters gradient;  ///< same shapes as the parameters
};

/// MSE of forward(params, x) against y and its gradient by reverse-mode differentiation.
LossGradient loss_and_gradient(const NeuralParameters& params, const grid::SpatioTemporalTensor& x,
                               const grid::DisplacementMap& y);

struct TrainingHistory {
  std::vector<double> loss;  ///< loss at the start of each epoch
};

struct TrainResult {
  NeuralParameters params;
  TrainingHistory history;
};

/// Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8) on the single (x, y) sample.
TrainResult train(const CnnLstmConfig& config, const grid::SpatioTemporalTensor& x, const grid::DisplacementMap& y);
/// Continues from given parameters.
TrainResult train(const CnnLstmConfig& config, NeuralParameters init, const grid::SpatioTemporalTensor& x,
                  const grid::DisplacementMap& y);

enum ParameterGroup : unsigned {
  kConvGroup = 1u,
  kLstmGroup = 2u,
  kHeadGroup = 4u,
  kAllGroups = 7u,
};

struct GradientCheckReport {
  double max_relative_error{};
  std::size_t worst_index{};
  std::size_t checked{};
};

/**
 * Compares the analytic gradient with central differences
 * (f(theta + eps) - f(theta - eps)) / 2 eps for every parameter of the
 * selected groups. The relative error per parameter is
 * |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
 *
 * The differences are taken on a separate loop-based forward pass evaluated
 * in long double, so the check also cross-validates the forward pass and the
 * difference quotient resolves gradients far below double rounding noise.
 */
GradientCheckReport gradient_check(const NeuralParameters& params, const grid::SpatioTemporalTensor& x,
                                   const grid::DisplacementMap& y, double epsilon, unsigned groups = kAllGroups);

/// Checkpoint: one line of JSON header, then the little-endian float64 blob in canonical order.
void write_checkpoint(const CnnLstmConfig& config, const NeuralParameters& params, const std::filesystem::path& path);

struct Checkpoint {
  CnnLstmConfig config;
  NeuralParameters params;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace deformcast::nn
