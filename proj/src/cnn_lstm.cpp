#include "deformcast/cnn_lstm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include <nlohmann/json.hpp>

#include "deformcast/binary_io.hpp"
#include "deformcast/error.hpp"

namespace deformcast::nn {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;
constexpr const char* kCheckpointFormat = "deformcast-cnn-lstm";

struct BlockShape {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t height;  // input spatial size of the block
  std::size_t width;
};

std::vector<BlockShape> block_shapes(const NeuralParameters& p) {
  std::vector<BlockShape> shapes;
  std::size_t h = p.height, w = p.width, in = 1;
  for (const auto& b : p.conv) {
    const auto out = static_cast<std::size_t>(b.kernel.rows());
    shapes.push_back({in, out, h, w});
    h /= p.pool_factor;
    w /= p.pool_factor;
    in = out;
  }
  return shapes;
}

void im2col(const Matrix& in, std::size_t h, std::size_t w, std::size_t k, Matrix& cols) {
  const auto channels = static_cast<std::size_t>(in.rows());
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  cols.setZero(static_cast<Eigen::Index>(channels * k * k), static_cast<Eigen::Index>(h * w));
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = in.row(static_cast<Eigen::Index>(c)).data();
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = cols.row(static_cast<Eigen::Index>((c * k + ky) * k + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - dx);
        for (std::ptrdiff_t y = 0; y < sh; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= sh) continue;
          for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) dst[y * sw + x] = src[sy * sw + x + dx];
        }
      }
    }
  }
}

void col2im(const Matrix& dcols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, Matrix& din) {
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  din.setZero(static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(h * w));
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    double* dst = din.row(static_cast<Eigen::Index>(c)).data();
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = dcols.row(static_cast<Eigen::Index>((c * k + ky) * k + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - dx);
        for (std::ptrdiff_t y = 0; y < sh; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= sh) continue;
          for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) dst[sy * sw + x + dx] += src[y * sw + x];
        }
      }
    }
  }
}

struct BlockCache {
  Matrix cols;        // im2col of the block input
  Matrix activation;  // post-ReLU, out x (h * w)
  std::vector<std::size_t> argmax;
  Matrix pooled;  // out x (h / p * w / p)
};

void block_forward(const ConvBlock& block, const BlockShape& s, std::size_t k, std::size_t pool, const Matrix& in,
                   BlockCache& cache) {
  im2col(in, s.height, s.width, k, cache.cols);
  cache.activation.noalias() = block.kernel * cache.cols;
  cache.activation.colwise() += block.bias;
  cache.activation = cache.activation.cwiseMax(0.0);

  const std::size_t oh = s.height / pool, ow = s.width / pool;
  cache.pooled.resize(static_cast<Eigen::Index>(s.out_channels), static_cast<Eigen::Index>(oh * ow));
  cache.argmax.resize(s.out_channels * oh * ow);
  for (std::size_t c = 0; c < s.out_channels; ++c) {
    const double* act = cache.activation.row(static_cast<Eigen::Index>(c)).data();
    double* out = cache.pooled.row(static_cast<Eigen::Index>(c)).data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best_idx = (oy * pool) * s.width + ox * pool;
        double best = act[best_idx];
        for (std::size_t py = 0; py < pool; ++py) {
          for (std::size_t px = 0; px < pool; ++px) {
            const std::size_t idx = (oy * pool + py) * s.width + ox * pool + px;
            if (act[idx] > best) {
              best = act[idx];
              best_idx = idx;
            }
          }
        }
        out[oy * ow + ox] = best;
        cache.argmax[c * oh * ow + oy * ow + ox] = best_idx;
      }
    }
  }
}

// Runs all blocks on one frame; caches[b] keeps what backward needs.
void encode(const NeuralParameters& p, const std::vector<BlockShape>& shapes, std::span<const double> frame,
            std::vector<BlockCache>& caches) {
  caches.resize(p.conv.size());
  Matrix input = Eigen::Map<const Matrix>(frame.data(), 1, static_cast<Eigen::Index>(frame.size()));
  for (std::size_t b = 0; b < p.conv.size(); ++b) {
    block_forward(p.conv[b], shapes[b], p.kernel_size, p.pool_factor, b == 0 ? input : caches[b - 1].pooled,
                  caches[b]);
  }
}

// dpooled: gradient w.r.t. the last block's pooled output.
void encode_backward(const NeuralParameters& p, const std::vector<BlockShape>& shapes,
                     const std::vector<BlockCache>& caches, Matrix dpooled, NeuralParameters& grad) {
  for (std::size_t bi = p.conv.size(); bi-- > 0;) {
    const auto& s = shapes[bi];
    const auto& cache = caches[bi];
    Matrix dact = Matrix::Zero(static_cast<Eigen::Index>(s.out_channels), static_cast<Eigen::Index>(s.height * s.width));
    const std::size_t pooled_cells = static_cast<std::size_t>(dpooled.cols());
    for (std::size_t c = 0; c < s.out_channels; ++c) {
      const double* src = dpooled.row(static_cast<Eigen::Index>(c)).data();
      const double* act = cache.activation.row(static_cast<Eigen::Index>(c)).data();
      double* dst = dact.row(static_cast<Eigen::Index>(c)).data();
      for (std::size_t i = 0; i < pooled_cells; ++i) {
        const std::size_t idx = cache.argmax[c * pooled_cells + i];
        if (act[idx] > 0.0) dst[idx] += src[i];
      }
    }
    grad.conv[bi].kernel.noalias() += dact * cache.cols.transpose();
    grad.conv[bi].bias += dact.rowwise().sum();
    if (bi == 0) break;
    const Matrix dcols = p.conv[bi].kernel.transpose() * dact;
    col2im(dcols, s.in_channels, s.height, s.width, p.kernel_size, dpooled);
  }
}

Vector sigmoid(const Vector& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

struct LstmTrace {
  std::vector<Vector> i, f, g, o, c, tanh_c, h;  // h[0] and c[0] are the zero initial state
};

void check_input(const NeuralParameters& p, const grid::SpatioTemporalTensor& x) {
  if (x.spec.height != p.height || x.spec.width != p.width) {
    throw Error(ErrorCode::ShapeMismatch, "tensor grid " + std::to_string(x.spec.height) + "x" +
                                              std::to_string(x.spec.width) + " does not match parameters " +
                                              std::to_string(p.height) + "x" + std::to_string(p.width));
  }
  if (x.steps.empty()) throw Error(ErrorCode::EmptyInput, "tensor has no time steps");
  for (const auto& step : x.steps) {
    if (step.values.size() != p.height * p.width) throw Error(ErrorCode::ShapeMismatch, "frame size mismatch");
  }
}

// Encodes every frame, runs the LSTM and the head. Fills caches when requested.
Vector run_forward(const NeuralParameters& p, const grid::SpatioTemporalTensor& x,
                   std::vector<std::vector<BlockCache>>* frame_caches, Matrix* features, LstmTrace* trace) {
  check_input(p, x);
  const auto shapes = block_shapes(p);
  const std::size_t steps = x.length();
  const std::size_t hidden = p.hidden();

  Matrix feats(static_cast<Eigen::Index>(p.feature_length()), static_cast<Eigen::Index>(steps));
  std::vector<BlockCache> scratch;
  if (frame_caches) frame_caches->resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    auto& caches = frame_caches ? (*frame_caches)[t] : scratch;
    encode(p, shapes, x.steps[t].values, caches);
    const Matrix& pooled = caches.back().pooled;
    feats.col(static_cast<Eigen::Index>(t)) = Eigen::Map<const Vector>(pooled.data(), pooled.size());
  }

  Matrix zx = p.lstm_input * feats;
  zx.colwise() += p.lstm_bias;
  const auto H = static_cast<Eigen::Index>(hidden);
  Vector h = Vector::Zero(H), c = Vector::Zero(H);
  if (trace) {
    *trace = {};
    trace->h.push_back(h);
    trace->c.push_back(c);
  }
  for (std::size_t t = 0; t < steps; ++t) {
    const Vector z = zx.col(static_cast<Eigen::Index>(t)) + p.lstm_recurrent * h;
    const Vector gi = sigmoid(z.segment(0, H));
    const Vector gf = sigmoid(z.segment(H, H));
    const Vector gg = z.segment(2 * H, H).array().tanh().matrix();
    const Vector go = sigmoid(z.segment(3 * H, H));
    c = gf.cwiseProduct(c) + gi.cwiseProduct(gg);
    const Vector tc = c.array().tanh().matrix();
    h = go.cwiseProduct(tc);
    if (trace) {
      trace->i.push_back(gi);
      trace->f.push_back(gf);
      trace->g.push_back(gg);
      trace->o.push_back(go);
      trace->c.push_back(c);
      trace->tanh_c.push_back(tc);
      trace->h.push_back(h);
    }
  }
  if (features) *features = std::move(feats);
  return p.head_weight * h + p.head_bias;
}

NeuralParameters zeros_like(const NeuralParameters& p) {
  NeuralParameters z = p;
  for (auto block : z.blocks()) std::fill(block.begin(), block.end(), 0.0);
  return z;
}

nlohmann::json grid_shape_json(const NeuralParameters& p) {
  return {{"h", p.height}, {"w", p.width}};
}

// Loop-based forward pass in extended precision, independent of the Eigen
// implementation above. Finite differences of this loss are the oracle the
// gradient checker compares against; the extra precision keeps the
// difference quotient's rounding floor well below the gradients being checked.
using Extended = long double;

Extended reference_loss(const NeuralParameters& shape, const std::vector<Extended>& theta,
                        const grid::SpatioTemporalTensor& x, const grid::DisplacementMap& y) {
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& b : shape.blocks()) {
    offsets.push_back(total);
    total += b.size();
  }
  const std::size_t k = shape.kernel_size;
  const std::size_t pool = shape.pool_factor;
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t hidden = shape.hidden();
  const std::size_t features = shape.feature_length();

  std::vector<std::vector<Extended>> encoded;
  for (const auto& step : x.steps) {
    std::size_t channels = 1, h = shape.height, w = shape.width;
    std::vector<Extended> act(step.values.begin(), step.values.end());
    for (std::size_t b = 0; b < shape.conv.size(); ++b) {
      const auto out_channels = static_cast<std::size_t>(shape.conv[b].kernel.rows());
      const std::size_t kernel_off = offsets[2 * b];
      const std::size_t bias_off = offsets[2 * b + 1];
      std::vector<Extended> conv(out_channels * h * w);
      for (std::size_t o = 0; o < out_channels; ++o) {
        for (std::size_t yy = 0; yy < h; ++yy) {
          for (std::size_t xx = 0; xx < w; ++xx) {
            Extended sum = theta[bias_off + o];
            for (std::size_t c = 0; c < channels; ++c) {
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const auto sy = static_cast<std::ptrdiff_t>(yy + ky) - pad;
                  const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
                  if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w)) {
                    continue;
                  }
                  sum += theta[kernel_off + ((o * channels + c) * k + ky) * k + kx] *
                         act[(c * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
                }
              }
            }
            conv[(o * h + yy) * w + xx] = sum > 0 ? sum : Extended{0};
          }
        }
      }
      const std::size_t oh = h / pool, ow = w / pool;
      std::vector<Extended> pooled(out_channels * oh * ow);
      for (std::size_t o = 0; o < out_channels; ++o) {
        for (std::size_t py = 0; py < oh; ++py) {
          for (std::size_t px = 0; px < ow; ++px) {
            Extended best = conv[(o * h + py * pool) * w + px * pool];
            for (std::size_t dy = 0; dy < pool; ++dy) {
              for (std::size_t dx = 0; dx < pool; ++dx) {
                best = std::max(best, conv[(o * h + py * pool + dy) * w + px * pool + dx]);
              }
            }
            pooled[(o * oh + py) * ow + px] = best;
          }
        }
      }
      act = std::move(pooled);
      channels = out_channels;
      h = oh;
      w = ow;
    }
    encoded.push_back(std::move(act));
  }

  const std::size_t nb = shape.conv.size();
  const std::size_t in_off = offsets[2 * nb], rec_off = offsets[2 * nb + 1], lb_off = offsets[2 * nb + 2];
  const std::size_t hw_off = offsets[2 * nb + 3], hb_off = offsets[2 * nb + 4];
  const auto sig = [](Extended z) { return Extended{1} / (Extended{1} + std::exp(-z)); };
  std::vector<Extended> h(hidden, 0), c(hidden, 0), z(4 * hidden);
  for (const auto& feat : encoded) {
    for (std::size_t r = 0; r < 4 * hidden; ++r) {
      Extended sum = theta[lb_off + r];
      for (std::size_t f = 0; f < features; ++f) sum += theta[in_off + r * features + f] * feat[f];
      for (std::size_t j = 0; j < hidden; ++j) sum += theta[rec_off + r * hidden + j] * h[j];
      z[r] = sum;
    }
    for (std::size_t j = 0; j < hidden; ++j) {
      const Extended gi = sig(z[j]);
      const Extended gf = sig(z[hidden + j]);
      const Extended gg = std::tanh(z[2 * hidden + j]);
      const Extended go = sig(z[3 * hidden + j]);
      c[j] = gf * c[j] + gi * gg;
      h[j] = go * std::tanh(c[j]);
    }
  }

  const std::size_t cells = shape.height * shape.width;
  Extended loss = 0;
  for (std::size_t i = 0; i < cells; ++i) {
    Extended pred = theta[hb_off + i];
    for (std::size_t j = 0; j < hidden; ++j) pred += theta[hw_off + i * hidden + j] * h[j];
    const Extended d = pred - static_cast<Extended>(y.values[i]);
    loss += d * d;
  }
  return loss / static_cast<Extended>(cells);
}

}  // namespace

// --- Config -----------------------------------------------------------------

void CnnLstmConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, "cnn_lstm: " + msg); };
  if (conv_channels.empty()) fail("conv_channels must not be empty");
  for (auto c : conv_channels) {
    if (c == 0) fail("conv_channels entries must be positive");
  }
  if (kernel_size == 0 || kernel_size % 2 == 0) fail("kernel_size must be odd");
  if (pool_factor == 0) fail("pool_factor must be positive");
  if (lstm_hidden == 0) fail("lstm_hidden must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be non-negative");
}

void CnnLstmConfig::validate_grid(std::size_t height, std::size_t width) const {
  validate();
  std::size_t divisor = 1;
  for (std::size_t b = 0; b < conv_channels.size(); ++b) divisor *= pool_factor;
  if (height % divisor != 0 || width % divisor != 0 || height < divisor || width < divisor) {
    throw Error(ErrorCode::InvalidConfig, "cnn_lstm: grid " + std::to_string(height) + "x" + std::to_string(width) +
                                              " is not divisible by pool_factor^blocks = " + std::to_string(divisor));
  }
}

void to_json(nlohmann::json& j, const CnnLstmConfig& c) {
  j = {{"conv_channels", c.conv_channels}, {"kernel_size", c.kernel_size}, {"pool_factor", c.pool_factor},
       {"lstm_hidden", c.lstm_hidden},     {"learning_rate", c.learning_rate}, {"epochs", c.epochs},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CnnLstmConfig& c) {
  const CnnLstmConfig d;
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.pool_factor = j.value("pool_factor", d.pool_factor);
  c.lstm_hidden = j.value("lstm_hidden", d.lstm_hidden);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
}

// --- Parameters ---------------------------------------------------------------

std::size_t NeuralParameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks()) n += b.size();
  return n;
}

bool NeuralParameters::all_finite() const {
  for (const auto& b : blocks()) {
    if (!std::all_of(b.begin(), b.end(), [](double v) { return std::isfinite(v); })) return false;
  }
  return true;
}

std::vector<std::span<double>> NeuralParameters::blocks() {
  std::vector<std::span<double>> out;
  const auto add = [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); };
  for (auto& b : conv) {
    add(b.kernel);
    add(b.bias);
  }
  add(lstm_input);
  add(lstm_recurrent);
  add(lstm_bias);
  add(head_weight);
  add(head_bias);
  return out;
}

std::vector<std::span<const double>> NeuralParameters::blocks() const {
  auto mutable_blocks = const_cast<NeuralParameters*>(this)->blocks();
  return {mutable_blocks.begin(), mutable_blocks.end()};
}

std::vector<std::string> NeuralParameters::block_names() const {
  std::vector<std::string> names;
  for (std::size_t b = 0; b < conv.size(); ++b) {
    names.push_back("conv" + std::to_string(b) + ".kernel");
    names.push_back("conv" + std::to_string(b) + ".bias");
  }
  for (const char* n : {"lstm.input", "lstm.recurrent", "lstm.bias", "head.weight", "head.bias"}) names.emplace_back(n);
  return names;
}

std::vector<double> NeuralParameters::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& b : blocks()) flat.insert(flat.end(), b.begin(), b.end());
  return flat;
}

void NeuralParameters::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(parameter_count()) + " parameters, got " +
                                              std::to_string(flat.size()));
  }
  std::size_t offset = 0;
  for (auto b : blocks()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), b.size(), b.begin());
    offset += b.size();
  }
}

NeuralParameters zero_parameters(const CnnLstmConfig& config, std::size_t height, std::size_t width) {
  config.validate_grid(height, width);
  NeuralParameters p;
  p.height = height;
  p.width = width;
  p.kernel_size = config.kernel_size;
  p.pool_factor = config.pool_factor;
  const auto k2 = static_cast<Eigen::Index>(config.kernel_size * config.kernel_size);
  Eigen::Index in = 1;
  std::size_t h = height, w = width;
  for (auto out : config.conv_channels) {
    const auto o = static_cast<Eigen::Index>(out);
    p.conv.push_back({Matrix::Zero(o, in * k2), Vector::Zero(o)});
    in = o;
    h /= config.pool_factor;
    w /= config.pool_factor;
  }
  const auto features = in * static_cast<Eigen::Index>(h * w);
  const auto hidden = static_cast<Eigen::Index>(config.lstm_hidden);
  const auto cells = static_cast<Eigen::Index>(height * width);
  p.lstm_input = Matrix::Zero(4 * hidden, features);
  p.lstm_recurrent = Matrix::Zero(4 * hidden, hidden);
  p.lstm_bias = Vector::Zero(4 * hidden);
  p.head_weight = Matrix::Zero(cells, hidden);
  p.head_bias = Vector::Zero(cells);
  return p;
}

NeuralParameters init_parameters(const CnnLstmConfig& config, std::size_t height, std::size_t width) {
  NeuralParameters p = zero_parameters(config, height, width);
  std::mt19937_64 rng(config.seed);
  const auto fill = [&](Matrix& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  };
  for (auto& b : p.conv) fill(b.kernel);
  fill(p.lstm_input);
  fill(p.lstm_recurrent);
  fill(p.head_weight);
  return p;
}

// --- Forward / backward ---------------------------------------------------------

Vector encode_frame(const NeuralParameters& params, std::span<const double> frame) {
  if (frame.size() != params.height * params.width) {
    throw Error(ErrorCode::ShapeMismatch, "frame has " + std::to_string(frame.size()) + " cells, expected " +
                                              std::to_string(params.height * params.width));
  }
  std::vector<BlockCache> caches;
  encode(params, block_shapes(params), frame, caches);
  const Matrix& pooled = caches.back().pooled;
  return Eigen::Map<const Vector>(pooled.data(), pooled.size());
}

grid::DisplacementMap forward(const NeuralParameters& params, const grid::SpatioTemporalTensor& x) {
  const Vector y = run_forward(params, x, nullptr, nullptr, nullptr);
  return {x.spec, std::vector<double>(y.data(), y.data() + y.size()), {}, x.steps.back().epoch_index + 1};
}

double loss_mse(std::span<const double> prediction, std::span<const double> target) {
  if (prediction.size() != target.size() || prediction.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "prediction and target differ in size");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction[i] - target[i];
    sum += d * d;
  }
  return sum / static_cast<double>(prediction.size());
}

double loss_mse(const grid::DisplacementMap& prediction, const grid::DisplacementMap& target) {
  if (prediction.spec.height != target.spec.height || prediction.spec.width != target.spec.width) {
    throw Error(ErrorCode::ShapeMismatch, "prediction and target grids differ");
  }
  return loss_mse(prediction.values, target.values);
}

LossGradient loss_and_gradient(const NeuralParameters& params, const grid::SpatioTemporalTensor& x,
                               const grid::DisplacementMap& y) {
  if (y.values.size() != params.height * params.width) {
    throw Error(ErrorCode::ShapeMismatch, "target map does not match the parameter grid");
  }
  std::vector<std::vector<BlockCache>> caches;
  Matrix feats;
  LstmTrace trace;
  const Vector pred = run_forward(params, x, &caches, &feats, &trace);
  const Eigen::Map<const Vector> target(y.values.data(), static_cast<Eigen::Index>(y.values.size()));
  const Vector diff = pred - target;
  const auto n = static_cast<double>(diff.size());

  LossGradient out{diff.squaredNorm() / n, zeros_like(params)};
  auto& grad = out.gradient;

  const Vector dy = (2.0 / n) * diff;
  const std::size_t steps = x.length();
  grad.head_weight.noalias() = dy * trace.h[steps].transpose();
  grad.head_bias = dy;

  const auto H = static_cast<Eigen::Index>(params.hidden());
  Vector dh = params.head_weight.transpose() * dy;
  Vector dc = Vector::Zero(H);
  Matrix dz_all(4 * H, static_cast<Eigen::Index>(steps));
  for (std::size_t t = steps; t-- > 0;) {
    const Vector& gi = trace.i[t];
    const Vector& gf = trace.f[t];
    const Vector& gg = trace.g[t];
    const Vector& go = trace.o[t];
    const Vector& tc = trace.tanh_c[t];
    const Vector do_ = dh.cwiseProduct(tc);
    dc += dh.cwiseProduct(go).cwiseProduct((1.0 - tc.array().square()).matrix());
    Vector dz(4 * H);
    dz.segment(0, H) = dc.cwiseProduct(gg).cwiseProduct((gi.array() * (1.0 - gi.array())).matrix());
    dz.segment(H, H) = dc.cwiseProduct(trace.c[t]).cwiseProduct((gf.array() * (1.0 - gf.array())).matrix());
    dz.segment(2 * H, H) = dc.cwiseProduct(gi).cwiseProduct((1.0 - gg.array().square()).matrix());
    dz.segment(3 * H, H) = do_.cwiseProduct((go.array() * (1.0 - go.array())).matrix());
    dz_all.col(static_cast<Eigen::Index>(t)) = dz;
    grad.lstm_recurrent.noalias() += dz * trace.h[t].transpose();
    dh = params.lstm_recurrent.transpose() * dz;
    dc = dc.cwiseProduct(gf);
  }
  grad.lstm_input.noalias() = dz_all * feats.transpose();
  grad.lstm_bias = dz_all.rowwise().sum();
  const Matrix dfeats = params.lstm_input.transpose() * dz_all;

  const auto shapes = block_shapes(params);
  const auto& last = shapes.back();
  const auto out_cells = static_cast<Eigen::Index>((last.height / params.pool_factor) * (last.width / params.pool_factor));
  for (std::size_t t = 0; t < steps; ++t) {
    const Vector col = dfeats.col(static_cast<Eigen::Index>(t));
    Matrix dpooled = Eigen::Map<const Matrix>(col.data(), static_cast<Eigen::Index>(last.out_channels), out_cells);
    encode_backward(params, shapes, caches[t], std::move(dpooled), grad);
  }
  return out;
}

// --- Training -----------------------------------------------------------------

TrainResult train(const CnnLstmConfig& config, const grid::SpatioTemporalTensor& x, const grid::DisplacementMap& y) {
  config.validate_grid(x.spec.height, x.spec.width);
  return train(config, init_parameters(config, x.spec.height, x.spec.width), x, y);
}

TrainResult train(const CnnLstmConfig& config, NeuralParameters init, const grid::SpatioTemporalTensor& x,
                  const grid::DisplacementMap& y) {
  config.validate();
  if (!(y.spec == x.spec)) throw Error(ErrorCode::SpecMismatch, "target map and input tensor grids differ");
  TrainResult result{std::move(init), {}};
  auto& params = result.params;
  const std::size_t n = params.parameter_count();
  std::vector<double> m(n, 0.0), v(n, 0.0);
  double beta1_power = 1.0, beta2_power = 1.0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto lg = loss_and_gradient(params, x, y);
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorCode::NonFiniteLoss, "loss diverged at epoch " + std::to_string(epoch));
    }
    result.history.loss.push_back(lg.loss);

    beta1_power *= kBeta1;
    beta2_power *= kBeta2;
    const double correction1 = 1.0 - beta1_power;
    const double correction2 = 1.0 - beta2_power;
    const auto param_blocks = params.blocks();
    const auto grad_blocks = lg.gradient.blocks();
    std::size_t offset = 0;
    for (std::size_t b = 0; b < param_blocks.size(); ++b) {
      const auto theta = param_blocks[b];
      const auto g = grad_blocks[b];
      for (std::size_t i = 0; i < theta.size(); ++i, ++offset) {
        m[offset] = kBeta1 * m[offset] + (1.0 - kBeta1) * g[i];
        v[offset] = kBeta2 * v[offset] + (1.0 - kBeta2) * g[i] * g[i];
        const double m_hat = m[offset] / correction1;
        const double v_hat = v[offset] / correction2;
        theta[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + kAdamEpsilon);
      }
    }
  }
  return result;
}

// --- Gradient check -------------------------------------------------------------

GradientCheckReport gradient_check(const NeuralParameters& params, const grid::SpatioTemporalTensor& x,
                                   const grid::DisplacementMap& y, double epsilon, unsigned groups) {
  check_input(params, x);
  if (y.values.size() != params.height * params.width) {
    throw Error(ErrorCode::ShapeMismatch, "target map does not match the parameter grid");
  }
  const auto analytic = loss_and_gradient(params, x, y).gradient.flatten();
  const auto flat = params.flatten();
  std::vector<Extended> theta(flat.begin(), flat.end());
  const auto names = params.block_names();
  const auto spans = params.blocks();

  GradientCheckReport report;
  std::size_t offset = 0;
  for (std::size_t b = 0; b < spans.size(); ++b) {
    const unsigned group = names[b].starts_with("conv") ? kConvGroup
                           : names[b].starts_with("lstm") ? kLstmGroup
                                                          : kHeadGroup;
    if ((groups & group) == 0) {
      offset += spans[b].size();
      continue;
    }
    for (std::size_t i = 0; i < spans[b].size(); ++i, ++offset) {
      const Extended original = theta[offset];
      theta[offset] = original + epsilon;
      const Extended plus = reference_loss(params, theta, x, y);
      theta[offset] = original - epsilon;
      const Extended minus = reference_loss(params, theta, x, y);
      theta[offset] = original;
      const auto numeric = static_cast<double>((plus - minus) / (2 * static_cast<Extended>(epsilon)));
      const double a = analytic[offset];
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_index = offset;
      }
      ++report.checked;
    }
  }
  return report;
}

// --- Checkpoints ----------------------------------------------------------------

void write_checkpoint(const CnnLstmConfig& config, const NeuralParameters& params, const std::filesystem::path& path) {
  nlohmann::json blocks = nlohmann::json::array();
  const auto names = params.block_names();
  const auto spans = params.blocks();
  for (std::size_t b = 0; b < spans.size(); ++b) blocks.push_back({{"name", names[b]}, {"size", spans[b].size()}});
  const nlohmann::json header = {
      {"format", kCheckpointFormat},
      {"version", 1},
      {"config", config},
      {"grid", grid_shape_json(params)},
      {"feature_length", params.feature_length()},
      {"parameter_count", params.parameter_count()},
      {"seed", config.seed},
      {"blocks", blocks},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << header.dump() << '\n';
  const auto flat = params.flatten();
  detail::write_le<double>(out, flat);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::FormatError, path.string() + ": missing header");
  Checkpoint ck;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != kCheckpointFormat) {
      throw Error(ErrorCode::FormatError, path.string() + ": not a CNN-LSTM checkpoint");
    }
    ck.config = header.at("config").get<CnnLstmConfig>();
    ck.params = zero_parameters(ck.config, header.at("grid").at("h").get<std::size_t>(),
                                header.at("grid").at("w").get<std::size_t>());
    count = header.at("parameter_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
  if (count != ck.params.parameter_count()) {
    throw Error(ErrorCode::FormatError, path.string() + ": parameter count disagrees with config");
  }
  ck.params.assign(detail::read_le<double>(in, count));
  return ck;
}

}  // namespace deformcast::nn
