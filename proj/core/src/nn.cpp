#include "imcx/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>

#include "imcx/checksum.hpp"
#include "imcx/errors.hpp"

namespace imcx::nn {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Buffer weight_variant(const Buffer& w, WeightVariant v) {
  Buffer out(w.size());
  switch (v) {
    case WeightVariant::original: out = w; break;
    case WeightVariant::positive:
      std::transform(w.begin(), w.end(), out.begin(), [](double a) { return a > 0 ? a : 0.0; });
      break;
    case WeightVariant::negative:
      std::transform(w.begin(), w.end(), out.begin(), [](double a) { return a < 0 ? a : 0.0; });
      break;
    case WeightVariant::ones: std::fill(out.begin(), out.end(), 1.0); break;
  }
  return out;
}

double bias_variant(double b, WeightVariant v) {
  switch (v) {
    case WeightVariant::original: return b;
    case WeightVariant::positive: return b > 0 ? b : 0.0;
    case WeightVariant::negative: return b < 0 ? b : 0.0;
    case WeightVariant::ones: return 0.0;
  }
  return 0.0;
}

int conv_out(int extent, int k, int stride, int pad) { return (extent + 2 * pad - k) / stride + 1; }

// Per-thread scratch so the large column buffers are not re-mapped on every call.
Buffer& scratch(int slot, std::size_t size) {
  thread_local Buffer buffers[2];
  auto& b = buffers[slot];
  if (b.size() < size) b.resize(size);
  return b;
}

// cols[(c*k + i)*k + j][oy*wo + ox] = x(c, oy*s + i - p, ox*s + j - p)
const double* im2col(const Tensor& x, int k, int stride, int pad, int ho, int wo) {
  const std::size_t n = static_cast<std::size_t>(ho) * wo;
  auto& cols = scratch(0, static_cast<std::size_t>(x.channels) * k * k * n);
  std::fill_n(cols.begin(), static_cast<std::size_t>(x.channels) * k * k * n, 0.0);
  for (int c = 0; c < x.channels; ++c) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        double* row = cols.data() + (static_cast<std::size_t>(c * k + i) * k + j) * n;
        for (int oy = 0; oy < ho; ++oy) {
          const int y = oy * stride + i - pad;
          if (y < 0 || y >= x.height) continue;
          const double* src = x.data.data() + (static_cast<std::size_t>(c) * x.height + y) * x.width;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (stride == 1) {
            const int x0 = j - pad;
            const int lo = std::max(0, -x0);
            const int hi = std::min(wo, x.width - x0);
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + x0];
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int xx = ox * stride + j - pad;
              if (xx >= 0 && xx < x.width) dst[ox] = src[xx];
            }
          }
        }
      }
    }
  }
  return cols.data();
}

void col2im(const double* cols, Tensor& out, int k, int stride, int pad, int ho, int wo) {
  const std::size_t n = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < out.channels; ++c) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const double* row = cols + (static_cast<std::size_t>(c * k + i) * k + j) * n;
        for (int oy = 0; oy < ho; ++oy) {
          const int y = oy * stride + i - pad;
          if (y < 0 || y >= out.height) continue;
          double* dst = out.data.data() + (static_cast<std::size_t>(c) * out.height + y) * out.width;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int xx = ox * stride + j - pad;
            if (xx >= 0 && xx < out.width) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::residual: return "residual";
    case LayerKind::replicate: return "replicate";
  }
  return "unknown";
}

Param::Param(std::string n, std::vector<int> s, bool train)
    : name(std::move(n)), shape(std::move(s)), value(product(shape), 0.0), grad(product(shape), 0.0),
      trainable(train) {}

void Layer::forward_traced(const Tensor& in, LayerTrace& trace) const {
  trace.input = in;
  trace.output = forward(in);
}

Tensor Layer::backward(const LayerTrace& trace, const Tensor& grad_out) { return backward_input(trace, grad_out); }

std::vector<const Param*> Layer::params() const {
  auto mutable_params = const_cast<Layer*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

// ---------------------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding, bool bias)
    : LinearLayer(name), in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding),
      bias_enabled_(bias), weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {bias ? out_channels : 0}) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || padding < 0) {
    throw ParameterError("conv '" + name + "': invalid geometry");
  }
}

void Conv2d::enable_bias() {
  if (bias_enabled_) return;
  bias_enabled_ = true;
  bias_ = Param(name() + ".bias", {out_});
}

Tensor Conv2d::apply(const Tensor& x, WeightVariant variant, bool with_bias) const {
  if (x.channels != in_) {
    throw ShapeError("conv '" + name() + "' expects " + std::to_string(in_) + " input channels, got " +
                     std::to_string(x.channels));
  }
  const int ho = conv_out(x.height, k_, stride_, pad_);
  const int wo = conv_out(x.width, k_, stride_, pad_);
  if (ho < 1 || wo < 1) throw ShapeError("conv '" + name() + "': input " + x.shape_string() + " too small");
  const int kk = in_ * k_ * k_;
  const int n = ho * wo;

  Tensor out(out_, ho, wo);
  MatrixMap o(out.data.data(), out_, n);
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;
  ConstMatrixMap c(direct ? x.data.data() : im2col(x, k_, stride_, pad_, ho, wo), kk, n);
  if (variant == WeightVariant::original) {
    o.noalias() = ConstMatrixMap(weight_.value.data(), out_, kk) * c;
  } else {
    const auto w = weight_variant(weight_.value, variant);
    o.noalias() = ConstMatrixMap(w.data(), out_, kk) * c;
  }
  if (with_bias && bias_enabled_ && variant != WeightVariant::ones) {
    for (int oc = 0; oc < out_; ++oc) o.row(oc).array() += bias_variant(bias_.value[oc], variant);
  }
  return out;
}

Tensor Conv2d::apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const {
  const int ho = s.height, wo = s.width;
  const int kk = in_ * k_ * k_;
  const int n = ho * wo;
  if (s.channels != out_) throw ShapeError("conv '" + name() + "': backward signal has wrong channel count");
  ConstMatrixMap sm(s.data.data(), out_, n);
  Tensor out(in_, input_like.height, input_like.width);
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;
  auto run = [&](const double* w) {
    if (direct) {
      MatrixMap(out.data.data(), kk, n).noalias() = ConstMatrixMap(w, out_, kk).transpose() * sm;
    } else {
      double* dcols = scratch(1, static_cast<std::size_t>(kk) * n).data();
      MatrixMap(dcols, kk, n).noalias() = ConstMatrixMap(w, out_, kk).transpose() * sm;
      col2im(dcols, out, k_, stride_, pad_, ho, wo);
    }
  };
  if (variant == WeightVariant::original) {
    run(weight_.value.data());
  } else {
    const auto w = weight_variant(weight_.value, variant);
    run(w.data());
  }
  return out;
}

Tensor Conv2d::backward(const LayerTrace& trace, const Tensor& grad_out) {
  const Tensor& x = trace.input;
  const int ho = grad_out.height, wo = grad_out.width;
  const int kk = in_ * k_ * k_;
  const int n = ho * wo;
  ConstMatrixMap g(grad_out.data.data(), out_, n);
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;
  ConstMatrixMap c(direct ? x.data.data() : im2col(x, k_, stride_, pad_, ho, wo), kk, n);
  MatrixMap(weight_.grad.data(), out_, kk).noalias() += g * c.transpose();
  if (bias_enabled_) {
    for (int oc = 0; oc < out_; ++oc) bias_.grad[oc] += g.row(oc).sum();
  }
  return apply_transpose(grad_out, WeightVariant::original, x);
}

std::vector<Param*> Conv2d::params() {
  if (bias_enabled_) return {&weight_, &bias_};
  return {&weight_};
}

// ----------------------------------------------------------------------------- Dense

Dense::Dense(std::string name, int in_features, int out_features, bool bias)
    : LinearLayer(name), in_(in_features), out_(out_features), bias_enabled_(bias),
      weight_(name + ".weight", {out_features, in_features}), bias_(name + ".bias", {bias ? out_features : 0}) {
  if (in_features < 1 || out_features < 1) throw ParameterError("dense '" + name + "': invalid size");
}

void Dense::enable_bias() {
  if (bias_enabled_) return;
  bias_enabled_ = true;
  bias_ = Param(name() + ".bias", {out_});
}

Tensor Dense::apply(const Tensor& x, WeightVariant variant, bool with_bias) const {
  if (static_cast<int>(x.size()) != in_) {
    throw ShapeError("dense '" + name() + "' expects " + std::to_string(in_) + " inputs, got " +
                     std::to_string(x.size()));
  }
  Tensor out(out_, 1, 1);
  Eigen::Map<Eigen::VectorXd> o(out.data.data(), out_);
  Eigen::Map<const Eigen::VectorXd> xv(x.data.data(), in_);
  if (variant == WeightVariant::original) {
    o.noalias() = ConstMatrixMap(weight_.value.data(), out_, in_) * xv;
  } else {
    const auto w = weight_variant(weight_.value, variant);
    o.noalias() = ConstMatrixMap(w.data(), out_, in_) * xv;
  }
  if (with_bias && bias_enabled_ && variant != WeightVariant::ones) {
    for (int j = 0; j < out_; ++j) out.data[j] += bias_variant(bias_.value[j], variant);
  }
  return out;
}

Tensor Dense::apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const {
  if (static_cast<int>(s.size()) != out_) throw ShapeError("dense '" + name() + "': backward signal size mismatch");
  Tensor out(input_like.channels, input_like.height, input_like.width);
  Eigen::Map<Eigen::VectorXd> o(out.data.data(), in_);
  Eigen::Map<const Eigen::VectorXd> sv(s.data.data(), out_);
  if (variant == WeightVariant::original) {
    o.noalias() = ConstMatrixMap(weight_.value.data(), out_, in_).transpose() * sv;
  } else {
    const auto w = weight_variant(weight_.value, variant);
    o.noalias() = ConstMatrixMap(w.data(), out_, in_).transpose() * sv;
  }
  return out;
}

Tensor Dense::backward(const LayerTrace& trace, const Tensor& grad_out) {
  Eigen::Map<const Eigen::VectorXd> g(grad_out.data.data(), out_);
  Eigen::Map<const Eigen::VectorXd> x(trace.input.data.data(), in_);
  MatrixMap(weight_.grad.data(), out_, in_).noalias() += g * x.transpose();
  if (bias_enabled_) {
    for (int j = 0; j < out_; ++j) bias_.grad[j] += grad_out.data[j];
  }
  return apply_transpose(grad_out, WeightVariant::original, trace.input);
}

std::vector<Param*> Dense::params() {
  if (bias_enabled_) return {&weight_, &bias_};
  return {&weight_};
}

// ------------------------------------------------------------------------- pooling

AvgPool2d::AvgPool2d(std::string name, int kernel, int stride) : LinearLayer(std::move(name)), k_(kernel), stride_(stride) {
  if (kernel < 1 || stride < 1) throw ParameterError("avg pool: invalid geometry");
}

Tensor AvgPool2d::apply(const Tensor& x, WeightVariant variant, bool) const {
  const int ho = conv_out(x.height, k_, stride_, 0);
  const int wo = conv_out(x.width, k_, stride_, 0);
  if (ho < 1 || wo < 1) throw ShapeError("avg pool '" + name() + "': input " + x.shape_string() + " too small");
  Tensor out(x.channels, ho, wo);
  if (variant == WeightVariant::negative) return out;
  const double w = variant == WeightVariant::ones ? 1.0 : 1.0 / (k_ * k_);
  for (int c = 0; c < x.channels; ++c)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int i = 0; i < k_; ++i)
          for (int j = 0; j < k_; ++j) s += x.at(c, oy * stride_ + i, ox * stride_ + j);
        out.at(c, oy, ox) = w * s;
      }
  return out;
}

Tensor AvgPool2d::apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const {
  Tensor out(input_like.channels, input_like.height, input_like.width);
  if (variant == WeightVariant::negative) return out;
  const double w = variant == WeightVariant::ones ? 1.0 : 1.0 / (k_ * k_);
  for (int c = 0; c < s.channels; ++c)
    for (int oy = 0; oy < s.height; ++oy)
      for (int ox = 0; ox < s.width; ++ox) {
        const double v = w * s.at(c, oy, ox);
        for (int i = 0; i < k_; ++i)
          for (int j = 0; j < k_; ++j) out.at(c, oy * stride_ + i, ox * stride_ + j) += v;
      }
  return out;
}

Tensor GlobalAvgPool::apply(const Tensor& x, WeightVariant variant, bool) const {
  Tensor out(x.channels, 1, 1);
  if (variant == WeightVariant::negative) return out;
  const double w = variant == WeightVariant::ones ? 1.0 : 1.0 / static_cast<double>(x.plane());
  for (int c = 0; c < x.channels; ++c) {
    const auto plane = x.channel(c);
    out.data[c] = w * std::accumulate(plane.begin(), plane.end(), 0.0);
  }
  return out;
}

Tensor GlobalAvgPool::apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const {
  Tensor out(input_like.channels, input_like.height, input_like.width);
  if (variant == WeightVariant::negative) return out;
  const double w = variant == WeightVariant::ones ? 1.0 : 1.0 / static_cast<double>(out.plane());
  for (int c = 0; c < out.channels; ++c) {
    auto plane = out.channel(c);
    std::fill(plane.begin(), plane.end(), w * s.data[c]);
  }
  return out;
}

MaxPool2d::MaxPool2d(std::string name, int kernel, int stride, int padding)
    : Layer(std::move(name)), k_(kernel), stride_(stride), pad_(padding) {
  if (kernel < 1 || stride < 1 || padding < 0) throw ParameterError("max pool: invalid geometry");
}

std::vector<std::size_t> MaxPool2d::winners(const Tensor& in, int ho, int wo) const {
  std::vector<std::size_t> idx(static_cast<std::size_t>(in.channels) * ho * wo);
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = std::numeric_limits<std::size_t>::max();
        for (int i = 0; i < k_; ++i) {
          const int y = oy * stride_ + i - pad_;
          if (y < 0 || y >= in.height) continue;
          for (int j = 0; j < k_; ++j) {
            const int x = ox * stride_ + j - pad_;
            if (x < 0 || x >= in.width) continue;
            const std::size_t at = (static_cast<std::size_t>(c) * in.height + y) * in.width + x;
            if (arg == std::numeric_limits<std::size_t>::max() || in.data[at] > best || std::isnan(in.data[at])) {
              best = in.data[at];
              arg = at;
            }
          }
        }
        idx[o++] = arg;
      }
  return idx;
}

Tensor MaxPool2d::forward(const Tensor& in) const {
  const int ho = conv_out(in.height, k_, stride_, pad_);
  const int wo = conv_out(in.width, k_, stride_, pad_);
  if (ho < 1 || wo < 1) throw ShapeError("max pool '" + name() + "': input " + in.shape_string() + " too small");
  Tensor out(in.channels, ho, wo);
  const auto idx = winners(in, ho, wo);
  for (std::size_t i = 0; i < idx.size(); ++i) out.data[i] = in.data[idx[i]];
  return out;
}

Tensor MaxPool2d::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g(trace.input.channels, trace.input.height, trace.input.width);
  const auto idx = winners(trace.input, grad_out.height, grad_out.width);
  for (std::size_t i = 0; i < idx.size(); ++i) g.data[idx[i]] += grad_out.data[i];
  return g;
}

// ------------------------------------------------------------------- elementwise

Tensor ReLU::forward(const Tensor& in) const {
  Tensor out = in;
  for (double& v : out.data) v = v > 0 || std::isnan(v) ? v : 0.0;
  return out;
}

Tensor ReLU::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(trace.input.data[i] > 0)) g.data[i] = 0.0;
  return g;
}

Tensor Tanh::forward(const Tensor& in) const {
  Tensor out = in;
  for (double& v : out.data) v = std::tanh(v);
  return out;
}

Tensor Tanh::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double t = trace.output.data[i];
    g.data[i] *= 1.0 - t * t;
  }
  return g;
}

Tensor Flatten::forward(const Tensor& in) const {
  Tensor out = in;
  out.channels = static_cast<int>(in.size());
  out.height = 1;
  out.width = 1;
  return out;
}

Tensor Flatten::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g = grad_out;
  g.channels = trace.input.channels;
  g.height = trace.input.height;
  g.width = trace.input.width;
  return g;
}

BatchNorm::BatchNorm(std::string name, int channels, double eps)
    : Layer(name), channels_(channels), eps_(eps), gamma_(name + ".weight", {channels}),
      beta_(name + ".bias", {channels}), mean_(name + ".running_mean", {channels}, false),
      var_(name + ".running_var", {channels}, false) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  std::fill(var_.value.begin(), var_.value.end(), 1.0);
}

std::vector<double> BatchNorm::scale() const {
  std::vector<double> s(channels_);
  for (int c = 0; c < channels_; ++c) s[c] = gamma_.value[c] / std::sqrt(var_.value[c] + eps_);
  return s;
}

std::vector<double> BatchNorm::shift() const {
  const auto s = scale();
  std::vector<double> b(channels_);
  for (int c = 0; c < channels_; ++c) b[c] = beta_.value[c] - mean_.value[c] * s[c];
  return b;
}

Tensor BatchNorm::forward(const Tensor& in) const {
  if (in.channels != channels_) throw ShapeError("batch norm '" + name() + "': channel mismatch");
  const auto s = scale();
  const auto b = shift();
  Tensor out = in;
  for (int c = 0; c < channels_; ++c)
    for (double& v : out.channel(c)) v = s[c] * v + b[c];
  return out;
}

Tensor BatchNorm::backward_input(const LayerTrace&, const Tensor& grad_out) const {
  const auto s = scale();
  Tensor g = grad_out;
  for (int c = 0; c < channels_; ++c)
    for (double& v : g.channel(c)) v *= s[c];
  return g;
}

Tensor BatchNorm::backward(const LayerTrace& trace, const Tensor& grad_out) {
  for (int c = 0; c < channels_; ++c) {
    const double inv = 1.0 / std::sqrt(var_.value[c] + eps_);
    const auto g = grad_out.channel(c);
    const auto x = trace.input.channel(c);
    double dg = 0.0, db = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      dg += g[i] * (x[i] - mean_.value[c]) * inv;
      db += g[i];
    }
    gamma_.grad[c] += dg;
    beta_.grad[c] += db;
  }
  return backward_input(trace, grad_out);
}

std::vector<Param*> BatchNorm::params() { return {&gamma_, &beta_, &mean_, &var_}; }

Replicate::Replicate(std::string name, int copies) : Layer(std::move(name)), copies_(copies) {
  if (copies < 1) throw ParameterError("replicate: copies must be >= 1");
}

Tensor Replicate::forward(const Tensor& in) const {
  Tensor out(in.channels * copies_, in.height, in.width);
  for (int r = 0; r < copies_; ++r)
    std::copy(in.data.begin(), in.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * in.size()));
  return out;
}

Tensor Replicate::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g(trace.input.channels, trace.input.height, trace.input.width);
  for (int r = 0; r < copies_; ++r)
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += grad_out.data[r * g.size() + i];
  return g;
}

// ------------------------------------------------------------------------ residual

LayerList clone_layers(const LayerList& layers) {
  LayerList out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l->clone());
  return out;
}

Residual::Residual(std::string name, LayerList main, LayerList shortcut)
    : Layer(std::move(name)), main_(std::move(main)), shortcut_(std::move(shortcut)) {}

Residual::Residual(const Residual& other)
    : Layer(other.name()), main_(clone_layers(other.main_)), shortcut_(clone_layers(other.shortcut_)) {}

Tensor Residual::forward(const Tensor& in) const {
  Tensor out = run_layers(main_, in);
  const Tensor side = shortcut_.empty() ? in : run_layers(shortcut_, in);
  if (!out.same_shape(side)) {
    throw ShapeError("residual '" + name() + "': branch shapes " + out.shape_string() + " and " + side.shape_string());
  }
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += side.data[i];
  return out;
}

void Residual::forward_traced(const Tensor& in, LayerTrace& trace) const {
  trace.input = in;
  trace.branches.clear();
  trace.branches.push_back(trace_layers(main_, in));
  trace.branches.push_back(trace_layers(shortcut_, in));
  Tensor out = trace.branches[0].back().output;
  const Tensor& side = shortcut_.empty() ? in : trace.branches[1].back().output;
  if (!out.same_shape(side)) throw ShapeError("residual '" + name() + "': branch shape mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += side.data[i];
  trace.output = std::move(out);
}

Tensor Residual::backward_input(const LayerTrace& trace, const Tensor& grad_out) const {
  Tensor g = backward_input_layers(main_, trace.branches[0], grad_out);
  const Tensor s = shortcut_.empty() ? grad_out : backward_input_layers(shortcut_, trace.branches[1], grad_out);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s.data[i];
  return g;
}

Tensor Residual::backward(const LayerTrace& trace, const Tensor& grad_out) {
  Tensor g = backward_layers(main_, trace.branches[0], grad_out);
  const Tensor s = shortcut_.empty() ? grad_out : backward_layers(shortcut_, trace.branches[1], grad_out);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s.data[i];
  return g;
}

std::vector<Param*> Residual::params() {
  std::vector<Param*> out;
  for (auto* list : {&main_, &shortcut_})
    for (auto& l : *list)
      for (Param* p : l->params()) out.push_back(p);
  return out;
}

Tensor run_layers(const LayerList& layers, const Tensor& x) {
  Tensor cur = x;
  for (const auto& l : layers) cur = l->forward(cur);
  return cur;
}

std::vector<LayerTrace> trace_layers(const LayerList& layers, const Tensor& x) {
  std::vector<LayerTrace> traces(layers.size());
  const Tensor* cur = &x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i]->forward_traced(*cur, traces[i]);
    cur = &traces[i].output;
  }
  return traces;
}

Tensor backward_layers(LayerList& layers, const std::vector<LayerTrace>& traces, Tensor grad) {
  for (std::size_t i = layers.size(); i-- > 0;) grad = layers[i]->backward(traces[i], grad);
  return grad;
}

Tensor backward_input_layers(const LayerList& layers, const std::vector<LayerTrace>& traces, Tensor grad) {
  for (std::size_t i = layers.size(); i-- > 0;) grad = layers[i]->backward_input(traces[i], grad);
  return grad;
}

// ------------------------------------------------------------------------- network

Network::Network(int input_channels, LayerList layers) : input_channels_(input_channels), layers_(std::move(layers)) {
  if (layers_.empty()) throw ParameterError("network needs at least one layer");
}

Network::Network(const Network& other) : input_channels_(other.input_channels_), layers_(clone_layers(other.layers_)) {}

Network& Network::operator=(const Network& other) {
  if (this != &other) {
    input_channels_ = other.input_channels_;
    layers_ = clone_layers(other.layers_);
  }
  return *this;
}

Tensor Network::forward(const Tensor& x) const {
  if (x.channels != input_channels_) {
    throw ShapeError("network expects " + std::to_string(input_channels_) + " input channels, got " +
                     std::to_string(x.channels));
  }
  return run_layers(layers_, x);
}

std::vector<LayerTrace> Network::forward_traced(const Tensor& x) const {
  if (x.channels != input_channels_) {
    throw ShapeError("network expects " + std::to_string(input_channels_) + " input channels, got " +
                     std::to_string(x.channels));
  }
  return trace_layers(layers_, x);
}

Tensor Network::backward(const std::vector<LayerTrace>& traces, const Tensor& grad_out) {
  return backward_layers(layers_, traces, grad_out);
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (auto& l : layers_)
    for (Param* p : l->params()) out.push_back(p);
  return out;
}

std::vector<const Param*> Network::params() const {
  auto ps = const_cast<Network*>(this)->params();
  return {ps.begin(), ps.end()};
}

void Network::zero_grad() {
  for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : params()) n += p->size();
  return n;
}

namespace {

bool contains_kind(const LayerList& layers, LayerKind kind) {
  for (const auto& l : layers) {
    if (l->kind() == kind) return true;
    if (const auto* r = dynamic_cast<const Residual*>(l.get())) {
      if (contains_kind(r->main(), kind) || contains_kind(r->shortcut(), kind)) return true;
    }
  }
  return false;
}

void initialize_layers(LayerList& layers, std::mt19937_64& rng) {
  for (auto& l : layers) {
    if (auto* conv = dynamic_cast<Conv2d*>(l.get())) {
      const double sd = std::sqrt(2.0 / (conv->in_channels() * conv->kernel() * conv->kernel()));
      std::normal_distribution<double> dist(0.0, sd);
      for (double& w : conv->weight().value) w = dist(rng);
      std::fill(conv->bias().value.begin(), conv->bias().value.end(), 0.0);
    } else if (auto* dense = dynamic_cast<Dense*>(l.get())) {
      const double sd = std::sqrt(2.0 / dense->in_features());
      std::normal_distribution<double> dist(0.0, sd);
      for (double& w : dense->weight().value) w = dist(rng);
      std::fill(dense->bias().value.begin(), dense->bias().value.end(), 0.0);
    } else if (auto* res = dynamic_cast<Residual*>(l.get())) {
      initialize_layers(res->main(), rng);
      initialize_layers(res->shortcut(), rng);
    }
  }
}

LayerList fold_layers(const LayerList& layers) {
  LayerList out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer* l = layers[i].get();
    const auto* bn = i + 1 < layers.size() ? dynamic_cast<const BatchNorm*>(layers[i + 1].get()) : nullptr;
    if (const auto* res = dynamic_cast<const Residual*>(l)) {
      out.push_back(std::make_unique<Residual>(res->name(), fold_layers(res->main()), fold_layers(res->shortcut())));
      continue;
    }
    if (bn && (l->kind() == LayerKind::conv2d || l->kind() == LayerKind::dense)) {
      const auto scale = bn->scale();
      const auto shift = bn->shift();
      auto fold = [&](auto& layer, int outputs) {
        layer.enable_bias();
        const std::size_t per = layer.weight().value.size() / outputs;
        for (int o = 0; o < outputs; ++o) {
          for (std::size_t k = 0; k < per; ++k) layer.weight().value[o * per + k] *= scale[o];
          layer.bias().value[o] = layer.bias().value[o] * scale[o] + shift[o];
        }
      };
      if (const auto* conv = dynamic_cast<const Conv2d*>(l)) {
        auto copy = std::make_unique<Conv2d>(*conv);
        fold(*copy, copy->out_channels());
        out.push_back(std::move(copy));
      } else {
        auto copy = std::make_unique<Dense>(*dynamic_cast<const Dense*>(l));
        fold(*copy, copy->out_features());
        out.push_back(std::move(copy));
      }
      ++i;
      continue;
    }
    out.push_back(l->clone());
  }
  return out;
}

constexpr char kArchiveMagic[8] = {'I', 'M', 'C', 'X', 'W', '0', '0', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("weight archive truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

bool Network::contains(LayerKind kind) const { return contains_kind(layers_, kind); }

void initialize(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  initialize_layers(net.layers(), rng);
}

Network fold_batch_norm(const Network& net) { return Network(net.input_channels(), fold_layers(net.layers())); }

WeightArchive WeightArchive::from_network(const Network& net) {
  WeightArchive a;
  for (const Param* p : net.params()) a.tensors[p->name] = {p->shape, std::vector<double>(p->value.begin(), p->value.end())};
  return a;
}

std::vector<std::uint8_t> WeightArchive::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kArchiveMagic), std::end(kArchiveMagic));
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, e] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put<std::int32_t>(out, d);
    put<std::uint64_t>(out, e.values.size());
    for (double v : e.values) put<double>(out, v);
  }
  return out;
}

WeightArchive WeightArchive::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) throw IoError("not a weight archive");
  std::size_t pos = 8;
  WeightArchive a;
  const auto count = take<std::uint64_t>(bytes, pos);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto len = take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("weight archive truncated");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    Entry e;
    const auto ndim = take<std::uint32_t>(bytes, pos);
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(take<std::int32_t>(bytes, pos));
    const auto n = take<std::uint64_t>(bytes, pos);
    if (n != product(e.shape)) throw IoError("weight archive: tensor '" + name + "' size does not match its shape");
    e.values.resize(n);
    for (auto& v : e.values) v = take<double>(bytes, pos);
    a.tensors.emplace(std::move(name), std::move(e));
  }
  return a;
}

void WeightArchive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write weights to " + path.string());
}

WeightArchive WeightArchive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight archive " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::size_t apply_weights(Network& net, const WeightArchive& archive, bool allow_partial) {
  std::size_t copied = 0;
  for (Param* p : net.params()) {
    auto it = archive.tensors.find(p->name);
    if (it == archive.tensors.end()) {
      if (allow_partial) continue;
      throw ShapeError("weight archive has no tensor '" + p->name + "'");
    }
    if (it->second.shape != p->shape) {
      if (allow_partial) continue;
      throw ShapeError("weight archive tensor '" + p->name + "' has a different shape");
    }
    p->value.assign(it->second.values.begin(), it->second.values.end());
    ++copied;
  }
  return copied;
}

std::string weights_checksum(const Network& net) {
  const auto bytes = WeightArchive::from_network(net).serialize();
  return Sha256().update(bytes).hex_digest();
}

}  // namespace imcx::nn
