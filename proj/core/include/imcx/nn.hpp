#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "imcx/tensor.hpp"

namespace imcx::nn {

enum class LayerKind {
  conv2d,
  dense,
  relu,
  tanh,
  max_pool,
  avg_pool,
  global_avg_pool,
  flatten,
  batch_norm,
  residual,
  replicate,
};

std::string_view to_string(LayerKind kind);

struct Param {
  std::string name;  // "<layer>.weight", "<layer>.bias", ...
  std::vector<int> shape;
  Buffer value;
  Buffer grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<int> s, bool train = true);
  std::size_t size() const { return value.size(); }
};

// Activations recorded by a forward pass. Residual layers record their two branches.
struct LayerTrace {
  Tensor input;
  Tensor output;
  std::vector<std::vector<LayerTrace>> branches;
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual Tensor forward(const Tensor& in) const = 0;
  virtual void forward_traced(const Tensor& in, LayerTrace& trace) const;

  // d(out)/d(in) transposed applied to grad_out.
  virtual Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const = 0;
  // Like backward_input, and accumulates parameter gradients into Param::grad.
  virtual Tensor backward(const LayerTrace& trace, const Tensor& grad_out);

  virtual std::vector<Param*> params() { return {}; }
  std::vector<const Param*> params() const;

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

enum class WeightVariant { original, positive, negative, ones };

// Affine layers. The LRP rules are written against this interface: `apply` evaluates the
// layer with its weights replaced by a variant, `apply_transpose` is the matching adjoint.
class LinearLayer : public Layer {
 public:
  using Layer::Layer;

  // Bias (its positive or negative part for those variants) is added only when with_bias.
  virtual Tensor apply(const Tensor& x, WeightVariant variant, bool with_bias) const = 0;
  virtual Tensor apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const = 0;
  virtual bool has_bias() const { return false; }

  Tensor forward(const Tensor& in) const override { return apply(in, WeightVariant::original, true); }
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override {
    return apply_transpose(grad_out, WeightVariant::original, trace.input);
  }
};

class Conv2d final : public LinearLayer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0,
         bool bias = true);

  LayerKind kind() const override { return LayerKind::conv2d; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
  Tensor apply(const Tensor& x, WeightVariant variant, bool with_bias) const override;
  Tensor apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const override;
  Tensor backward(const LayerTrace& trace, const Tensor& grad_out) override;
  std::vector<Param*> params() override;
  bool has_bias() const override { return bias_enabled_; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  int padding() const { return pad_; }
  Param& weight() { return weight_; }  // (out, in, k, k)
  const Param& weight() const { return weight_; }
  Param& bias() { return bias_; }
  const Param& bias() const { return bias_; }
  void enable_bias();

 private:
  int in_, out_, k_, stride_, pad_;
  bool bias_enabled_;
  Param weight_;
  Param bias_;
};

class Dense final : public LinearLayer {
 public:
  Dense(std::string name, int in_features, int out_features, bool bias = true);

  LayerKind kind() const override { return LayerKind::dense; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }
  Tensor apply(const Tensor& x, WeightVariant variant, bool with_bias) const override;
  Tensor apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const override;
  Tensor backward(const LayerTrace& trace, const Tensor& grad_out) override;
  std::vector<Param*> params() override;
  bool has_bias() const override { return bias_enabled_; }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param& weight() { return weight_; }  // (out, in)
  const Param& weight() const { return weight_; }
  Param& bias() { return bias_; }
  const Param& bias() const { return bias_; }
  void enable_bias();

 private:
  int in_, out_;
  bool bias_enabled_;
  Param weight_;
  Param bias_;
};

// Average pooling without padding; the window mean is a fixed positive linear map.
class AvgPool2d final : public LinearLayer {
 public:
  AvgPool2d(std::string name, int kernel, int stride);
  LayerKind kind() const override { return LayerKind::avg_pool; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<AvgPool2d>(*this); }
  Tensor apply(const Tensor& x, WeightVariant variant, bool with_bias) const override;
  Tensor apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const override;

 private:
  int k_, stride_;
};

// (C, H, W) -> (C, 1, 1)
class GlobalAvgPool final : public LinearLayer {
 public:
  using LinearLayer::LinearLayer;
  LayerKind kind() const override { return LayerKind::global_avg_pool; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
  Tensor apply(const Tensor& x, WeightVariant variant, bool with_bias) const override;
  Tensor apply_transpose(const Tensor& s, WeightVariant variant, const Tensor& input_like) const override;
};

class ReLU final : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::relu; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(*this); }
  Tensor forward(const Tensor& in) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
};

class Tanh final : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::tanh; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Tanh>(*this); }
  Tensor forward(const Tensor& in) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
};

// Max pooling with implicit -inf padding. Ties go to the first element in scan order.
class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::string name, int kernel, int stride, int padding = 0);
  LayerKind kind() const override { return LayerKind::max_pool; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }
  Tensor forward(const Tensor& in) const override;
  // Routes every output value to its window's winner; used for gradients and relevance alike.
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;

 private:
  std::vector<std::size_t> winners(const Tensor& in, int out_h, int out_w) const;
  int k_, stride_, pad_;
};

// (C, H, W) -> (C*H*W, 1, 1)
class Flatten final : public Layer {
 public:
  using Layer::Layer;
  LayerKind kind() const override { return LayerKind::flatten; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }
  Tensor forward(const Tensor& in) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
};

// Inference-mode batch normalisation; running statistics stay frozen during training.
class BatchNorm final : public Layer {
 public:
  BatchNorm(std::string name, int channels, double eps = 1e-5);
  LayerKind kind() const override { return LayerKind::batch_norm; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }
  Tensor forward(const Tensor& in) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
  Tensor backward(const LayerTrace& trace, const Tensor& grad_out) override;
  std::vector<Param*> params() override;

  // y = scale[c] * x + shift[c]
  std::vector<double> scale() const;
  std::vector<double> shift() const;
  int channels() const { return channels_; }

 private:
  int channels_;
  double eps_;
  Param gamma_, beta_, mean_, var_;
};

// Copies a single input channel `copies` times (1 -> 3 for RGB-pretrained backbones).
class Replicate final : public Layer {
 public:
  Replicate(std::string name, int copies);
  LayerKind kind() const override { return LayerKind::replicate; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Replicate>(*this); }
  Tensor forward(const Tensor& in) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
  int copies() const { return copies_; }

 private:
  int copies_;
};

using LayerList = std::vector<std::unique_ptr<Layer>>;

LayerList clone_layers(const LayerList& layers);

// out = main(x) + shortcut(x); an empty shortcut is the identity.
class Residual final : public Layer {
 public:
  Residual(std::string name, LayerList main, LayerList shortcut);
  Residual(const Residual& other);
  LayerKind kind() const override { return LayerKind::residual; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Residual>(*this); }
  Tensor forward(const Tensor& in) const override;
  void forward_traced(const Tensor& in, LayerTrace& trace) const override;
  Tensor backward_input(const LayerTrace& trace, const Tensor& grad_out) const override;
  Tensor backward(const LayerTrace& trace, const Tensor& grad_out) override;
  std::vector<Param*> params() override;

  const LayerList& main() const { return main_; }
  const LayerList& shortcut() const { return shortcut_; }
  LayerList& main() { return main_; }
  LayerList& shortcut() { return shortcut_; }

 private:
  LayerList main_;
  LayerList shortcut_;
};

Tensor run_layers(const LayerList& layers, const Tensor& x);
std::vector<LayerTrace> trace_layers(const LayerList& layers, const Tensor& x);
Tensor backward_layers(LayerList& layers, const std::vector<LayerTrace>& traces, Tensor grad);
Tensor backward_input_layers(const LayerList& layers, const std::vector<LayerTrace>& traces, Tensor grad);

class Network {
 public:
  Network() = default;
  Network(int input_channels, LayerList layers);
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  Tensor forward(const Tensor& x) const;
  std::vector<LayerTrace> forward_traced(const Tensor& x) const;
  // Accumulates parameter gradients; returns d(loss)/d(input).
  Tensor backward(const std::vector<LayerTrace>& traces, const Tensor& grad_out);

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  void zero_grad();
  std::size_t parameter_count() const;

  const LayerList& layers() const { return layers_; }
  LayerList& layers() { return layers_; }
  int input_channels() const { return input_channels_; }
  bool contains(LayerKind kind) const;

 private:
  int input_channels_ = 0;
  LayerList layers_;
};

// He-normal weights, zero biases, identity batch norm.
void initialize(Network& net, std::uint64_t seed);

// Merges every BatchNorm that directly follows a Conv2d or Dense into that layer.
Network fold_batch_norm(const Network& net);

// Named tensor archive ("IMCXW001"), little-endian, float64 payloads.
struct WeightArchive {
  struct Entry {
    std::vector<int> shape;
    std::vector<double> values;
  };
  std::map<std::string, Entry> tensors;

  static WeightArchive from_network(const Network& net);
  std::vector<std::uint8_t> serialize() const;
  static WeightArchive deserialize(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static WeightArchive load(const std::filesystem::path& path);
};

// Copies matching tensors into the network. Missing names or shape mismatches raise
// ShapeError unless `allow_partial`; returns the number of tensors copied.
std::size_t apply_weights(Network& net, const WeightArchive& archive, bool allow_partial = false);

std::string weights_checksum(const Network& net);

}  // namespace imcx::nn
