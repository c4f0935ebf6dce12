#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "imcx/nn.hpp"
#include "imcx/tensor.hpp"
#include "imcx/trainer.hpp"

namespace imcx::xai {

enum class Method {
  gradients,
  deconvnet,
  guided_backprop,
  input_times_gradient,
  deep_taylor,
  lrp_epsilon,
  lrp_z,
  lrp_preset_a_flat,
  lrp_preset_b_flat,
};

inline constexpr std::array<Method, 9> kAllMethods = {
    Method::gradients,   Method::deconvnet,   Method::guided_backprop,   Method::input_times_gradient,
    Method::deep_taylor, Method::lrp_epsilon, Method::lrp_z,             Method::lrp_preset_a_flat,
    Method::lrp_preset_b_flat,
};

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

// Signal methods (deconvnet, guided backprop) show input patterns; the rest attribute the output.
bool is_signal_method(Method m);

struct RelevanceMap {
  Method method = Method::gradients;
  Tensor values;  // same shape as the explained input
  int target_class = 0;
  double target_score = 0.0;  // the explained pre-softmax logit
  std::string patch_ref;
};

struct LrpRule {
  enum class Kind { z, epsilon, alpha_beta, flat, bounded };
  Kind kind = Kind::z;
  double epsilon = 1e-7;
  double alpha = 1.0;
  double beta = 0.0;
  double lo = 0.0;  // input box for the bounded (z^B) rule
  double hi = 1.0;

  static LrpRule z() { return {}; }
  static LrpRule eps(double e) { return {Kind::epsilon, e}; }
  static LrpRule alpha_beta(double a, double b) { return {Kind::alpha_beta, 1e-7, a, b}; }
  static LrpRule flat() { return {Kind::flat}; }
  static LrpRule bounded(double l, double h) { return {Kind::bounded, 1e-7, 1.0, 0.0, l, h}; }

  void validate() const;
  std::string to_string() const;
};

// Rules per layer class. `first`, when set, overrides the rule of the input-nearest
// convolution or dense layer.
struct LrpRuleConfig {
  LrpRule dense = LrpRule::z();
  LrpRule conv = LrpRule::z();
  std::optional<LrpRule> first;

  static LrpRuleConfig uniform(const LrpRule& r) { return {r, r, std::nullopt}; }
  void validate() const;
};

enum class Preset { a_flat, b_flat };
LrpRuleConfig preset_rules(Preset preset);

inline constexpr double kDefaultEpsilon = 1e-7;

struct ActivationTrace {
  Tensor input;
  std::vector<nn::LayerTrace> layers;
  const Tensor& output() const { return layers.empty() ? input : layers.back().output; }
};

std::pair<ClassScores, ActivationTrace> record_forward(const nn::Network& net, const Tensor& input);

// Copy of the network with batch normalisation folded into the preceding affine layers.
nn::Network prepare_for_explanation(const nn::Network& net);

// The functions below expect networks without BatchNorm (see prepare_for_explanation);
// explain() takes care of that.
RelevanceMap gradient_map(const nn::Network& net, const Tensor& input, int target_class);
RelevanceMap deconvnet_map(const nn::Network& net, const Tensor& input, int target_class);
RelevanceMap guided_backprop_map(const nn::Network& net, const Tensor& input, int target_class);
RelevanceMap input_times_gradient_map(const nn::Network& net, const Tensor& input, int target_class);
RelevanceMap lrp_map(const nn::Network& net, const Tensor& input, int target_class, const LrpRuleConfig& rules);
RelevanceMap deep_taylor_map(const nn::Network& net, const Tensor& input, int target_class);

// |sum(values) - target_score| / max(|target_score|, 1e-12)
double conservation_residual(const RelevanceMap& map);

RelevanceMap explain(const nn::Network& net, const Tensor& input, Method method, int target_class);
RelevanceMap explain(const TrainedModel& model, const Patch& patch, Method method, int target_class);

// <stem>.f32 (float32 little-endian C,H,W) and <stem>.json metadata.
void save_map(const std::filesystem::path& stem, const RelevanceMap& map, const std::string& model_checksum);
RelevanceMap load_map(const std::filesystem::path& stem);

}  // namespace imcx::xai
