#include "imcx/xmethods.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "imcx/errors.hpp"

namespace imcx::xai {

using nn::Layer;
using nn::LayerKind;
using nn::LayerList;
using nn::LayerTrace;
using nn::LinearLayer;
using nn::WeightVariant;

std::string_view to_string(Method m) {
  switch (m) {
    case Method::gradients: return "gradients";
    case Method::deconvnet: return "deconvnet";
    case Method::guided_backprop: return "guided_backprop";
    case Method::input_times_gradient: return "input_times_gradient";
    case Method::deep_taylor: return "deep_taylor";
    case Method::lrp_epsilon: return "lrp_epsilon";
    case Method::lrp_z: return "lrp_z";
    case Method::lrp_preset_a_flat: return "lrp_preset_a_flat";
    case Method::lrp_preset_b_flat: return "lrp_preset_b_flat";
  }
  return "unknown";
}

Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw ParameterError("unknown explainability method '" + std::string(s) + "'");
}

bool is_signal_method(Method m) { return m == Method::deconvnet || m == Method::guided_backprop; }

void LrpRule::validate() const {
  if (kind == Kind::epsilon && !(epsilon > 0.0)) throw ParameterError("epsilon rule needs epsilon > 0");
  if (kind == Kind::alpha_beta && std::abs(alpha - beta - 1.0) > 1e-12) {
    throw ParameterError("alpha_beta rule needs alpha - beta = 1 (got alpha=" + std::to_string(alpha) +
                         ", beta=" + std::to_string(beta) + ")");
  }
  if (kind == Kind::bounded && !(lo < hi)) throw ParameterError("bounded rule needs lo < hi");
}

std::string LrpRule::to_string() const {
  std::ostringstream s;
  switch (kind) {
    case Kind::z: s << "z"; break;
    case Kind::epsilon: s << "epsilon(" << epsilon << ")"; break;
    case Kind::alpha_beta: s << "alpha_beta(" << alpha << "," << beta << ")"; break;
    case Kind::flat: s << "flat"; break;
    case Kind::bounded: s << "bounded(" << lo << "," << hi << ")"; break;
  }
  return s.str();
}

void LrpRuleConfig::validate() const {
  dense.validate();
  conv.validate();
  if (first) first->validate();
}

LrpRuleConfig preset_rules(Preset preset) {
  LrpRuleConfig c;
  c.dense = LrpRule::eps(0.1);
  c.conv = preset == Preset::a_flat ? LrpRule::alpha_beta(1.0, 0.0) : LrpRule::alpha_beta(2.0, 1.0);
  c.first = LrpRule::flat();
  return c;
}

std::pair<ClassScores, ActivationTrace> record_forward(const nn::Network& net, const Tensor& input) {
  if (input.channels != net.input_channels()) {
    throw ShapeError("input has " + std::to_string(input.channels) + " channels, model expects " +
                     std::to_string(net.input_channels()));
  }
  ActivationTrace trace;
  trace.input = input;
  trace.layers = net.forward_traced(input);
  ClassScores scores = scores_from_logits(trace.output().data);
  return {std::move(scores), std::move(trace)};
}

nn::Network prepare_for_explanation(const nn::Network& net) {
  return net.contains(LayerKind::batch_norm) ? nn::fold_batch_norm(net) : net;
}

namespace {

Tensor one_hot(const Tensor& logits, int target) {
  Tensor r(logits.channels, logits.height, logits.width);
  r.data[static_cast<std::size_t>(target)] = 1.0;
  return r;
}

void check_target(const Tensor& logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw ParameterError("target class " + std::to_string(target) + " outside [0, " +
                         std::to_string(logits.size()) + ")");
  }
}

// a / b elementwise, 0 where b == 0.
Tensor safe_divide(const Tensor& a, const Tensor& b) {
  Tensor out(a.channels, a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = b.data[i] == 0.0 ? 0.0 : a.data[i] / b.data[i];
  return out;
}

Tensor mapped(const Tensor& x, const std::function<double(double)>& f) {
  Tensor out = x;
  for (double& v : out.data) v = f(v);
  return out;
}

Tensor add(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
  return a;
}

Tensor sub(Tensor a, const Tensor& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] -= b.data[i];
  return a;
}

Tensor scaled(Tensor a, double k) {
  for (double& v : a.data) v *= k;
  return a;
}

const Layer* first_affine(const LayerList& layers) {
  for (const auto& l : layers) {
    if (l->kind() == LayerKind::conv2d || l->kind() == LayerKind::dense) return l.get();
    if (l->kind() == LayerKind::residual) {
      const auto& r = static_cast<const nn::Residual&>(*l);
      if (const Layer* f = first_affine(r.main())) return f;
      if (const Layer* f = first_affine(r.shortcut())) return f;
    }
  }
  return nullptr;
}

// ---- gradient family ------------------------------------------------------

enum class BackMode { gradient, deconvnet, guided };

Tensor backprop(const LayerList& layers, const std::vector<LayerTrace>& traces, Tensor g, BackMode mode) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Layer& layer = *layers[k];
    const LayerTrace& t = traces[k];
    switch (layer.kind()) {
      case LayerKind::relu:
        if (mode == BackMode::gradient) {
          g = layer.backward_input(t, g);
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const bool pass = g.data[i] > 0.0 && (mode == BackMode::deconvnet || t.input.data[i] > 0.0);
            if (!pass) g.data[i] = 0.0;
          }
        }
        break;
      case LayerKind::tanh:
        if (mode != BackMode::gradient) {
          throw UnsupportedLayerError("layer '" + layer.name() +
                                      "' (tanh) has no deconvnet/guided backprop rule; only ReLU is supported");
        }
        g = layer.backward_input(t, g);
        break;
      case LayerKind::residual: {
        const auto& r = static_cast<const nn::Residual&>(layer);
        Tensor main = backprop(r.main(), t.branches[0], g, mode);
        g = r.shortcut().empty() ? add(std::move(main), g) : add(std::move(main), backprop(r.shortcut(), t.branches[1], g, mode));
        break;
      }
      default:
        g = layer.backward_input(t, g);
    }
  }
  return g;
}

RelevanceMap backprop_map(const nn::Network& net, const Tensor& input, int target, BackMode mode, Method method) {
  auto [scores, trace] = record_forward(net, input);
  check_target(trace.output(), target);
  RelevanceMap map;
  map.method = method;
  map.target_class = target;
  map.target_score = scores.logits[static_cast<std::size_t>(target)];
  map.values = backprop(net.layers(), trace.layers, one_hot(trace.output(), target), mode);
  return map;
}

// ---- relevance family -----------------------------------------------------

using LinearRuleFn = std::function<Tensor(const LinearLayer&, const LayerTrace&, const Tensor&, bool first)>;

Tensor rule_z(const LinearLayer& l, const Tensor& x, const Tensor& r) {
  const Tensor z = l.apply(x, WeightVariant::original, true);
  return hadamard(x, l.apply_transpose(safe_divide(r, z), WeightVariant::original, x));
}

Tensor rule_epsilon(const LinearLayer& l, const Tensor& x, const Tensor& r, double eps) {
  Tensor z = l.apply(x, WeightVariant::original, true);
  for (double& v : z.data) v += v >= 0.0 ? eps : -eps;
  return hadamard(x, l.apply_transpose(safe_divide(r, z), WeightVariant::original, x));
}

Tensor rule_alpha_beta(const LinearLayer& l, const Tensor& x, const Tensor& r, double alpha, double beta) {
  const Tensor xp = mapped(x, [](double v) { return v > 0.0 ? v : 0.0; });
  const Tensor xn = mapped(x, [](double v) { return v < 0.0 ? v : 0.0; });
  const Tensor zp = add(l.apply(xp, WeightVariant::positive, true), l.apply(xn, WeightVariant::negative, false));
  const Tensor sp = safe_divide(r, zp);
  Tensor out = scaled(add(hadamard(xp, l.apply_transpose(sp, WeightVariant::positive, x)),
                          hadamard(xn, l.apply_transpose(sp, WeightVariant::negative, x))),
                      alpha);
  if (beta != 0.0) {
    const Tensor zn = add(l.apply(xp, WeightVariant::negative, true), l.apply(xn, WeightVariant::positive, false));
    const Tensor sn = safe_divide(r, zn);
    out = sub(std::move(out), scaled(add(hadamard(xp, l.apply_transpose(sn, WeightVariant::negative, x)),
                                         hadamard(xn, l.apply_transpose(sn, WeightVariant::positive, x))),
                                     beta));
  }
  return out;
}

Tensor rule_flat(const LinearLayer& l, const Tensor& x, const Tensor& r) {
  const Tensor fan_in = l.apply(Tensor(x.channels, x.height, x.width, 1.0), WeightVariant::ones, false);
  return l.apply_transpose(safe_divide(r, fan_in), WeightVariant::ones, x);
}

Tensor rule_bounded(const LinearLayer& l, const Tensor& x, const Tensor& r, double lo, double hi) {
  const Tensor low(x.channels, x.height, x.width, lo);
  const Tensor high(x.channels, x.height, x.width, hi);
  const Tensor z = sub(sub(l.apply(x, WeightVariant::original, false), l.apply(low, WeightVariant::positive, false)),
                       l.apply(high, WeightVariant::negative, false));
  const Tensor s = safe_divide(r, z);
  return sub(sub(hadamard(x, l.apply_transpose(s, WeightVariant::original, x)),
                 hadamard(low, l.apply_transpose(s, WeightVariant::positive, x))),
             hadamard(high, l.apply_transpose(s, WeightVariant::negative, x)));
}

Tensor apply_rule(const LrpRule& rule, const LinearLayer& l, const Tensor& x, const Tensor& r) {
  switch (rule.kind) {
    case LrpRule::Kind::z: return rule_z(l, x, r);
    case LrpRule::Kind::epsilon: return rule_epsilon(l, x, r, rule.epsilon);
    case LrpRule::Kind::alpha_beta: return rule_alpha_beta(l, x, r, rule.alpha, rule.beta);
    case LrpRule::Kind::flat: return rule_flat(l, x, r);
    case LrpRule::Kind::bounded: return rule_bounded(l, x, r, rule.lo, rule.hi);
  }
  return r;
}

Tensor propagate(const LayerList& layers, const std::vector<LayerTrace>& traces, Tensor r, const Layer* first,
                 const LinearRuleFn& linear) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Layer& layer = *layers[k];
    const LayerTrace& t = traces[k];
    switch (layer.kind()) {
      case LayerKind::conv2d:
      case LayerKind::dense:
        r = linear(static_cast<const LinearLayer&>(layer), t, r, &layer == first);
        break;
      case LayerKind::avg_pool:
      case LayerKind::global_avg_pool:
        r = rule_z(static_cast<const LinearLayer&>(layer), t.input, r);
        break;
      case LayerKind::relu:
        break;
      case LayerKind::max_pool:
      case LayerKind::flatten:
      case LayerKind::replicate:
        r = layer.backward_input(t, r);
        break;
      case LayerKind::residual: {
        const auto& res = static_cast<const nn::Residual&>(layer);
        const Tensor& main_out = t.branches[0].back().output;
        const Tensor& side_out = res.shortcut().empty() ? t.input : t.branches[1].back().output;
        const Tensor rm = hadamard(main_out, safe_divide(r, t.output));
        const Tensor rs = hadamard(side_out, safe_divide(r, t.output));
        Tensor in = propagate(res.main(), t.branches[0], rm, first, linear);
        r = res.shortcut().empty() ? add(std::move(in), rs)
                                   : add(std::move(in), propagate(res.shortcut(), t.branches[1], rs, first, linear));
        break;
      }
      case LayerKind::tanh:
        throw UnsupportedLayerError("layer '" + layer.name() + "' (tanh) is not supported by relevance propagation");
      case LayerKind::batch_norm:
        throw UnsupportedLayerError("layer '" + layer.name() +
                                    "' (batch_norm) must be folded into its affine layer before explanation");
    }
  }
  return r;
}

RelevanceMap relevance_map(const nn::Network& net, const Tensor& input, int target, Method method,
                           const LinearRuleFn& linear) {
  auto [scores, trace] = record_forward(net, input);
  check_target(trace.output(), target);
  RelevanceMap map;
  map.method = method;
  map.target_class = target;
  map.target_score = scores.logits[static_cast<std::size_t>(target)];
  Tensor r = one_hot(trace.output(), target);
  r.data[static_cast<std::size_t>(target)] = map.target_score;
  map.values = propagate(net.layers(), trace.layers, std::move(r), first_affine(net.layers()), linear);
  return map;
}

}  // namespace

RelevanceMap gradient_map(const nn::Network& net, const Tensor& input, int target_class) {
  return backprop_map(net, input, target_class, BackMode::gradient, Method::gradients);
}

RelevanceMap deconvnet_map(const nn::Network& net, const Tensor& input, int target_class) {
  return backprop_map(net, input, target_class, BackMode::deconvnet, Method::deconvnet);
}

RelevanceMap guided_backprop_map(const nn::Network& net, const Tensor& input, int target_class) {
  return backprop_map(net, input, target_class, BackMode::guided, Method::guided_backprop);
}

RelevanceMap input_times_gradient_map(const nn::Network& net, const Tensor& input, int target_class) {
  RelevanceMap map = gradient_map(net, input, target_class);
  map.method = Method::input_times_gradient;
  map.values = hadamard(input, map.values);
  return map;
}

RelevanceMap lrp_map(const nn::Network& net, const Tensor& input, int target_class, const LrpRuleConfig& rules) {
  rules.validate();
  return relevance_map(net, input, target_class, Method::lrp_z,
                       [&](const LinearLayer& l, const LayerTrace& t, const Tensor& r, bool first) {
                         const LrpRule& rule = first && rules.first ? *rules.first
                                               : l.kind() == LayerKind::conv2d ? rules.conv
                                                                               : rules.dense;
                         return apply_rule(rule, l, t.input, r);
                       });
}

// Composite z+ / z^B propagation for nonnegative inputs bounded by [0, 1].
RelevanceMap deep_taylor_map(const nn::Network& net, const Tensor& input, int target_class) {
  for (double v : input.data) {
    if (v < 0.0) {
      throw ValidationError("deep_taylor needs nonnegative inputs in [0, 1]; normalise patches with unit_max first");
    }
  }
  return relevance_map(net, input, target_class, Method::deep_taylor,
                       [](const LinearLayer& l, const LayerTrace& t, const Tensor& r, bool first) {
                         const Tensor& x = t.input;
                         if (first) {
                           const Tensor high(x.channels, x.height, x.width, 1.0);
                           const Tensor z = sub(l.apply(x, WeightVariant::original, false),
                                                l.apply(high, WeightVariant::negative, false));
                           const Tensor s = safe_divide(r, z);
                           return sub(hadamard(x, l.apply_transpose(s, WeightVariant::original, x)),
                                      hadamard(high, l.apply_transpose(s, WeightVariant::negative, x)));
                         }
                         const Tensor z = l.apply(x, WeightVariant::positive, false);
                         return hadamard(x, l.apply_transpose(safe_divide(r, z), WeightVariant::positive, x));
                       });
}

double conservation_residual(const RelevanceMap& map) {
  return std::abs(sum(map.values) - map.target_score) / std::max(std::abs(map.target_score), 1e-12);
}

RelevanceMap explain(const nn::Network& net, const Tensor& input, Method method, int target_class) {
  if (net.contains(LayerKind::batch_norm)) return explain(prepare_for_explanation(net), input, method, target_class);
  RelevanceMap map;
  switch (method) {
    case Method::gradients: map = gradient_map(net, input, target_class); break;
    case Method::deconvnet: map = deconvnet_map(net, input, target_class); break;
    case Method::guided_backprop: map = guided_backprop_map(net, input, target_class); break;
    case Method::input_times_gradient: map = input_times_gradient_map(net, input, target_class); break;
    case Method::deep_taylor: map = deep_taylor_map(net, input, target_class); break;
    case Method::lrp_epsilon:
      map = lrp_map(net, input, target_class, LrpRuleConfig::uniform(LrpRule::eps(kDefaultEpsilon)));
      break;
    case Method::lrp_z: map = lrp_map(net, input, target_class, LrpRuleConfig::uniform(LrpRule::z())); break;
    case Method::lrp_preset_a_flat: map = lrp_map(net, input, target_class, preset_rules(Preset::a_flat)); break;
    case Method::lrp_preset_b_flat: map = lrp_map(net, input, target_class, preset_rules(Preset::b_flat)); break;
  }
  map.method = method;
  if (!all_finite(map.values)) {
    throw Error(std::string(to_string(method)) + " produced non-finite relevance values");
  }
  return map;
}

RelevanceMap explain(const TrainedModel& model, const Patch& patch, Method method, int target_class) {
  if (patch.data.channels != model.input_channels) {
    throw ShapeError("patch " + patch.id() + " has " + std::to_string(patch.data.channels) +
                     " channels, model expects " + std::to_string(model.input_channels));
  }
  RelevanceMap map = explain(model.network, patch.data, method, target_class);
  map.patch_ref = patch.id();
  return map;
}

void save_map(const std::filesystem::path& stem, const RelevanceMap& map, const std::string& model_checksum) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::vector<char> bytes(map.values.size() * 4);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const float f = static_cast<float>(map.values.data[i]);
    std::memcpy(bytes.data() + 4 * i, &f, 4);
  }
  std::ofstream bin(stem.string() + ".f32", std::ios::binary);
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw IoError("cannot write " + stem.string() + ".f32");
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(map.method));
  j["target_class"] = map.target_class;
  j["target_score"] = map.target_score;
  j["shape"] = {map.values.channels, map.values.height, map.values.width};
  j["patch"] = map.patch_ref;
  j["model_sha256"] = model_checksum;
  std::ofstream(stem.string() + ".json") << j.dump(2) << '\n';
}

RelevanceMap load_map(const std::filesystem::path& stem) {
  std::ifstream meta_in(stem.string() + ".json");
  if (!meta_in) throw IoError("missing " + stem.string() + ".json");
  const auto j = nlohmann::json::parse(meta_in);
  RelevanceMap map;
  map.method = parse_method(j.at("method").get<std::string>());
  map.target_class = j.at("target_class").get<int>();
  map.target_score = j.at("target_score").get<double>();
  map.patch_ref = j.value("patch", std::string());
  const auto shape = j.at("shape").get<std::vector<int>>();
  map.values = Tensor(shape.at(0), shape.at(1), shape.at(2));
  std::ifstream bin(stem.string() + ".f32", std::ios::binary);
  std::vector<char> bytes(map.values.size() * 4);
  bin.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (bin.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated " + stem.string() + ".f32");
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 4 * i, 4);
    map.values.data[i] = f;
  }
  return map;
}

}  // namespace imcx::xai
