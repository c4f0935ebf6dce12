#include "imcx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "imcx/errors.hpp"
#include "imcx/random.hpp"

namespace imcx {

using nn::LayerList;

std::string_view to_string(Backbone b) {
  switch (b) {
    case Backbone::resnet50: return "resnet50";
    case Backbone::vgg16: return "vgg16";
    case Backbone::smallcnn: return "smallcnn";
  }
  return "unknown";
}

Backbone parse_backbone(std::string_view s) {
  if (s == "resnet50") return Backbone::resnet50;
  if (s == "vgg16") return Backbone::vgg16;
  if (s == "smallcnn") return Backbone::smallcnn;
  throw ParameterError("unsupported backbone '" + std::string(s) + "'");
}

std::string_view to_string(WeightInit w) { return w == WeightInit::random ? "random" : "pretrained_imagenet"; }

WeightInit parse_weight_init(std::string_view s) {
  if (s == "random") return WeightInit::random;
  if (s == "pretrained_imagenet" || s == "imagenet") return WeightInit::pretrained_imagenet;
  throw ParameterError("unknown weight init '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be > 0");
  if (max_epochs < 1) throw ParameterError("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw ParameterError("early_stop_patience must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["backbone"] = std::string(to_string(backbone));
  j["init"] = std::string(to_string(init));
  j["pooling"] = "avg";
  j["output_activation"] = "softmax";
  j["optimizer"] = "adam";
  j["learning_rate"] = learning_rate;
  j["loss"] = "categorical_crossentropy";
  j["early_stop_patience"] = early_stop_patience;
  j["early_stop_monitor"] = "validation_accuracy";
  j["max_epochs"] = max_epochs;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["channel_selection"] = channel_selection;
  j["augment"] = augment;
  j["replicate_to_rgb"] = replicate_to_rgb;
  j["pretrained_weights"] = pretrained_weights.string();
  j["smallcnn_pool"] = smallcnn_pool == SmallCnnPool::max ? "max" : "avg";
  j["smallcnn_bias"] = smallcnn_bias;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    auto fixed = [&](const char* key, const char* only) {
      if (j.contains(key) && j.at(key).get<std::string>() != only) {
        throw ParameterError(std::string(key) + " must be '" + only + "'");
      }
    };
    fixed("pooling", "avg");
    fixed("output_activation", "softmax");
    fixed("optimizer", "adam");
    fixed("loss", "categorical_crossentropy");
    fixed("early_stop_monitor", "validation_accuracy");
    if (j.contains("backbone")) c.backbone = parse_backbone(j.at("backbone").get<std::string>());
    if (j.contains("init")) c.init = parse_weight_init(j.at("init").get<std::string>());
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.channel_selection = j.value("channel_selection", c.channel_selection);
    c.augment = j.value("augment", c.augment);
    c.replicate_to_rgb = j.value("replicate_to_rgb", c.replicate_to_rgb);
    c.pretrained_weights = j.value("pretrained_weights", std::string());
    c.smallcnn_pool = j.value("smallcnn_pool", std::string("max")) == "avg" ? SmallCnnPool::avg : SmallCnnPool::max;
    c.smallcnn_bias = j.value("smallcnn_bias", c.smallcnn_bias);
    c.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

KernelTensor adapt_input_channels(const KernelTensor& pretrained, int target_channels) {
  if (target_channels < 1) throw ParameterError("target_channels must be >= 1");
  if (pretrained.in == target_channels) return pretrained;
  const std::size_t plane = static_cast<std::size_t>(pretrained.k) * pretrained.k;
  KernelTensor out{pretrained.out, target_channels, pretrained.k,
                   std::vector<double>(static_cast<std::size_t>(pretrained.out) * target_channels * plane)};
  const double scale = target_channels == 1 ? 1.0 : static_cast<double>(pretrained.in) / target_channels;
  const int keep = target_channels < 3 ? 0 : std::min(pretrained.in, target_channels);
  for (int o = 0; o < pretrained.out; ++o) {
    std::vector<double> mean(plane, 0.0);
    for (int i = 0; i < pretrained.in; ++i)
      for (std::size_t q = 0; q < plane; ++q)
        mean[q] += pretrained.values[(static_cast<std::size_t>(o) * pretrained.in + i) * plane + q] / pretrained.in;
    for (int t = 0; t < target_channels; ++t) {
      double* dst = out.values.data() + (static_cast<std::size_t>(o) * target_channels + t) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const double v = t < keep ? pretrained.values[(static_cast<std::size_t>(o) * pretrained.in + t) * plane + q]
                                  : mean[q];
        dst[q] = scale * v;
      }
    }
  }
  return out;
}

namespace {

void add_conv_relu(LayerList& l, const std::string& conv, const std::string& relu, int in, int out, int k, int stride,
                   int pad, bool bias) {
  l.push_back(std::make_unique<nn::Conv2d>(conv, in, out, k, stride, pad, bias));
  l.push_back(std::make_unique<nn::ReLU>(relu));
}

LayerList smallcnn(int channels, const TrainConfig& cfg) {
  LayerList l;
  const int widths[] = {16, 32, 64, 128};
  int in = channels;
  for (int b = 0; b < 4; ++b) {
    const std::string n = std::to_string(b + 1);
    add_conv_relu(l, "conv" + n, "relu" + n, in, widths[b], 3, 1, 1, cfg.smallcnn_bias);
    if (cfg.smallcnn_pool == SmallCnnPool::max) {
      l.push_back(std::make_unique<nn::MaxPool2d>("pool" + n, 2, 2));
    } else {
      l.push_back(std::make_unique<nn::AvgPool2d>("pool" + n, 2, 2));
    }
    in = widths[b];
  }
  l.push_back(std::make_unique<nn::GlobalAvgPool>("gap"));
  l.push_back(std::make_unique<nn::Dense>("fc", 128, 2, cfg.smallcnn_bias));
  return l;
}

// Layer names follow torchvision so exported ImageNet state dicts load by name.
LayerList vgg16(int channels) {
  LayerList l;
  const int cfg[] = {64, 64, -1, 128, 128, -1, 256, 256, 256, -1, 512, 512, 512, -1, 512, 512, 512, -1};
  int in = channels;
  int index = 0;
  for (int v : cfg) {
    if (v < 0) {
      l.push_back(std::make_unique<nn::MaxPool2d>("features." + std::to_string(index++), 2, 2));
    } else {
      const std::string conv = "features." + std::to_string(index++);
      const std::string relu = "features." + std::to_string(index++);
      add_conv_relu(l, conv, relu, in, v, 3, 1, 1, true);
      in = v;
    }
  }
  l.push_back(std::make_unique<nn::GlobalAvgPool>("avgpool"));
  l.push_back(std::make_unique<nn::Dense>("fc", 512, 2));
  return l;
}

std::unique_ptr<nn::Layer> bottleneck(const std::string& name, int in, int width, int stride) {
  const int out = width * 4;
  LayerList main;
  main.push_back(std::make_unique<nn::Conv2d>(name + ".conv1", in, width, 1, 1, 0, false));
  main.push_back(std::make_unique<nn::BatchNorm>(name + ".bn1", width));
  main.push_back(std::make_unique<nn::ReLU>(name + ".relu1"));
  main.push_back(std::make_unique<nn::Conv2d>(name + ".conv2", width, width, 3, stride, 1, false));
  main.push_back(std::make_unique<nn::BatchNorm>(name + ".bn2", width));
  main.push_back(std::make_unique<nn::ReLU>(name + ".relu2"));
  main.push_back(std::make_unique<nn::Conv2d>(name + ".conv3", width, out, 1, 1, 0, false));
  main.push_back(std::make_unique<nn::BatchNorm>(name + ".bn3", out));
  LayerList shortcut;
  if (stride != 1 || in != out) {
    shortcut.push_back(std::make_unique<nn::Conv2d>(name + ".downsample.0", in, out, 1, stride, 0, false));
    shortcut.push_back(std::make_unique<nn::BatchNorm>(name + ".downsample.1", out));
  }
  return std::make_unique<nn::Residual>(name, std::move(main), std::move(shortcut));
}

LayerList resnet50(int channels) {
  LayerList l;
  l.push_back(std::make_unique<nn::Conv2d>("conv1", channels, 64, 7, 2, 3, false));
  l.push_back(std::make_unique<nn::BatchNorm>("bn1", 64));
  l.push_back(std::make_unique<nn::ReLU>("relu"));
  l.push_back(std::make_unique<nn::MaxPool2d>("maxpool", 3, 2, 1));
  const int blocks[] = {3, 4, 6, 3};
  const int widths[] = {64, 128, 256, 512};
  int in = 64;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < blocks[s]; ++b) {
      const std::string name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      l.push_back(bottleneck(name, in, widths[s], stride));
      l.push_back(std::make_unique<nn::ReLU>(name + ".relu"));
      in = widths[s] * 4;
    }
  }
  l.push_back(std::make_unique<nn::GlobalAvgPool>("avgpool"));
  l.push_back(std::make_unique<nn::Dense>("fc", 2048, 2));
  return l;
}

nn::Conv2d* first_conv(nn::Network& net) {
  for (auto& l : net.layers())
    if (auto* c = dynamic_cast<nn::Conv2d*>(l.get())) return c;
  return nullptr;
}

void load_pretrained(nn::Network& net, const TrainConfig& cfg) {
  if (cfg.pretrained_weights.empty()) {
    throw ParameterError("init=pretrained_imagenet needs a weight archive (pretrained_weights); "
                         "tools/export_pretrained.py converts torchvision ImageNet weights");
  }
  nn::WeightArchive archive = nn::WeightArchive::load(cfg.pretrained_weights);
  nn::Conv2d* conv = first_conv(net);
  if (conv) {
    auto it = archive.tensors.find(conv->weight().name);
    if (it != archive.tensors.end() && it->second.shape.size() == 4 &&
        it->second.shape[1] != conv->in_channels()) {
      const auto& s = it->second.shape;
      KernelTensor k{s[0], s[1], s[2], it->second.values};
      KernelTensor adapted = adapt_input_channels(k, conv->in_channels());
      it->second.shape[1] = adapted.in;
      it->second.values = std::move(adapted.values);
    }
  }
  const std::size_t copied = nn::apply_weights(net, archive, /*allow_partial=*/true);
  if (copied == 0) {
    throw ShapeError("weight archive " + cfg.pretrained_weights.string() + " matches no tensor of " +
                     std::string(to_string(cfg.backbone)));
  }
}

}  // namespace

nn::Network build_model(const TrainConfig& config, int input_channels) {
  config.validate();
  if (input_channels < 1) throw ParameterError("input_channels must be >= 1");
  LayerList layers;
  int backbone_channels = input_channels;
  if (config.replicate_to_rgb) {
    if (input_channels != 1) throw ParameterError("replicate_to_rgb needs single-channel input");
    layers.push_back(std::make_unique<nn::Replicate>("input_replicate", 3));
    backbone_channels = 3;
  }
  LayerList body;
  switch (config.backbone) {
    case Backbone::smallcnn: body = smallcnn(backbone_channels, config); break;
    case Backbone::vgg16: body = vgg16(backbone_channels); break;
    case Backbone::resnet50: body = resnet50(backbone_channels); break;
  }
  for (auto& l : body) layers.push_back(std::move(l));
  nn::Network net(input_channels, std::move(layers));
  nn::initialize(net, derive_seed(config.seed, 0));
  if (config.init == WeightInit::pretrained_imagenet) load_pretrained(net, config);
  return net;
}

int ClassScores::predicted() const {
  return static_cast<int>(std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
}

ClassScores scores_from_logits(std::span<const double> logits) {
  ClassScores s;
  s.logits.assign(logits.begin(), logits.end());
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  for (double l : logits) s.probabilities.push_back(std::exp(l - m) / z);
  return s;
}

ClassScores predict(const nn::Network& net, const Tensor& input) {
  const Tensor out = net.forward(input);
  return scores_from_logits(out.data);
}

ClassScores predict(const TrainedModel& model, const Patch& patch) {
  if (patch.data.channels != model.input_channels) {
    throw ShapeError("patch has " + std::to_string(patch.data.channels) + " channels, model expects " +
                     std::to_string(model.input_channels));
  }
  return predict(model.network, patch.data);
}

Evaluation evaluate(const nn::Network& net, std::span<const Patch> patches, std::span<const std::size_t> indices) {
  Evaluation ev;
  if (indices.empty()) return ev;
  std::size_t correct = 0;
  for (std::size_t i : indices) {
    const ClassScores s = predict(net, patches[i].data);
    const int label = static_cast<int>(patches[i].class_label);
    ev.loss -= std::log(std::max(s.probabilities[label], 1e-300));
    const int pred = s.predicted();
    ev.predictions.push_back(pred);
    ev.labels.push_back(label);
    if (pred == label) ++correct;
  }
  ev.loss /= static_cast<double>(indices.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return ev;
}

namespace {

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

void adam_step(std::vector<nn::Param*>& params, AdamState& st, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-7;
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->size(), 0.0);
      st.v.emplace_back(p->size(), 0.0);
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Param* p = params[k];
    if (!p->trainable) continue;
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      p->value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

Tensor flip(const Tensor& t, bool horizontal) {
  Tensor out(t.channels, t.height, t.width);
  for (int c = 0; c < t.channels; ++c)
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x)
        out.at(c, y, x) = horizontal ? t.at(c, y, t.width - 1 - x) : t.at(c, t.height - 1 - y, x);
  return out;
}

}  // namespace

TrainedModel train(nn::Network model, std::span<const Patch> patches, const DatasetSplit& split,
                   const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (split.train.empty() || split.validation.empty()) {
    throw ParameterError("training needs non-empty train and validation partitions");
  }
  std::vector<std::string> channel_names;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (std::size_t i : *part) {
      if (i >= patches.size()) throw ParameterError("split references patch " + std::to_string(i) + " out of range");
      if (patches[i].data.channels != model.input_channels()) {
        throw ShapeError("patch " + patches[i].id() + " has " + std::to_string(patches[i].data.channels) +
                         " channels but the model expects " + std::to_string(model.input_channels()));
      }
      if (channel_names.empty()) channel_names = patches[i].channel_names;
    }
  }

  std::mt19937_64 order_rng(derive_seed(config.seed, 1));
  std::mt19937_64 aug_rng(derive_seed(config.seed, 2));
  auto params = model.params();
  AdamState adam;

  TrainedModel result;
  result.config = config;
  result.input_channels = model.input_channels();
  result.channel_names = channel_names;
  result.split_fingerprint = split_fingerprint(split, patches);

  std::vector<Buffer> best_weights;
  double best_acc = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  std::vector<std::size_t> order = split.train;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const Patch& p = patches[order[b]];
        const int label = static_cast<int>(p.class_label);
        Tensor input = p.data;
        if (config.augment) {
          const auto pick = std::uniform_int_distribution<int>(0, 3)(aug_rng);
          if (pick & 1) input = flip(input, true);
          if (pick & 2) input = flip(input, false);
        }
        const auto traces = model.forward_traced(input);
        const ClassScores s = scores_from_logits(traces.back().output.data);
        const double loss = -std::log(std::max(s.probabilities[label], 1e-300));
        if (!std::isfinite(loss) || !std::isfinite(s.logits[0]) || !std::isfinite(s.logits[1])) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " on patch " + p.id() +
                              " (logits " + std::to_string(s.logits[0]) + ", " + std::to_string(s.logits[1]) + ")");
        }
        loss_sum += loss;
        if (s.predicted() == label) ++correct;
        Tensor grad(static_cast<int>(s.probabilities.size()), 1, 1);
        for (std::size_t c = 0; c < s.probabilities.size(); ++c) {
          grad.data[c] = (s.probabilities[c] - (static_cast<int>(c) == label ? 1.0 : 0.0)) * inv_batch;
        }
        model.backward(traces, grad);
      }
      adam_step(params, adam, config.learning_rate);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    const Evaluation val = evaluate(model, patches, split.validation);
    if (!std::isfinite(val.loss)) {
      throw TrainingError("non-finite validation loss after epoch " + std::to_string(epoch) +
                          "; the weights diverged (learning rate " + std::to_string(config.learning_rate) + ")");
    }
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    // Validation accuracy is coarse on small splits; ties go to the lower validation loss.
    if (rec.val_accuracy > best_acc || (rec.val_accuracy == best_acc && rec.val_loss < best_loss)) {
      best_acc = rec.val_accuracy;
      best_loss = rec.val_loss;
      best_epoch = epoch;
      best_weights.clear();
      for (const auto* p : params) best_weights.push_back(p->value);
    }
    if (epoch - best_epoch >= config.early_stop_patience) break;
  }

  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best_weights[k];
  model.zero_grad();
  result.stopped_epoch = static_cast<int>(result.history.size());
  result.best_epoch = best_epoch;
  result.network = std::move(model);
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  out << std::setprecision(17);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.train_accuracy << ',' << r.val_loss << ',' << r.val_accuracy
        << '\n';
  }
  return out.str();
}

void TrainedModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nn::WeightArchive::from_network(network).save(dir / "weights.imcxw");
  nlohmann::ordered_json meta;
  meta["train_config"] = nlohmann::ordered_json::parse(config.to_json());
  meta["input_channels"] = input_channels;
  meta["channel_names"] = channel_names;
  meta["stopped_epoch"] = stopped_epoch;
  meta["best_epoch"] = best_epoch;
  meta["weights_sha256"] = weights_checksum();
  std::ofstream(dir / "config.json") << meta.dump(2) << '\n';
  std::ofstream(dir / "history.csv") << history_csv(history);
  std::ofstream(dir / "split.sha256") << split_fingerprint << '\n';
  if (!std::filesystem::exists(dir / "split.sha256")) throw IoError("cannot write model to " + dir.string());
}

TrainedModel TrainedModel::load(const std::filesystem::path& dir) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw IoError("no trained model in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(cfg_in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt model config in " + dir.string() + ": " + e.what());
  }
  TrainedModel m;
  m.config = TrainConfig::from_json(meta.at("train_config").dump());
  m.input_channels = meta.at("input_channels").get<int>();
  m.channel_names = meta.at("channel_names").get<std::vector<std::string>>();
  m.stopped_epoch = meta.at("stopped_epoch").get<int>();
  m.best_epoch = meta.at("best_epoch").get<int>();

  TrainConfig arch = m.config;
  arch.init = WeightInit::random;
  m.network = build_model(arch, m.input_channels);
  nn::apply_weights(m.network, nn::WeightArchive::load(dir / "weights.imcxw"));

  std::ifstream hist(dir / "history.csv");
  std::string line;
  std::getline(hist, line);
  while (std::getline(hist, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    char comma;
    row >> r.epoch >> comma >> r.train_loss >> comma >> r.train_accuracy >> comma >> r.val_loss >> comma >>
        r.val_accuracy;
    m.history.push_back(r);
  }
  std::ifstream(dir / "split.sha256") >> m.split_fingerprint;
  return m;
}

}  // namespace imcx
