#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "imcx/imc_io.hpp"
#include "imcx/nn.hpp"

namespace imcx {

enum class Backbone { resnet50, vgg16, smallcnn };
enum class WeightInit { pretrained_imagenet, random };
enum class Pooling { avg };
enum class OutputActivation { softmax };
enum class Optimizer { adam };
enum class Loss { categorical_crossentropy };
enum class MonitorMetric { validation_accuracy };
enum class SmallCnnPool { max, avg };

std::string_view to_string(Backbone b);
Backbone parse_backbone(std::string_view s);
std::string_view to_string(WeightInit w);
WeightInit parse_weight_init(std::string_view s);

struct TrainConfig {
  Backbone backbone = Backbone::smallcnn;
  WeightInit init = WeightInit::random;
  Pooling pooling = Pooling::avg;
  OutputActivation output_activation = OutputActivation::softmax;
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 0.001;
  Loss loss = Loss::categorical_crossentropy;
  int early_stop_patience = 200;
  MonitorMetric early_stop_monitor = MonitorMetric::validation_accuracy;
  int max_epochs = 1000;
  int batch_size = 16;
  std::uint64_t seed = 0;
  std::vector<std::string> channel_selection;  // empty means every channel ("ALL")
  bool augment = false;

  // Feed a single channel three times into an RGB backbone instead of adapting conv1.
  bool replicate_to_rgb = false;
  // Weight archive holding the ImageNet tensors for pretrained_imagenet.
  std::filesystem::path pretrained_weights;

  SmallCnnPool smallcnn_pool = SmallCnnPool::max;
  bool smallcnn_bias = true;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Weight tensor of a convolution, layout (out, in, k, k).
struct KernelTensor {
  int out = 0;
  int in = 0;
  int k = 0;
  std::vector<double> values;

  double at(int o, int i, int y, int x) const {
    return values[((static_cast<std::size_t>(o) * in + i) * k + y) * k + x];
  }
};

// 3 -> identity; 1 -> channel mean; otherwise the original slices (up to three) are kept,
// channel-mean slices fill the rest and everything is scaled by 3/target so the summed
// kernel is unchanged.
KernelTensor adapt_input_channels(const KernelTensor& pretrained, int target_channels);

nn::Network build_model(const TrainConfig& config, int input_channels);

struct ClassScores {
  std::vector<double> logits;
  std::vector<double> probabilities;
  int predicted() const;
};

ClassScores scores_from_logits(std::span<const double> logits);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainedModel {
  nn::Network network;
  TrainConfig config;
  int input_channels = 0;
  std::vector<std::string> channel_names;
  std::string split_fingerprint;
  std::vector<EpochRecord> history;
  int stopped_epoch = 0;
  int best_epoch = 0;

  std::string weights_checksum() const { return nn::weights_checksum(network); }

  // <dir>/weights.imcxw, config.json, history.csv, split.sha256
  void save(const std::filesystem::path& dir) const;
  static TrainedModel load(const std::filesystem::path& dir);
};

std::string history_csv(const std::vector<EpochRecord>& history);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Best-validation-accuracy weights are restored on return.
TrainedModel train(nn::Network model, std::span<const Patch> patches, const DatasetSplit& split,
                   const TrainConfig& config, const EpochCallback& on_epoch = {});

ClassScores predict(const nn::Network& net, const Tensor& input);
ClassScores predict(const TrainedModel& model, const Patch& patch);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<int> labels;
};

Evaluation evaluate(const nn::Network& net, std::span<const Patch> patches, std::span<const std::size_t> indices);

}  // namespace imcx
