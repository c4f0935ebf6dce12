#include <algorithm>
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "imcx/errors.hpp"
#include "imcx/trainer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace imcx;
using namespace imcx::nn;

namespace {

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.backbone = Backbone::smallcnn;
  c.seed = seed;
  c.max_epochs = 5;
  c.batch_size = 4;
  return c;
}

// Separable toy set: patients are bright, controls dim, both with texture.
std::vector<Patch> toy_patches(int n, int size, std::uint64_t seed) {
  std::vector<Patch> out;
  for (int i = 0; i < n; ++i) {
    const bool patient = i % 2 == 1;
    Patch p;
    p.source_subject = (patient ? "patient_" : "control_") + std::to_string(i);
    p.class_label = patient ? ClassLabel::patient : ClassLabel::control;
    p.origin_row = i;
    p.channel_names = {"NDUFB8"};
    p.data = oracle::random_tensor(1, size, size, seed + i, patient ? 0.5 : 0.0, patient ? 0.9 : 0.4);
    out.push_back(std::move(p));
  }
  return out;
}

DatasetSplit memorise_split(std::size_t n) {
  DatasetSplit s;
  s.train.resize(n);
  std::iota(s.train.begin(), s.train.end(), 0);
  s.validation = s.train;
  s.test = s.train;
  return s;
}

Param* find_param(Network& net, const std::string& name) {
  for (Param* p : net.params())
    if (p->name == name) return p;
  return nullptr;
}

std::size_t trainable_count(Network& net) {
  std::size_t n = 0;
  for (Param* p : net.params())
    if (p->trainable) n += p->size();
  return n;
}

// Scalar test loss: fixed random projection of the network output.
double projected(const Network& net, const Tensor& x, const Tensor& proj) {
  const Tensor y = net.forward(x);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data[i] * proj.data[i];
  return s;
}

Network gradient_test_net() {
  LayerList main;
  main.push_back(std::make_unique<Conv2d>("res.conv", 4, 4, 3, 1, 1));
  main.push_back(std::make_unique<BatchNorm>("res.bn", 4));
  LayerList l;
  l.push_back(std::make_unique<Conv2d>("conv1", 2, 4, 3, 1, 1));
  l.push_back(std::make_unique<BatchNorm>("bn1", 4));
  l.push_back(std::make_unique<ReLU>("relu1"));
  l.push_back(std::make_unique<Residual>("res", std::move(main), LayerList{}));
  l.push_back(std::make_unique<Tanh>("tanh"));
  l.push_back(std::make_unique<MaxPool2d>("pool1", 2, 2));
  l.push_back(std::make_unique<Conv2d>("conv2", 4, 3, 3, 2, 1));
  l.push_back(std::make_unique<AvgPool2d>("pool2", 2, 1));
  l.push_back(std::make_unique<Flatten>("flat"));
  l.push_back(std::make_unique<Dense>("fc", 3, 2));
  Network net(2, std::move(l));
  initialize(net, 3);
  // Non-trivial normalisation statistics so every batch-norm parameter matters.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (Param* p : net.params()) {
    if (p->name.find("bn") == std::string::npos) continue;
    for (double& v : p->value) v = u(rng) - (p->name.ends_with(".running_mean") || p->name.ends_with(".bias") ? 1.0 : 0.0);
  }
  return net;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("convolution matches a direct six-loop oracle") {
    struct Case {
      int in, out, k, stride, pad, h, w;
    };
    for (const Case c : {Case{1, 3, 3, 1, 1, 9, 7}, Case{3, 2, 7, 2, 3, 15, 16}, Case{2, 4, 1, 1, 0, 5, 5},
                         Case{4, 2, 3, 2, 0, 10, 9}}) {
      Conv2d conv("c", c.in, c.out, c.k, c.stride, c.pad);
      conv.weight().value = oracle::random_tensor(1, 1, static_cast<int>(conv.weight().size()), 1).data;
      conv.bias().value = oracle::random_tensor(1, 1, c.out, 2).data;
      const Tensor x = oracle::random_tensor(c.in, c.h, c.w, 3);
      const Tensor want = oracle::conv2d(x, conv.weight().value, conv.bias().value, c.out, c.k, c.stride, c.pad);
      const Tensor got = conv.forward(x);
      REQUIRE(got.same_shape(want));
      CHECK(max_abs_diff(got, want) < 1e-12);
    }
  }

  TEST_CASE("input gradients match central finite differences") {
    const Network net = gradient_test_net();
    const Tensor x = oracle::random_tensor(2, 8, 8, 11);
    const Tensor proj = oracle::random_tensor(2, 1, 1, 12);
    Network work = net;
    const auto traces = work.forward_traced(x);
    const Tensor analytic = work.backward(traces, proj);
    const Tensor numeric =
        oracle::finite_difference([&](const Tensor& in) { return projected(net, in, proj); }, x, 1e-5);
    CHECK(max_abs_diff(analytic, numeric) < 1e-6);
  }

  TEST_CASE("parameter gradients match central finite differences") {
    Network net = gradient_test_net();
    const Tensor x = oracle::random_tensor(2, 8, 8, 21);
    const Tensor proj = oracle::random_tensor(2, 1, 1, 22);
    net.zero_grad();
    net.backward(net.forward_traced(x), proj);
    for (Param* p : net.params()) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->size(); i += 1 + p->size() / 7) {
        const double keep = p->value[i];
        p->value[i] = keep + 1e-5;
        const double up = projected(net, x, proj);
        p->value[i] = keep - 1e-5;
        const double down = projected(net, x, proj);
        p->value[i] = keep;
        INFO(p->name << "[" << i << "]");
        CHECK(p->grad[i] == doctest::Approx((up - down) / 2e-5).epsilon(1e-5).scale(1.0));
      }
    }
  }

  TEST_CASE("batch-norm folding preserves the function") {
    const Network net = gradient_test_net();
    const Network folded = fold_batch_norm(net);
    CHECK(net.contains(LayerKind::batch_norm));
    CHECK_FALSE(folded.contains(LayerKind::batch_norm));
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const Tensor x = oracle::random_tensor(2, 8, 8, seed);
      CHECK(max_abs_diff(net.forward(x), folded.forward(x)) < 1e-10);
    }
  }

  TEST_CASE("weight archives round trip and enforce shapes") {
    Network a = gradient_test_net();
    const WeightArchive archive = WeightArchive::from_network(a);
    const WeightArchive back = WeightArchive::deserialize(archive.serialize());
    REQUIRE(back.tensors.size() == archive.tensors.size());
    for (const auto& [name, e] : archive.tensors) {
      CHECK(back.tensors.at(name).shape == e.shape);
      CHECK(back.tensors.at(name).values == e.values);
    }
    Network b = gradient_test_net();
    initialize(b, 99);
    CHECK(weights_checksum(a) != weights_checksum(b));
    CHECK(apply_weights(b, back) == archive.tensors.size());
    CHECK(weights_checksum(a) == weights_checksum(b));

    WeightArchive wrong = archive;
    wrong.tensors.at("fc.weight").shape = {3, 2};
    CHECK_THROWS_AS(apply_weights(b, wrong), ShapeError);
    WeightArchive partial;
    partial.tensors["fc.bias"] = archive.tensors.at("fc.bias");
    CHECK_THROWS_AS(apply_weights(b, partial), ShapeError);
    CHECK(apply_weights(b, partial, true) == 1);

    auto bytes = archive.serialize();
    bytes[0] ^= 0xFF;
    CHECK_THROWS(WeightArchive::deserialize(bytes));
  }
}

TEST_SUITE("trainer") {
  TEST_CASE("adapt_input_channels") {
    const Tensor kv = oracle::random_tensor(1, 1, 4 * 3 * 9, 1);
    KernelTensor k{4, 3, 3, {kv.data.begin(), kv.data.end()}};
    CHECK(adapt_input_channels(k, 3).values == k.values);

    const KernelTensor one = adapt_input_channels(k, 1);
    REQUIRE(one.in == 1);
    for (int o = 0; o < 4; ++o)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
          CHECK(one.at(o, 0, y, x) == doctest::Approx((k.at(o, 0, y, x) + k.at(o, 1, y, x) + k.at(o, 2, y, x)) / 3.0));

    for (int target : {2, 4, 10}) {
      const KernelTensor t = adapt_input_channels(k, target);
      REQUIRE(t.in == target);
      for (int o = 0; o < 4; ++o)
        for (int y = 0; y < 3; ++y)
          for (int x = 0; x < 3; ++x) {
            double orig = 0.0, adapted = 0.0;
            for (int i = 0; i < 3; ++i) orig += k.at(o, i, y, x);
            for (int i = 0; i < target; ++i) adapted += t.at(o, i, y, x);
            CHECK(adapted == doctest::Approx(orig).epsilon(1e-12));
          }
    }
    CHECK_THROWS_AS(adapt_input_channels(k, 0), ParameterError);
  }

  TEST_CASE("pretrained resnet50 loads the first layer exactly and adapts it to ten channels") {
    test::TempDir dir;
    const Tensor pv = oracle::random_tensor(1, 1, 64 * 3 * 49, 7);
    const KernelTensor published{64, 3, 7, {pv.data.begin(), pv.data.end()}};
    WeightArchive archive;
    archive.tensors["conv1.weight"] = {{64, 3, 7, 7}, published.values};
    archive.save(dir / "imagenet.imcxw");

    TrainConfig cfg;
    cfg.backbone = Backbone::resnet50;
    cfg.init = WeightInit::pretrained_imagenet;
    cfg.pretrained_weights = dir / "imagenet.imcxw";

    Network rgb = build_model(cfg, 3);
    CHECK(std::ranges::equal(find_param(rgb, "conv1.weight")->value, published.values));

    Network ten = build_model(cfg, 10);
    const Param* w = find_param(ten, "conv1.weight");
    REQUIRE(w->shape == std::vector<int>{64, 10, 7, 7});
    auto at = [&](int o, int i, int q) { return w->value[(static_cast<std::size_t>(o) * 10 + i) * 49 + q]; };
    for (int o = 0; o < 64; o += 7)
      for (int q = 0; q < 49; ++q) {
        const double first_three_mean = (at(o, 0, q) + at(o, 1, q) + at(o, 2, q)) / 3.0;
        for (int i = 3; i < 10; ++i) CHECK(at(o, i, q) == doctest::Approx(first_three_mean).epsilon(1e-12));
        double sum = 0.0;
        for (int i = 0; i < 10; ++i) sum += at(o, i, q);
        double orig = 0.0;
        for (int i = 0; i < 3; ++i) orig += published.at(o, i, q / 7, q % 7);
        CHECK(std::abs(sum - orig) <= 1e-6);
      }

    cfg.pretrained_weights.clear();
    CHECK_THROWS_AS(build_model(cfg, 3), ParameterError);
  }

  TEST_CASE("backbones have the reference parameter counts") {
    TrainConfig cfg;
    cfg.backbone = Backbone::vgg16;
    Network vgg = build_model(cfg, 3);
    // torchvision vgg16 convolutional features plus a 512 -> 2 head.
    CHECK(trainable_count(vgg) == 14714688 + 512 * 2 + 2);
    cfg.backbone = Backbone::resnet50;
    Network res = build_model(cfg, 3);
    // torchvision resnet50 without its 1000-way head, plus a 2048 -> 2 head.
    CHECK(trainable_count(res) == 25557032 - (2048 * 1000 + 1000) + 2048 * 2 + 2);
    cfg.backbone = Backbone::smallcnn;
    Network small = build_model(cfg, 1);
    CHECK(trainable_count(small) == (9 * 1 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 64 + 64) +
                                        (9 * 64 * 128 + 128) + (128 * 2 + 2));
  }

  TEST_CASE("class scores are a probability distribution") {
    const Network net = build_model(small_config(), 1);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ClassScores s = predict(net, oracle::random_tensor(1, 32, 32, seed, 0.0, 1.0));
      REQUIRE(s.probabilities.size() == 2);
      CHECK(s.probabilities[0] >= 0.0);
      CHECK(s.probabilities[0] + s.probabilities[1] == doctest::Approx(1.0).epsilon(1e-12));
    }
    const ClassScores extreme = scores_from_logits(std::vector<double>{1000.0, -1000.0});
    CHECK(extreme.probabilities[0] == 1.0);
    CHECK(extreme.predicted() == 0);
  }

  TEST_CASE("a zeroed final layer gives equal probabilities") {
    Network net = build_model(small_config(), 1);
    for (const char* name : {"fc.weight", "fc.bias"}) {
      Param* p = find_param(net, name);
      std::fill(p->value.begin(), p->value.end(), 0.0);
    }
    const ClassScores s = predict(net, oracle::random_tensor(1, 16, 16, 1));
    CHECK(s.probabilities[0] == 0.5);
    CHECK(s.probabilities[1] == 0.5);
  }

  TEST_CASE("single linear layer logit is w . x") {
    LayerList l;
    l.push_back(std::make_unique<Dense>("fc", 2, 2, false));
    Network net(2, std::move(l));
    find_param(net, "fc.weight")->value = {3.0, -2.0, 0.0, 0.0};
    const ClassScores s = predict(net, Tensor::vector(std::vector<double>{1.0, 1.0}));
    CHECK(s.logits[0] == 1.0);
  }

  TEST_CASE("first-layer response is affine in a constant offset") {
    Conv2d conv("c", 2, 3, 3, 1, 1, false);
    conv.weight().value = oracle::random_tensor(1, 1, static_cast<int>(conv.weight().size()), 4).data;
    const Tensor ones(2, 10, 10, 1.0);
    Tensor reference;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor x = oracle::random_tensor(2, 10, 10, seed);
      Tensor shifted = x;
      for (double& v : shifted.data) v += 0.7;
      Tensor delta = conv.forward(shifted);
      const Tensor base = conv.forward(x);
      for (std::size_t i = 0; i < delta.size(); ++i) delta.data[i] -= base.data[i];
      if (seed == 0) {
        reference = delta;
        Tensor direct = conv.forward(ones);
        for (double& v : direct.data) v *= 0.7;
        CHECK(max_abs_diff(delta, direct) < 1e-12);
      }
      CHECK(max_abs_diff(delta, reference) < 1e-12);
    }
  }

  TEST_CASE("smallcnn memorises a small separable set") {
    const auto patches = toy_patches(16, 24, 100);
    TrainConfig cfg = small_config(3);
    cfg.max_epochs = 60;
    cfg.batch_size = 16;
    cfg.early_stop_patience = 1000;
    const TrainedModel m = train(build_model(cfg, 1), patches, memorise_split(16), cfg);
    CHECK(m.stopped_epoch == 60);
    CHECK(m.history.size() == 60);
    const std::vector<std::size_t> all = memorise_split(16).train;
    CHECK(evaluate(m.network, patches, all).accuracy == 1.0);
    CHECK(m.history.back().train_accuracy == 1.0);
    for (std::size_t e = m.history.size() - 10; e < m.history.size(); ++e)
      CHECK(m.history[e].train_loss <= m.history[e - 1].train_loss + 1e-3);
  }

  TEST_CASE("training is deterministic under a fixed seed") {
    const auto patches = toy_patches(12, 16, 7);
    DatasetSplit split = memorise_split(12);
    split.validation = {0, 1, 2, 3};
    TrainConfig cfg = small_config(5);
    cfg.augment = true;
    const TrainedModel a = train(build_model(cfg, 1), patches, split, cfg);
    const TrainedModel b = train(build_model(cfg, 1), patches, split, cfg);
    CHECK(a.weights_checksum() == b.weights_checksum());
    CHECK(history_csv(a.history) == history_csv(b.history));
    cfg.seed = 6;
    const TrainedModel c = train(build_model(cfg, 1), patches, split, cfg);
    CHECK(a.weights_checksum() != c.weights_checksum());
  }

  TEST_CASE("constant validation accuracy stops after exactly patience epochs") {
    const auto patches = toy_patches(8, 16, 3);
    TrainConfig cfg = small_config(1);
    cfg.smallcnn_bias = false;
    cfg.learning_rate = 1e-300;  // updates vanish below double resolution
    cfg.early_stop_patience = 4;
    cfg.max_epochs = 50;
    const TrainedModel m = train(build_model(cfg, 1), patches, memorise_split(8), cfg);
    CHECK(m.best_epoch == 1);
    CHECK(m.stopped_epoch == m.best_epoch + cfg.early_stop_patience);
    CHECK(m.history.size() == static_cast<std::size_t>(m.stopped_epoch));
  }

  TEST_CASE("restored weights come from the best validation epoch") {
    auto patches = toy_patches(24, 16, 40);
    // Mislabel a few patches so validation accuracy moves around.
    for (int i : {1, 4, 9}) patches[i].class_label = ClassLabel::patient;
    DatasetSplit split;
    for (std::size_t i = 0; i < 24; ++i) (i < 16 ? split.train : split.validation).push_back(i);
    split.test = split.validation;
    TrainConfig cfg = small_config(2);
    cfg.max_epochs = 12;
    cfg.early_stop_patience = 3;
    const TrainedModel m = train(build_model(cfg, 1), patches, split, cfg);
    double best = 0.0;
    for (const auto& r : m.history) best = std::max(best, r.val_accuracy);
    CHECK(m.history[m.best_epoch - 1].val_accuracy == best);
    for (int e = 0; e < m.best_epoch - 1; ++e) CHECK(m.history[e].val_accuracy <= best);
    const Evaluation val = evaluate(m.network, patches, split.validation);
    CHECK(val.accuracy == best);
    CHECK(val.loss == doctest::Approx(m.history[m.best_epoch - 1].val_loss).epsilon(1e-12));
    CHECK(m.stopped_epoch <= cfg.max_epochs);
    if (m.stopped_epoch < cfg.max_epochs) CHECK(m.stopped_epoch == m.best_epoch + cfg.early_stop_patience);
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    auto patches = toy_patches(6, 16, 1);
    patches[2].data.data[5] = std::numeric_limits<double>::quiet_NaN();
    const TrainConfig cfg = small_config();
    try {
      train(build_model(cfg, 1), patches, memorise_split(6), cfg);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
  }

  TEST_CASE("channel mismatches raise ShapeError") {
    const auto patches = toy_patches(6, 16, 1);
    const TrainConfig cfg = small_config();
    CHECK_THROWS_AS(train(build_model(cfg, 3), patches, memorise_split(6), cfg), ShapeError);
    TrainedModel m;
    m.network = build_model(cfg, 3);
    m.input_channels = 3;
    CHECK_THROWS_AS(predict(m, patches[0]), ShapeError);
  }

  TEST_CASE("trained models round trip through disk") {
    test::TempDir dir;
    const auto patches = toy_patches(8, 16, 2);
    TrainConfig cfg = small_config(4);
    cfg.max_epochs = 2;
    const TrainedModel m = train(build_model(cfg, 1), patches, memorise_split(8), cfg);
    m.save(dir.path());
    for (const char* f : {"weights.imcxw", "config.json", "history.csv", "split.sha256"})
      CHECK(std::filesystem::exists(dir / f));
    CHECK(test::read_bytes(dir / "history.csv").starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
    const TrainedModel back = TrainedModel::load(dir.path());
    CHECK(back.weights_checksum() == m.weights_checksum());
    CHECK(back.stopped_epoch == m.stopped_epoch);
    CHECK(back.split_fingerprint == m.split_fingerprint);
    CHECK(back.config.to_json() == m.config.to_json());
    CHECK(predict(back, patches[3]).logits == predict(m, patches[3]).logits);
  }

  TEST_CASE("training configuration validation and JSON") {
    TrainConfig c;
    c.backbone = Backbone::vgg16;
    c.learning_rate = 0.0005;
    c.channel_selection = {"NDUFB8"};
    c.seed = 17;
    const TrainConfig back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.backbone == Backbone::vgg16);
    CHECK(back.channel_selection == c.channel_selection);

    for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
             [](TrainConfig& t) { t.learning_rate = 0.0; },
             [](TrainConfig& t) { t.max_epochs = 0; },
             [](TrainConfig& t) { t.early_stop_patience = 0; },
             [](TrainConfig& t) { t.batch_size = 0; },
         }) {
      TrainConfig t;
      mutate(t);
      CHECK_THROWS_AS(t.validate(), ParameterError);
    }
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"backbone": "alexnet"})"), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json(R"({"optimizer": "sgd"})"), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json("{not json"), ConfigError);
  }
}
