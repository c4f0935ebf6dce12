#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace imcx {

// counts[true][predicted] over {control = 0, patient = 1}.
struct ConfusionMatrix {
  std::array<std::array<long, 2>, 2> counts{};
  long total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
};

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels);

struct MetricsReport {
  double test_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double patient_precision = 0.0;
  double patient_recall = 0.0;
  double patient_f1 = 0.0;
  std::uint64_t seed = 0;
  // Set when some precision or recall had a zero denominator and was reported as 0.
  bool degenerate = false;
};

MetricsReport classification_report(const ConfusionMatrix& cm, std::uint64_t seed = 0);

struct SeedAggregate {
  double mean = 0.0;
  double sd = 0.0;
  double var = 0.0;
};

// Sample (n - 1) variance.
SeedAggregate aggregate_seeds(std::span<const double> accuracies);

struct RankingRow {
  std::string model;
  std::string dataset;
  std::string channel;
  std::vector<double> accuracies;  // test accuracy per seed, in percent
  SeedAggregate aggregate;
};

struct RankingTable {
  std::vector<RankingRow> rows;
};

// Sorted by mean descending, then lower SD, then channel name. Single-seed rows get SD = Var = 0.
RankingTable rank_models(std::vector<RankingRow> rows);

// Two-decimal rendering that truncates (with a tiny guard against binary noise), which is
// how the published per-seed tables were produced.
std::string format_2dp(double value);

std::string ranking_csv(const RankingTable& table);
std::string ranking_markdown(const RankingTable& table);

}  // namespace imcx
