#include "imcx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "imcx/errors.hpp"

namespace imcx {

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw ParameterError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ParameterError("confusion: no items");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 1 || predictions[i] < 0 || predictions[i] > 1) {
      throw ParameterError("confusion: class index outside {0, 1}");
    }
    ++cm.counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return cm;
}

namespace {

double ratio(long num, long den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

double f1(double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

}  // namespace

MetricsReport classification_report(const ConfusionMatrix& cm, std::uint64_t seed) {
  if (cm.total() <= 0) throw ParameterError("classification_report: empty confusion matrix");
  MetricsReport m;
  m.seed = seed;
  const auto& c = cm.counts;
  m.test_accuracy = static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(cm.total());
  std::array<double, 2> precision{}, recall{}, f{};
  for (int k = 0; k < 2; ++k) {
    precision[k] = ratio(c[k][k], c[0][k] + c[1][k], m.degenerate);
    recall[k] = ratio(c[k][k], c[k][0] + c[k][1], m.degenerate);
    f[k] = f1(precision[k], recall[k]);
  }
  m.macro_precision = (precision[0] + precision[1]) / 2.0;
  m.macro_recall = (recall[0] + recall[1]) / 2.0;
  m.macro_f1 = (f[0] + f[1]) / 2.0;
  m.patient_precision = precision[1];
  m.patient_recall = recall[1];
  m.patient_f1 = f[1];
  return m;
}

SeedAggregate aggregate_seeds(std::span<const double> accuracies) {
  if (accuracies.size() < 2) throw ParameterError("aggregate_seeds needs at least two values");
  const double n = static_cast<double>(accuracies.size());
  SeedAggregate a;
  a.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : accuracies) ss += (v - a.mean) * (v - a.mean);
  a.var = ss / (n - 1.0);
  a.sd = std::sqrt(a.var);
  return a;
}

RankingTable rank_models(std::vector<RankingRow> rows) {
  if (!rows.empty()) {
    const std::size_t n = rows.front().accuracies.size();
    for (const auto& r : rows) {
      if (r.accuracies.size() != n) {
        throw ParameterError("rank_models: row " + r.model + "/" + r.channel + " has " +
                             std::to_string(r.accuracies.size()) + " seeds, expected " + std::to_string(n));
      }
    }
  }
  for (auto& r : rows) {
    if (r.accuracies.empty()) throw ParameterError("rank_models: row " + r.model + "/" + r.channel + " has no seeds");
    r.aggregate = r.accuracies.size() == 1 ? SeedAggregate{r.accuracies[0], 0.0, 0.0} : aggregate_seeds(r.accuracies);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RankingRow& a, const RankingRow& b) {
    if (a.aggregate.mean != b.aggregate.mean) return a.aggregate.mean > b.aggregate.mean;
    if (a.aggregate.sd != b.aggregate.sd) return a.aggregate.sd < b.aggregate.sd;
    return a.channel < b.channel;
  });
  return RankingTable{std::move(rows)};
}

std::string format_2dp(double value) {
  const double t = std::trunc(value * 100.0 + (value >= 0 ? 1e-9 : -1e-9)) / 100.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", t == 0.0 ? 0.0 : t);
  return buf;
}

std::string ranking_csv(const RankingTable& table) {
  std::ostringstream out;
  const std::size_t seeds = table.rows.empty() ? 0 : table.rows.front().accuracies.size();
  out << "model,dataset,channel";
  for (std::size_t s = 0; s < seeds; ++s) out << ",ta_seed" << s + 1;
  out << ",mean_ta,sd_ta,var_ta\n";
  for (const auto& r : table.rows) {
    out << r.model << ',' << r.dataset << ',' << r.channel;
    for (double a : r.accuracies) out << ',' << format_2dp(a);
    out << ',' << format_2dp(r.aggregate.mean) << ',' << format_2dp(r.aggregate.sd) << ','
        << format_2dp(r.aggregate.var) << '\n';
  }
  return out.str();
}

std::string ranking_markdown(const RankingTable& table) {
  std::ostringstream out;
  const std::size_t seeds = table.rows.empty() ? 0 : table.rows.front().accuracies.size();
  out << "| Model | Dataset | Channel |";
  for (std::size_t s = 0; s < seeds; ++s) out << " TA seed " << static_cast<char>('A' + s) << " (%) |";
  out << " Mean TA (%) | SD TA | Var TA |\n|---|---|---|";
  for (std::size_t s = 0; s < seeds; ++s) out << "---:|";
  out << "---:|---:|---:|\n";
  for (const auto& r : table.rows) {
    out << "| " << r.model << " | " << r.dataset << " | " << r.channel << " |";
    for (double a : r.accuracies) out << ' ' << format_2dp(a) << " |";
    out << ' ' << format_2dp(r.aggregate.mean) << " | " << format_2dp(r.aggregate.sd) << " | "
        << format_2dp(r.aggregate.var) << " |\n";
  }
  return out.str();
}

}  // namespace imcx
