#pragma once

#include <vector>

// Published per-seed test accuracies (percent) with the reported two-decimal
// mean / SD / variance, in the published rank order.
namespace reference {

struct Row {
  const char* model;
  const char* channel;
  std::vector<double> accuracies;
  const char* mean;
  const char* sd;
  const char* var;
};

inline const Row kRows[] = {
    {"VGG16", "All-Channels", {100, 98.95, 98.95, 98.95}, "99.21", "0.52", "0.27"},
    {"ResNet50", "UqCRC2", {100, 92.86, 100, 96.43}, "97.32", "3.41", "11.68"},
    {"ResNet50", "GRIM19", {100, 92.86, 92.86, 96.43}, "95.53", "3.41", "11.68"},
    {"ResNet50", "Dystrophin", {96.43, 96.43, 92.86, 92.86}, "94.64", "2.06", "4.24"},
    {"ResNet50", "OSCP", {92.86, 96.43, 92.86, 92.86}, "93.75", "1.78", "3.18"},
    {"ResNet50", "COX4", {100, 96.43, 85.71, 89.29}, "92.85", "6.52", "42.53"},
    {"ResNet50", "SDHA", {89.29, 82.14, 92.86, 96.43}, "90.18", "6.10", "37.22"},
    {"ResNet50", "NDUFB8", {85.71, 85.71, 92.86, 85.71}, "87.49", "3.57", "12.78"},
    {"ResNet50", "VDAC1", {85.71, 78.57, 89.29, 85.71}, "84.82", "4.49", "20.20"},
    {"ResNet50", "TOM22", {71.43, 85.71, 89.29, 85.71}, "83.03", "7.91", "62.70"},
    {"ResNet50", "MTCO1", {67.86, 82.14, 75, 92.86}, "79.46", "10.66", "113.73"},
};

}  // namespace reference
