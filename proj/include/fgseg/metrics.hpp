#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fgseg/dataset.hpp"
#include "fgseg/tensor.hpp"

namespace fgseg {

// TP/FP/TN/FN over evaluated pixels. Exact integer counters, additive
// under merge; every derived metric comes from these four.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }

  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;

  std::uint64_t total() const { return tp + fp + tn + fn; }
};

// Foreground iff p >= theta (boundary inclusive). Returns 0/255 bytes.
std::vector<std::uint8_t> threshold_mask(const Tensor<float>& P, double theta);

// CDnet label semantics: 255 positive; 0 and 50 negative; 85/170 skipped;
// pixels outside the ROI skipped. Unknown gt values are skipped and
// counted into *unknown when given.
ConfusionCounts accumulate(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& gt,
                           const std::vector<std::uint8_t>* roi = nullptr,
                           std::uint64_t* unknown = nullptr);

// 2*precision*recall/(precision+recall); all-empty counts score 1, tp=0
// with any error scores 0.
double f_measure(const ConfusionCounts& c);

// 100*(fp+fn)/total. Errors on total == 0.
double pwc(const ConfusionCounts& c);

struct Rates {
  double precision = 0.0;
  double recall = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

// 0/0 rates are 0 by convention.
Rates rates(const ConfusionCounts& c);

struct MetricValues {
  double fmeasure = 0.0;
  double pwc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

MetricValues metric_values(const ConfusionCounts& c);

struct VideoCounts {
  std::string category;
  std::string video;
  ConfusionCounts counts;  // summed over the video's frames
};

struct VideoReport {
  std::string category;
  std::string video;
  MetricValues values;
  ConfusionCounts counts;
};

struct CategoryReport {
  std::string category;
  MetricValues values;  // unweighted mean over the category's videos
};

struct MetricReport {
  std::vector<VideoReport> videos;
  std::vector<CategoryReport> categories;
  MetricValues overall_by_category;  // mean over categories
  MetricValues overall_by_video;     // mean over all videos
};

// Frames sum into video counts upstream; videos average into categories;
// categories average into the overall row.
MetricReport aggregate(const std::vector<VideoCounts>& videos);

std::string report_to_json(const MetricReport& report, int indent = 2);

}  // namespace fgseg
