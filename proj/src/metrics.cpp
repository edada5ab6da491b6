#include "fgseg/metrics.hpp"

#include <algorithm>
#include <map>

#include <json.hpp>

#include "fgseg/errors.hpp"

namespace fgseg {

std::vector<std::uint8_t> threshold_mask(const Tensor<float>& P, double theta) {
  if (theta < 0.0 || theta > 1.0) {
    throw std::invalid_argument("threshold must be in [0,1], got " + std::to_string(theta));
  }
  const Shape& s = P.shape();
  if (s.n != 1 || s.c != 1) {
    throw std::invalid_argument("threshold_mask expects a (1,1,h,w) map, got " + s.str());
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(s.h) * s.w, 0);
  for (std::int64_t i = 0; i < P.size(); ++i) {
    if (static_cast<double>(P[i]) >= theta) mask[static_cast<std::size_t>(i)] = 255;
  }
  return mask;
}

ConfusionCounts accumulate(const std::vector<std::uint8_t>& pred,
                           const std::vector<std::uint8_t>& gt,
                           const std::vector<std::uint8_t>* roi, std::uint64_t* unknown) {
  if (pred.size() != gt.size() || (roi && roi->size() != gt.size())) {
    throw std::invalid_argument("accumulate: prediction, gt and roi sizes differ");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (roi && (*roi)[i] == 0) continue;
    const std::uint8_t g = gt[i];
    const bool p = pred[i] != 0;
    if (g == kGtForeground) {
      p ? ++c.tp : ++c.fn;
    } else if (g == kGtBackground || g == kGtShadow) {
      p ? ++c.fp : ++c.tn;
    } else if (gt_is_ignored(g)) {
      // skipped
    } else {
      if (unknown) ++(*unknown);
    }
  }
  return c;
}

double f_measure(const ConfusionCounts& c) {
  if (c.tp == 0) return (c.fp == 0 && c.fn == 0) ? 1.0 : 0.0;
  const double p = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double r = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return 2.0 * p * r / (p + r);
}

double pwc(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("pwc: no evaluated pixels");
  return 100.0 * static_cast<double>(c.fp + c.fn) / static_cast<double>(c.total());
}

Rates rates(const ConfusionCounts& c) {
  Rates r;
  if (c.tp + c.fp > 0) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.fp + c.tn > 0) r.fpr = static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
  if (c.fn + c.tp > 0) r.fnr = static_cast<double>(c.fn) / static_cast<double>(c.fn + c.tp);
  return r;
}

MetricValues metric_values(const ConfusionCounts& c) {
  const Rates r = rates(c);
  return {f_measure(c), pwc(c), r.precision, r.recall, r.fpr, r.fnr};
}

namespace {

MetricValues mean_values(const std::vector<MetricValues>& vs) {
  MetricValues m;
  const double inv = 1.0 / static_cast<double>(vs.size());
  for (const auto& v : vs) {
    m.fmeasure += v.fmeasure * inv;
    m.pwc += v.pwc * inv;
    m.precision += v.precision * inv;
    m.recall += v.recall * inv;
    m.fpr += v.fpr * inv;
    m.fnr += v.fnr * inv;
  }
  return m;
}

nlohmann::json values_to_json(const MetricValues& v) {
  return {{"fmeasure", v.fmeasure}, {"pwc", v.pwc},
          {"precision", v.precision}, {"recall", v.recall},
          {"fpr", v.fpr},           {"fnr", v.fnr}};
}

nlohmann::json counts_to_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

}  // namespace

MetricReport aggregate(const std::vector<VideoCounts>& videos) {
  if (videos.empty()) throw DataError("aggregate: no videos");
  MetricReport report;
  std::map<std::string, std::vector<MetricValues>> per_category;
  std::vector<MetricValues> all_videos;
  for (const auto& v : videos) {
    VideoReport vr{v.category, v.video, metric_values(v.counts), v.counts};
    per_category[v.category].push_back(vr.values);
    all_videos.push_back(vr.values);
    report.videos.push_back(std::move(vr));
  }
  std::vector<MetricValues> category_means;
  for (const auto& [name, vs] : per_category) {
    CategoryReport cr{name, mean_values(vs)};
    category_means.push_back(cr.values);
    report.categories.push_back(std::move(cr));
  }
  report.overall_by_category = mean_values(category_means);
  report.overall_by_video = mean_values(all_videos);
  return report;
}

std::string report_to_json(const MetricReport& report, int indent) {
  nlohmann::json j;
  j["videos"] = nlohmann::json::array();
  for (const auto& v : report.videos) {
    nlohmann::json jv = values_to_json(v.values);
    jv["category"] = v.category;
    jv["video"] = v.video;
    jv.update(counts_to_json(v.counts));
    j["videos"].push_back(jv);
  }
  j["categories"] = nlohmann::json::array();
  for (const auto& c : report.categories) {
    nlohmann::json jc = values_to_json(c.values);
    jc["category"] = c.category;
    j["categories"].push_back(jc);
  }
  j["overall_by_category"] = values_to_json(report.overall_by_category);
  j["overall_by_video"] = values_to_json(report.overall_by_video);
  return j.dump(indent);
}

}  // namespace fgseg
