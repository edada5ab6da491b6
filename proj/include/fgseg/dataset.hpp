#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "fgseg/pixmap.hpp"
#include "fgseg/tensor.hpp"

namespace fgseg {

// Ground-truth label semantics (CDnet convention): 255 foreground,
// 0 background, 50 hard shadow (counts as background), 85/170 ignored.
inline constexpr std::uint8_t kGtForeground = 255;
inline constexpr std::uint8_t kGtBackground = 0;
inline constexpr std::uint8_t kGtShadow = 50;
inline constexpr std::uint8_t kGtIgnoreLow = 85;
inline constexpr std::uint8_t kGtIgnoreHigh = 170;

inline bool gt_value_known(std::uint8_t v) {
  return v == kGtForeground || v == kGtBackground || v == kGtShadow ||
         v == kGtIgnoreLow || v == kGtIgnoreHigh;
}

inline bool gt_is_ignored(std::uint8_t v) {
  return v == kGtIgnoreLow || v == kGtIgnoreHigh;
}

// Scene directory layout: <root>/input/in%06d.ppm, <root>/gt/gt%06d.pgm,
// optional <root>/ROI.pgm and <root>/train_ids.txt (one id per line).
struct SceneLayout {
  std::filesystem::path root;
  std::filesystem::path input_dir;
  std::filesystem::path gt_dir;
  std::optional<std::filesystem::path> roi_path;
  std::vector<int> frame_ids;  // ascending
};

struct FrameRecord {
  int id = 0;
  Tensor<float> image;            // (1,3,h,w) in [0,1]
  std::vector<std::uint8_t> gt;   // h*w labels
  std::vector<std::uint8_t> roi;  // h*w, nonzero = evaluable
  int height = 0;
  int width = 0;
};

std::filesystem::path input_frame_path(const SceneLayout& layout, int id);
std::filesystem::path gt_frame_path(const SceneLayout& layout, int id);

// require_gt=false lists input frames only (prediction on unlabeled data).
SceneLayout discover_scene(const std::filesystem::path& root, bool require_gt = true);

FrameRecord load_frame(const SceneLayout& layout, int id);
std::vector<FrameRecord> load_scene_frames(const SceneLayout& layout);

// v/255 per channel into (1,channels,h,w).
Tensor<float> normalize(const Pixmap& img);

// round(p*255) of a (1,1,h,w) probability map.
Pixmap prob_to_pixmap(const Tensor<float>& P);
Pixmap mask_to_pixmap(const std::vector<std::uint8_t>& mask, int height, int width);
Pixmap image_to_pixmap(const Tensor<float>& image);

struct PaddedImage {
  Tensor<float> tensor;
  int orig_h = 0;
  int orig_w = 0;
};

// Reflect-pads right/bottom to the next multiple of m. The padded region
// is cropped away again before any metric sees the prediction.
PaddedImage pad_to_multiple(const Tensor<float>& image, int multiple = 4);
Tensor<float> crop_to(const Tensor<float>& t, int height, int width);

struct SynthSceneConfig {
  int height = 64;
  int width = 64;
  int frames = 40;
  int square_size = 16;
  double noise = 0.02;
  std::uint64_t seed = 0;
};

// Static textured background with a bright square bouncing across it;
// the ground truth is the exact square mask.
std::vector<FrameRecord> synth_scene(const SynthSceneConfig& cfg);

void write_scene(const std::vector<FrameRecord>& frames, const std::filesystem::path& root);

// FNV-1a over frame ids and pixel payloads, for run manifests.
std::uint64_t scene_checksum(const std::vector<FrameRecord>& frames);

}  // namespace fgseg
