#include "fgseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "fgseg/errors.hpp"

namespace fgseg {

namespace fs = std::filesystem;

namespace {

std::string frame_name(const char* prefix, int id, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%06d%s", prefix, id, ext);
  return buf;
}

// "in000042.ppm" -> 42; nullopt when the name does not match.
std::optional<int> parse_frame_id(const std::string& name, const std::string& prefix,
                                  const std::string& ext) {
  if (name.size() <= prefix.size() + ext.size()) return std::nullopt;
  if (name.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
  if (name.compare(name.size() - ext.size(), ext.size(), ext) != 0) return std::nullopt;
  const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - ext.size());
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(),
                                     [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  return std::stoi(digits);
}

}  // namespace

fs::path input_frame_path(const SceneLayout& layout, int id) {
  return layout.input_dir / frame_name("in", id, ".ppm");
}

fs::path gt_frame_path(const SceneLayout& layout, int id) {
  return layout.gt_dir / frame_name("gt", id, ".pgm");
}

SceneLayout discover_scene(const fs::path& root, bool require_gt) {
  SceneLayout layout;
  layout.root = root;
  layout.input_dir = root / "input";
  layout.gt_dir = root / "gt";
  if (!fs::is_directory(layout.input_dir)) {
    throw DataError("scene input directory not found: " + layout.input_dir.string());
  }
  if (require_gt && !fs::is_directory(layout.gt_dir)) {
    throw DataError("scene gt directory not found: " + layout.gt_dir.string());
  }

  std::vector<int> ids;
  for (const auto& entry : fs::directory_iterator(layout.input_dir)) {
    if (!entry.is_regular_file()) continue;
    if (auto id = parse_frame_id(entry.path().filename().string(), "in", ".ppm")) {
      ids.push_back(*id);
    }
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw DataError("no input frames found under " + layout.input_dir.string());

  if (require_gt) {
    for (int id : ids) {
      if (!fs::exists(layout.gt_dir / frame_name("gt", id, ".pgm"))) {
        throw DataError("missing ground truth for frame " + std::to_string(id) + ": " +
                        (layout.gt_dir / frame_name("gt", id, ".pgm")).string());
      }
    }
    for (const auto& entry : fs::directory_iterator(layout.gt_dir)) {
      if (!entry.is_regular_file()) continue;
      if (auto id = parse_frame_id(entry.path().filename().string(), "gt", ".pgm")) {
        if (!std::binary_search(ids.begin(), ids.end(), *id)) {
          throw DataError("ground truth frame " + std::to_string(*id) +
                          " has no matching input frame");
        }
      }
    }
  }

  const fs::path subset_file = root / "train_ids.txt";
  if (fs::exists(subset_file)) {
    std::ifstream is(subset_file);
    if (!is) throw DataError("cannot read " + subset_file.string());
    std::vector<int> subset;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      try {
        subset.push_back(std::stoi(line));
      } catch (...) {
        throw DataError("bad frame id '" + line + "' in " + subset_file.string());
      }
    }
    std::sort(subset.begin(), subset.end());
    for (int id : subset) {
      if (!std::binary_search(ids.begin(), ids.end(), id)) {
        throw DataError("train_ids.txt lists frame " + std::to_string(id) +
                        " which is not in the scene");
      }
    }
    ids = std::move(subset);
  }
  layout.frame_ids = std::move(ids);

  const fs::path roi = root / "ROI.pgm";
  if (fs::exists(roi)) layout.roi_path = roi;
  return layout;
}

Tensor<float> normalize(const Pixmap& img) {
  Tensor<float> out({1, img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        out(0, c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
      }
    }
  }
  return out;
}

Pixmap prob_to_pixmap(const Tensor<float>& P) {
  const Shape& s = P.shape();
  if (s.n != 1 || s.c != 1) {
    throw DataError("prob_to_pixmap expects a (1,1,h,w) map, got " + s.str());
  }
  Pixmap img;
  img.width = s.w;
  img.height = s.h;
  img.channels = 1;
  img.data.resize(static_cast<std::size_t>(s.h) * s.w);
  for (std::int64_t i = 0; i < P.size(); ++i) {
    const float v = std::clamp(P[i], 0.0f, 1.0f);
    img.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

Pixmap mask_to_pixmap(const std::vector<std::uint8_t>& mask, int height, int width) {
  if (mask.size() != static_cast<std::size_t>(height) * width) {
    throw DataError("mask_to_pixmap: size does not match dimensions");
  }
  Pixmap img;
  img.width = width;
  img.height = height;
  img.channels = 1;
  img.data = mask;
  return img;
}

Pixmap image_to_pixmap(const Tensor<float>& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw DataError("image_to_pixmap expects (1,1,h,w) or (1,3,h,w), got " + s.str());
  }
  Pixmap img;
  img.width = s.w;
  img.height = s.h;
  img.channels = s.c;
  img.data.resize(static_cast<std::size_t>(s.c) * s.h * s.w);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      for (int c = 0; c < s.c; ++c) {
        const float v = std::clamp(image(0, c, y, x), 0.0f, 1.0f);
        img.data[(static_cast<std::size_t>(y) * s.w + x) * s.c + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

FrameRecord load_frame(const SceneLayout& layout, int id) {
  FrameRecord rec;
  rec.id = id;
  const Pixmap in = load_pixmap(input_frame_path(layout, id));
  if (in.channels != 3) {
    throw DataError("input frame " + std::to_string(id) + " is not RGB");
  }
  rec.image = normalize(in);
  rec.height = in.height;
  rec.width = in.width;

  const fs::path gt_path = gt_frame_path(layout, id);
  const Pixmap gt = load_pixmap(gt_path);
  if (gt.channels != 1) throw DataError("gt frame " + std::to_string(id) + " is not grayscale");
  if (gt.width != in.width || gt.height != in.height) {
    throw DataError("gt frame " + std::to_string(id) + " dimensions do not match the input");
  }
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (!gt_value_known(gt.data[i])) {
      const int y = static_cast<int>(i) / gt.width;
      const int x = static_cast<int>(i) % gt.width;
      throw DataError("gt frame " + std::to_string(id) + " has invalid label " +
                      std::to_string(gt.data[i]) + " at pixel (" + std::to_string(y) + "," +
                      std::to_string(x) + ")");
    }
  }
  rec.gt = gt.data;

  if (layout.roi_path) {
    const Pixmap roi = load_pixmap(*layout.roi_path);
    if (roi.channels != 1 || roi.width != in.width || roi.height != in.height) {
      throw DataError("ROI dimensions do not match the scene frames");
    }
    rec.roi = roi.data;
  } else {
    rec.roi.assign(static_cast<std::size_t>(in.height) * in.width, 255);
  }
  return rec;
}

std::vector<FrameRecord> load_scene_frames(const SceneLayout& layout) {
  std::vector<FrameRecord> out;
  out.reserve(layout.frame_ids.size());
  for (int id : layout.frame_ids) {
    out.push_back(load_frame(layout, id));
    if (out.size() > 1 &&
        (out.back().width != out.front().width || out.back().height != out.front().height)) {
      throw DataError("frame " + std::to_string(id) + " dimensions differ from the rest of the scene");
    }
  }
  return out;
}

PaddedImage pad_to_multiple(const Tensor<float>& image, int multiple) {
  const Shape& s = image.shape();
  const int new_h = (s.h + multiple - 1) / multiple * multiple;
  const int new_w = (s.w + multiple - 1) / multiple * multiple;
  PaddedImage out;
  out.orig_h = s.h;
  out.orig_w = s.w;
  if (new_h == s.h && new_w == s.w) {
    out.tensor = image;
    return out;
  }
  const int pad_h = new_h - s.h;
  const int pad_w = new_w - s.w;
  if (pad_h > s.h || pad_w > s.w) {
    throw DataError("image " + s.str() + " too small to reflect-pad to a multiple of " +
                    std::to_string(multiple));
  }
  out.tensor = Tensor<float>({s.n, s.c, new_h, new_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < new_h; ++y) {
        const int sy = y < s.h ? y : 2 * s.h - 1 - y;
        for (int x = 0; x < new_w; ++x) {
          const int sx = x < s.w ? x : 2 * s.w - 1 - x;
          out.tensor(n, c, y, x) = image(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

Tensor<float> crop_to(const Tensor<float>& t, int height, int width) {
  const Shape& s = t.shape();
  if (height > s.h || width > s.w) {
    throw DataError("crop_to: target " + std::to_string(height) + "x" + std::to_string(width) +
                    " exceeds tensor " + s.str());
  }
  if (height == s.h && width == s.w) return t;
  Tensor<float> out({s.n, s.c, height, width});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < height; ++y) {
        const float* src = t.data() + t.offset(n, c, y, 0);
        std::copy(src, src + width, out.data() + out.offset(n, c, y, 0));
      }
    }
  }
  return out;
}

std::vector<FrameRecord> synth_scene(const SynthSceneConfig& cfg) {
  if (cfg.square_size > cfg.width || cfg.square_size > cfg.height) {
    throw DataError("synthetic square (" + std::to_string(cfg.square_size) +
                    ") is larger than the frame");
  }
  if (cfg.frames < 1) throw DataError("synthetic scene needs at least one frame");
  Rng rng(cfg.seed);

  // Smooth background: a coarse random grid per channel, bilinearly
  // interpolated up to frame size.
  const int grid = 9;
  std::vector<float> control(3 * grid * grid);
  for (auto& v : control) v = static_cast<float>(rng.uniform(0.15, 0.55));
  auto background_at = [&](int c, int y, int x) {
    const float gy = static_cast<float>(y) / (cfg.height - 1) * (grid - 1);
    const float gx = static_cast<float>(x) / (cfg.width - 1) * (grid - 1);
    const int y0 = std::min(static_cast<int>(gy), grid - 2);
    const int x0 = std::min(static_cast<int>(gx), grid - 2);
    const float fy = gy - y0;
    const float fx = gx - x0;
    const auto at = [&](int yy, int xx) { return control[(c * grid + yy) * grid + xx]; };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
           fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
  };

  // Bouncing trajectory, reflected at the frame borders.
  const int max_y = cfg.height - cfg.square_size;
  const int max_x = cfg.width - cfg.square_size;
  int pos_y = max_y > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(max_y) + 1)) : 0;
  int pos_x = max_x > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(max_x) + 1)) : 0;
  int vel_y = 2, vel_x = 3;
  const float square_rgb[3] = {0.95f, 0.15f, 0.10f};

  std::vector<FrameRecord> frames;
  frames.reserve(static_cast<std::size_t>(cfg.frames));
  for (int t = 0; t < cfg.frames; ++t) {
    FrameRecord rec;
    rec.id = t + 1;
    rec.height = cfg.height;
    rec.width = cfg.width;
    rec.image = Tensor<float>({1, 3, cfg.height, cfg.width});
    rec.gt.assign(static_cast<std::size_t>(cfg.height) * cfg.width, kGtBackground);
    rec.roi.assign(rec.gt.size(), 255);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const bool inside = y >= pos_y && y < pos_y + cfg.square_size && x >= pos_x &&
                            x < pos_x + cfg.square_size;
        for (int c = 0; c < 3; ++c) {
          float v = inside ? square_rgb[c] : background_at(c, y, x);
          if (cfg.noise > 0.0) v += static_cast<float>(rng.uniform(-cfg.noise, cfg.noise));
          rec.image(0, c, y, x) = std::clamp(v, 0.0f, 1.0f);
        }
        if (inside) rec.gt[static_cast<std::size_t>(y) * cfg.width + x] = kGtForeground;
      }
    }
    frames.push_back(std::move(rec));

    if (max_y > 0) {
      pos_y += vel_y;
      if (pos_y < 0 || pos_y > max_y) {
        vel_y = -vel_y;
        pos_y = std::clamp(pos_y, 0, max_y);
      }
    }
    if (max_x > 0) {
      pos_x += vel_x;
      if (pos_x < 0 || pos_x > max_x) {
        vel_x = -vel_x;
        pos_x = std::clamp(pos_x, 0, max_x);
      }
    }
  }
  return frames;
}

void write_scene(const std::vector<FrameRecord>& frames, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "input", ec);
  fs::create_directories(root / "gt", ec);
  if (!fs::is_directory(root / "input") || !fs::is_directory(root / "gt")) {
    throw DataError("cannot create scene directories under " + root.string());
  }
  for (const auto& rec : frames) {
    save_pixmap(image_to_pixmap(rec.image), root / "input" / frame_name("in", rec.id, ".ppm"));
    save_pixmap(mask_to_pixmap(rec.gt, rec.height, rec.width),
                root / "gt" / frame_name("gt", rec.id, ".pgm"));
  }
}

std::uint64_t scene_checksum(const std::vector<FrameRecord>& frames) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t byte) {
    h ^= byte;
    h *= 0x100000001b3ull;
  };
  for (const auto& rec : frames) {
    for (int shift = 0; shift < 32; shift += 8) mix((rec.id >> shift) & 0xff);
    for (std::int64_t i = 0; i < rec.image.size(); ++i) {
      mix(static_cast<std::uint8_t>(std::lround(std::clamp(rec.image[i], 0.0f, 1.0f) * 255.0f)));
    }
    for (std::uint8_t v : rec.gt) mix(v);
    for (std::uint8_t v : rec.roi) mix(v);
  }
  return h;
}

}  // namespace fgseg
