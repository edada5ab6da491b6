#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fgseg/errors.hpp"
#include "fgseg/layers.hpp"

namespace fgseg {

// Architecture constants; width_mult scales every channel count so small
// test models keep the exact layer graph.
struct ModelConfig {
  int input_channels = 3;
  double width_mult = 1.0;
  double encoder_dropout_rate = 0.5;
  double spatial_dropout_rate = 0.25;
  double instance_norm_eps = 1e-5;
  bool use_gap = true;
  std::vector<int> freeze_blocks;  // encoder blocks (1..4) excluded from updates
  std::uint64_t seed = 0;

  int scaled(int base) const {
    return static_cast<int>(std::lround(base * width_mult));
  }

  void validate() const {
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (!(width_mult > 0.0 && width_mult <= 1.0)) {
      throw ConfigError("width_mult must be in (0,1], got " + std::to_string(width_mult));
    }
    if (scaled(64) < 1) throw ConfigError("width_mult too small: 64*width_mult rounds to 0");
    if (encoder_dropout_rate < 0.0 || encoder_dropout_rate >= 1.0 ||
        spatial_dropout_rate < 0.0 || spatial_dropout_rate >= 1.0) {
      throw ConfigError("dropout rates must be in [0,1)");
    }
    if (!(instance_norm_eps > 0.0)) throw ConfigError("instance_norm_eps must be > 0");
    for (int b : freeze_blocks) {
      if (b < 1 || b > 4) throw ConfigError("freeze_blocks entries must be in 1..4");
    }
  }
};

// Whether the decoder applies GAP modulation. ForceZero keeps the
// modulation in the graph but with zero coefficients, which must match
// Disabled bit-for-bit.
enum class GapMode { Config, Enabled, Disabled, ForceZero };

// Ordered, uniquely named parameter set. Order is creation order and is
// also the serialization order.
template <typename S>
class ModelWeights {
 public:
  Param<S>& add(std::string name, Tensor<S> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate param name: " + name);
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Param<S>>(std::move(name), std::move(value)));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Param<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown param name: " + name);
    return *params_[it->second];
  }

  const Param<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown param name: " + name);
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Param<S>& operator[](std::size_t i) { return *params_[i]; }
  const Param<S>& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  std::vector<Tensor<S>> snapshot_values() const {
    std::vector<Tensor<S>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p->value);
    return out;
  }

  void restore_values(const std::vector<Tensor<S>>& values) {
    if (values.size() != params_.size()) {
      throw std::invalid_argument("restore_values: snapshot size mismatch");
    }
    for (std::size_t i = 0; i < values.size(); ++i) params_[i]->value = values[i];
  }

 private:
  std::vector<std::unique_ptr<Param<S>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 4);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void get_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw DataError(std::string("truncated weight file while reading ") + what);
  }
}

inline std::uint16_t get_u16(std::istream& is, const char* what) {
  unsigned char b[2];
  get_bytes(is, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is, const char* what) {
  const std::uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

// FGS2 container: magic "FGS2", u32 version 1, u32 tensor count, then for
// each tensor u16 name length + name bytes, u8 rank, rank x u32 dims and
// row-major 32-bit little-endian floats.
template <typename S>
void save_weights(const ModelWeights<S>& weights, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open weight file for writing: " + path.string());
  os.write("FGS2", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(weights.size()));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const Param<S>& p = weights[i];
    detail::put_u16(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    os.put(static_cast<char>(4));
    const Shape& s = p.value.shape();
    detail::put_u32(os, static_cast<std::uint32_t>(s.n));
    detail::put_u32(os, static_cast<std::uint32_t>(s.c));
    detail::put_u32(os, static_cast<std::uint32_t>(s.h));
    detail::put_u32(os, static_cast<std::uint32_t>(s.w));
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      detail::put_f32(os, static_cast<float>(p.value[j]));
    }
  }
  if (!os) throw DataError("write failed for weight file: " + path.string());
}

template <typename S>
ModelWeights<S> load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open weight file: " + path.string());
  char magic[4];
  detail::get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "FGS2", 4) != 0) {
    throw DataError("bad magic in weight file " + path.string() + " (expected FGS2)");
  }
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != 1) {
    throw DataError("unsupported weight file version " + std::to_string(version));
  }
  const std::uint32_t count = detail::get_u32(is, "tensor count");
  ModelWeights<S> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = detail::get_u16(is, "name length");
    std::string name(name_len, '\0');
    detail::get_bytes(is, name.data(), name_len, "name");
    unsigned char rank;
    detail::get_bytes(is, &rank, 1, "rank");
    std::uint32_t dims[4] = {1, 1, 1, 1};
    if (rank == 4) {
      for (int i = 0; i < 4; ++i) dims[i] = detail::get_u32(is, "dims");
    } else if (rank == 1) {
      dims[1] = detail::get_u32(is, "dims");  // a bare vector is a channel vector
    } else {
      throw DataError("unsupported tensor rank " + std::to_string(rank) + " for '" + name + "'");
    }
    Tensor<S> value(Shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                          static_cast<int>(dims[2]), static_cast<int>(dims[3])});
    for (std::int64_t i = 0; i < value.size(); ++i) {
      value[i] = static_cast<S>(detail::get_f32(is, name.c_str()));
    }
    out.add(std::move(name), std::move(value));
  }
  return out;
}

template <typename S>
struct EncUnitTrace {
  Conv2dCtx<S> conv;
  ReluCtx<S> relu;
  DropoutCtx<S> drop;
};

template <typename S>
struct EncoderTrace {
  std::vector<EncUnitTrace<S>> units;  // flattened block order
  Pool2Ctx pool1, pool2;
  Tensor<S> t2, t4, F;
};

template <typename S>
struct MfpmTrace {
  Pool3Ctx pool;
  Conv2dCtx<S> fp, fa, fb, fc, fd;
  Tensor<S> branches;  // concat(f_p,f_a,f_b,f_c,f_d) before normalization
  InstanceNormCtx<S> in;
  ReluCtx<S> relu;
  SpatialDropoutCtx<S> sdrop;
  Tensor<S> Fp;
};

template <typename S>
struct DecoderTrace {
  bool modulated = false;
  bool taps_used = false;  // alpha actually derived from encoder taps
  Conv2dCtx<S> proj;
  GapCtx gap4, gap2;
  Conv2dCtx<S> c1, c2, c3, out;
  InstanceNormCtx<S> in1, in2, in3;
  ReluCtx<S> r1, r2, r3;
  ModulateCtx<S> m1, m2;
  Upsample2xCtx u1, u2;
  SigmoidCtx<S> sig;
  Tensor<S> P;
};

template <typename S>
struct ForwardTrace {
  Mode mode = Mode::Eval;
  EncoderTrace<S> enc;
  MfpmTrace<S> mfpm;
  DecoderTrace<S> dec;
  Tensor<S> P;
};

// Truncated-VGG encoder (four blocks, two poolings), fused multi-dilation
// feature pooling block, and a GAP-modulated decoder back to full
// resolution. The layer graph is fixed; only channel widths scale.
template <typename S>
class Model {
 public:
  Model(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(rng);
    wire();
  }

  Model(ModelConfig cfg, ModelWeights<S> loaded) : cfg_(std::move(cfg)) {
    cfg_.validate();
    adopt(std::move(loaded));
    wire();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelWeights<S>& weights() { return weights_; }
  const ModelWeights<S>& weights() const { return weights_; }

  // Expected parameter names and shapes for this config, in order.
  std::vector<std::pair<std::string, Shape>> weight_spec() const {
    std::vector<std::pair<std::string, Shape>> out;
    const auto plan = encoder_plan();
    int in_c = cfg_.input_channels;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      for (std::size_t i = 0; i < plan[b].size(); ++i) {
        const std::string base =
            "enc.b" + std::to_string(b + 1) + ".c" + std::to_string(i + 1);
        out.emplace_back(base + ".w", Shape{plan[b][i], in_c, 3, 3});
        out.emplace_back(base + ".b", Shape{1, plan[b][i], 1, 1});
        in_c = plan[b][i];
      }
    }
    const int enc_c = in_c;        // 512*wm
    const int br = cfg_.scaled(64);
    const int cat_c = 5 * br;
    out.emplace_back("mfpm.fp.w", Shape{br, enc_c, 1, 1});
    out.emplace_back("mfpm.fp.b", Shape{1, br, 1, 1});
    out.emplace_back("mfpm.fa.w", Shape{br, enc_c, 3, 3});
    out.emplace_back("mfpm.fa.b", Shape{1, br, 1, 1});
    for (const char* nm : {"fb", "fc", "fd"}) {
      out.emplace_back(std::string("mfpm.") + nm + ".w", Shape{br, enc_c + br, 3, 3});
      out.emplace_back(std::string("mfpm.") + nm + ".b", Shape{1, br, 1, 1});
    }
    out.emplace_back("mfpm.in.gamma", Shape{1, cat_c, 1, 1});
    out.emplace_back("mfpm.in.beta", Shape{1, cat_c, 1, 1});
    out.emplace_back("dec.proj.w", Shape{br, cfg_.scaled(128), 1, 1});
    out.emplace_back("dec.proj.b", Shape{1, br, 1, 1});
    out.emplace_back("dec.c1.w", Shape{br, cat_c, 3, 3});
    out.emplace_back("dec.c1.b", Shape{1, br, 1, 1});
    out.emplace_back("dec.in1.gamma", Shape{1, br, 1, 1});
    out.emplace_back("dec.in1.beta", Shape{1, br, 1, 1});
    out.emplace_back("dec.c2.w", Shape{br, br, 3, 3});
    out.emplace_back("dec.c2.b", Shape{1, br, 1, 1});
    out.emplace_back("dec.in2.gamma", Shape{1, br, 1, 1});
    out.emplace_back("dec.in2.beta", Shape{1, br, 1, 1});
    out.emplace_back("dec.c3.w", Shape{br, br, 3, 3});
    out.emplace_back("dec.c3.b", Shape{1, br, 1, 1});
    out.emplace_back("dec.in3.gamma", Shape{1, br, 1, 1});
    out.emplace_back("dec.in3.beta", Shape{1, br, 1, 1});
    out.emplace_back("dec.out.w", Shape{1, br, 1, 1});
    out.emplace_back("dec.out.b", Shape{1, 1, 1, 1});
    return out;
  }

  struct EncoderOut {
    Tensor<S> F, t2, t4;
  };

  EncoderOut encoder_forward(const Tensor<S>& x, Mode mode, Rng* rng) {
    EncoderTrace<S> trace;
    Tensor<S> F = run_encoder(x, mode, rng, trace);
    return EncoderOut{std::move(F), std::move(trace.t2), std::move(trace.t4)};
  }

  Tensor<S> mfpm_forward(const Tensor<S>& F, Mode mode, Rng* rng) {
    MfpmTrace<S> trace;
    return run_mfpm(F, mode, rng, trace);
  }

  // The five pooling branches concatenated, before normalization and
  // dropout; each output location here has a finite receptive field in F.
  Tensor<S> mfpm_branches(const Tensor<S>& F) {
    MfpmTrace<S> trace;
    run_branches(F, trace);
    return trace.branches;
  }

  Tensor<S> decoder_forward(const Tensor<S>& Fp, const Tensor<S>& t2, const Tensor<S>& t4,
                            Mode mode, GapMode gap = GapMode::Config) {
    DecoderTrace<S> trace;
    return run_decoder(Fp, t2, t4, mode, gap, trace);
  }

  ForwardTrace<S> forward(const Tensor<S>& x, Mode mode, Rng* rng = nullptr,
                          GapMode gap = GapMode::Config) {
    ForwardTrace<S> trace;
    trace.mode = mode;
    Tensor<S> F = run_encoder(x, mode, rng, trace.enc);
    Tensor<S> Fp = run_mfpm(F, mode, rng, trace.mfpm);
    trace.P = run_decoder(Fp, trace.enc.t2, trace.enc.t4, mode, gap, trace.dec);
    return trace;
  }

  // Reverse traversal of the recorded graph; accumulates into every
  // parameter's grad and returns the input gradient.
  Tensor<S> backward(const ForwardTrace<S>& trace, const Tensor<S>& dP) {
    if (trace.mode != Mode::Train) {
      throw std::logic_error("model backward requires a Train-mode forward trace");
    }
    const DecoderTrace<S>& dec = trace.dec;
    Tensor<S> g = sigmoid_backward(dec.sig, dP);
    g = out_.backward(dec.out, g);
    g = relu_backward(dec.r3, g);
    g = din3_.backward(dec.in3, g);
    g = dconv3_.backward(dec.c3, g);
    g = bilinear_upsample2x_backward<S>(dec.u2, g);

    Tensor<S> g_t2_gap, g_t4_gap;
    if (dec.modulated) {
      ModulateGrads<S> mg = gap_modulate_backward(dec.m2, g);
      g = std::move(mg.gf);
      if (dec.taps_used) g_t2_gap = global_avg_pool_backward<S>(dec.gap2, mg.galpha);
    }
    g = relu_backward(dec.r2, g);
    g = din2_.backward(dec.in2, g);
    g = dconv2_.backward(dec.c2, g);
    g = bilinear_upsample2x_backward<S>(dec.u1, g);
    if (dec.modulated) {
      ModulateGrads<S> mg = gap_modulate_backward(dec.m1, g);
      g = std::move(mg.gf);
      if (dec.taps_used) {
        Tensor<S> gp = global_avg_pool_backward<S>(dec.gap4, mg.galpha);
        g_t4_gap = proj_.backward(dec.proj, gp);
      }
    }
    g = relu_backward(dec.r1, g);
    g = din1_.backward(dec.in1, g);
    Tensor<S> gFp = dconv1_.backward(dec.c1, g);

    // feature pooling block
    const MfpmTrace<S>& mf = trace.mfpm;
    Tensor<S> gcat = spatial_dropout_backward(mf.sdrop, gFp);
    gcat = relu_backward(mf.relu, gcat);
    gcat = mfpm_in_.backward(mf.in, gcat);
    const int br = cfg_.scaled(64);
    const int enc_c = encoder_plan().back().back();
    Tensor<S> gfp = slice_channels(gcat, 0, br);
    Tensor<S> gfa = slice_channels(gcat, br, 2 * br);
    Tensor<S> gfb = slice_channels(gcat, 2 * br, 3 * br);
    Tensor<S> gfc = slice_channels(gcat, 3 * br, 4 * br);
    Tensor<S> gfd = slice_channels(gcat, 4 * br, 5 * br);

    Tensor<S> gF(mf.fa.input.shape());
    {
      Tensor<S> gin = fd_.backward(mf.fd, gfd);
      gF.array() += slice_channels(gin, 0, enc_c).array();
      gfc.array() += slice_channels(gin, enc_c, enc_c + br).array();
    }
    {
      Tensor<S> gin = fc_.backward(mf.fc, gfc);
      gF.array() += slice_channels(gin, 0, enc_c).array();
      gfb.array() += slice_channels(gin, enc_c, enc_c + br).array();
    }
    {
      Tensor<S> gin = fb_.backward(mf.fb, gfb);
      gF.array() += slice_channels(gin, 0, enc_c).array();
      gfa.array() += slice_channels(gin, enc_c, enc_c + br).array();
    }
    gF.array() += fa_.backward(mf.fa, gfa).array();
    {
      Tensor<S> gpool = fp_.backward(mf.fp, gfp);
      gF.array() += maxpool3x3_same_backward<S>(mf.pool, gpool).array();
    }

    // encoder
    const EncoderTrace<S>& enc = trace.enc;
    const auto plan = encoder_plan();
    g = std::move(gF);
    std::size_t unit = enc.units.size();
    auto run_block_backward = [&](std::size_t block) {
      for (std::size_t i = plan[block].size(); i > 0; --i) {
        --unit;
        g = dropout_backward(enc.units[unit].drop, g);
        g = relu_backward(enc.units[unit].relu, g);
        g = enc_convs_[block][i - 1].backward(enc.units[unit].conv, g);
      }
    };
    run_block_backward(3);
    run_block_backward(2);
    g = maxpool2x2_backward<S>(enc.pool2, g);
    if (!g_t4_gap.empty()) g.array() += g_t4_gap.array();
    run_block_backward(1);
    g = maxpool2x2_backward<S>(enc.pool1, g);
    if (!g_t2_gap.empty()) g.array() += g_t2_gap.array();
    run_block_backward(0);
    return g;
  }

 private:
  std::vector<std::vector<int>> encoder_plan() const {
    const int c64 = cfg_.scaled(64), c128 = cfg_.scaled(128);
    const int c256 = cfg_.scaled(256), c512 = cfg_.scaled(512);
    return {{c64, c64}, {c128, c128}, {c256, c256, c256}, {c512, c512, c512}};
  }

  void build(Rng& rng) {
    for (const auto& [name, shape] : weight_spec()) {
      if (name.ends_with(".w")) {
        weights_.add(name, Tensor<S>::he_normal(shape, rng));
      } else if (name.ends_with(".gamma")) {
        weights_.add(name, Tensor<S>::ones(shape));
      } else {
        weights_.add(name, Tensor<S>::zeros(shape));  // biases and betas
      }
    }
    apply_freeze();
  }

  void adopt(ModelWeights<S> loaded) {
    const auto spec = weight_spec();
    for (const auto& [name, shape] : spec) {
      if (!loaded.contains(name)) {
        throw DataError("weight file is missing tensor '" + name + "'");
      }
      const Shape& got = loaded.at(name).value.shape();
      if (!(got == shape)) {
        throw DataError("weight tensor '" + name + "' has shape " + got.str() +
                        " but the config requires " + shape.str());
      }
    }
    if (loaded.size() != spec.size()) {
      for (std::size_t i = 0; i < loaded.size(); ++i) {
        const std::string& nm = loaded[i].name;
        if (std::find_if(spec.begin(), spec.end(),
                         [&](const auto& e) { return e.first == nm; }) == spec.end()) {
          throw DataError("weight file contains unexpected tensor '" + nm + "'");
        }
      }
    }
    // Rebuild in canonical order so that save(load(f)) preserves layout.
    for (const auto& [name, shape] : spec) {
      weights_.add(name, std::move(loaded.at(name).value));
    }
    apply_freeze();
  }

  void apply_freeze() {
    for (int b : cfg_.freeze_blocks) {
      const std::string prefix = "enc.b" + std::to_string(b) + ".";
      for (std::size_t i = 0; i < weights_.size(); ++i) {
        if (weights_[i].name.starts_with(prefix)) weights_[i].trainable = false;
      }
    }
  }

  void wire() {
    const auto plan = encoder_plan();
    enc_convs_.clear();
    enc_convs_.resize(plan.size());
    for (std::size_t b = 0; b < plan.size(); ++b) {
      for (std::size_t i = 0; i < plan[b].size(); ++i) {
        const std::string base =
            "enc.b" + std::to_string(b + 1) + ".c" + std::to_string(i + 1);
        enc_convs_[b].push_back(
            Conv2d<S>{&weights_.at(base + ".w"), &weights_.at(base + ".b"), 1});
      }
    }
    fp_ = {&weights_.at("mfpm.fp.w"), &weights_.at("mfpm.fp.b"), 1};
    fa_ = {&weights_.at("mfpm.fa.w"), &weights_.at("mfpm.fa.b"), 1};
    fb_ = {&weights_.at("mfpm.fb.w"), &weights_.at("mfpm.fb.b"), 4};
    fc_ = {&weights_.at("mfpm.fc.w"), &weights_.at("mfpm.fc.b"), 8};
    fd_ = {&weights_.at("mfpm.fd.w"), &weights_.at("mfpm.fd.b"), 16};
    mfpm_in_ = {&weights_.at("mfpm.in.gamma"), &weights_.at("mfpm.in.beta"),
                static_cast<S>(cfg_.instance_norm_eps)};
    proj_ = {&weights_.at("dec.proj.w"), &weights_.at("dec.proj.b"), 1};
    dconv1_ = {&weights_.at("dec.c1.w"), &weights_.at("dec.c1.b"), 1};
    dconv2_ = {&weights_.at("dec.c2.w"), &weights_.at("dec.c2.b"), 1};
    dconv3_ = {&weights_.at("dec.c3.w"), &weights_.at("dec.c3.b"), 1};
    out_ = {&weights_.at("dec.out.w"), &weights_.at("dec.out.b"), 1};
    din1_ = {&weights_.at("dec.in1.gamma"), &weights_.at("dec.in1.beta"),
             static_cast<S>(cfg_.instance_norm_eps)};
    din2_ = {&weights_.at("dec.in2.gamma"), &weights_.at("dec.in2.beta"),
             static_cast<S>(cfg_.instance_norm_eps)};
    din3_ = {&weights_.at("dec.in3.gamma"), &weights_.at("dec.in3.beta"),
             static_cast<S>(cfg_.instance_norm_eps)};
  }

  Tensor<S> run_encoder(const Tensor<S>& x, Mode mode, Rng* rng, EncoderTrace<S>& trace) {
    if (x.shape().c != cfg_.input_channels) {
      throw std::invalid_argument("encoder input has " + std::to_string(x.shape().c) +
                                  " channels, config expects " +
                                  std::to_string(cfg_.input_channels));
    }
    if (x.shape().h % 4 != 0 || x.shape().w % 4 != 0) {
      throw std::invalid_argument("encoder input dims must be divisible by 4, got " +
                                  x.shape().str());
    }
    const auto plan = encoder_plan();
    trace.units.clear();
    std::size_t total = 0;
    for (const auto& b : plan) total += b.size();
    trace.units.resize(total);
    Tensor<S> cur = x;
    std::size_t unit = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      for (std::size_t i = 0; i < plan[b].size(); ++i) {
        EncUnitTrace<S>& u = trace.units[unit++];
        cur = enc_convs_[b][i].forward(cur, u.conv);
        cur = relu(cur, u.relu);
        cur = dropout(cur, cfg_.encoder_dropout_rate, mode, rng, u.drop);
      }
      if (b == 0) {
        trace.t2 = cur;
        cur = maxpool2x2(cur, trace.pool1);
      } else if (b == 1) {
        trace.t4 = cur;
        cur = maxpool2x2(cur, trace.pool2);
      }
    }
    trace.F = cur;
    return cur;
  }

  void run_branches(const Tensor<S>& F, MfpmTrace<S>& trace) {
    Tensor<S> pooled = maxpool3x3_same(F, trace.pool);
    Tensor<S> f_p = fp_.forward(pooled, trace.fp);
    Tensor<S> f_a = fa_.forward(F, trace.fa);
    Tensor<S> f_b = fb_.forward(concat_channels<S>({&F, &f_a}), trace.fb);
    Tensor<S> f_c = fc_.forward(concat_channels<S>({&F, &f_b}), trace.fc);
    Tensor<S> f_d = fd_.forward(concat_channels<S>({&F, &f_c}), trace.fd);
    trace.branches = concat_channels<S>({&f_p, &f_a, &f_b, &f_c, &f_d});
  }

  Tensor<S> run_mfpm(const Tensor<S>& F, Mode mode, Rng* rng, MfpmTrace<S>& trace) {
    run_branches(F, trace);
    Tensor<S> y = mfpm_in_.forward(trace.branches, trace.in);
    y = relu(y, trace.relu);
    trace.Fp = spatial_dropout(y, cfg_.spatial_dropout_rate, mode, rng, trace.sdrop);
    return trace.Fp;
  }

  Tensor<S> run_decoder(const Tensor<S>& Fp, const Tensor<S>& t2, const Tensor<S>& t4,
                        Mode mode, GapMode gap, DecoderTrace<S>& trace) {
    GapMode resolved = gap;
    if (resolved == GapMode::Config) {
      resolved = cfg_.use_gap ? GapMode::Enabled : GapMode::Disabled;
    }
    trace.modulated = resolved != GapMode::Disabled;
    trace.taps_used = resolved == GapMode::Enabled;

    Tensor<S> alpha4, alpha2;
    if (resolved == GapMode::Enabled) {
      Tensor<S> projected = proj_.forward(t4, trace.proj);
      alpha4 = global_avg_pool(projected, trace.gap4);
      alpha2 = global_avg_pool(t2, trace.gap2);
    } else if (resolved == GapMode::ForceZero) {
      alpha4 = Tensor<S>({Fp.shape().n, cfg_.scaled(64), 1, 1});
      alpha2 = Tensor<S>({Fp.shape().n, cfg_.scaled(64), 1, 1});
    }

    Tensor<S> d = dconv1_.forward(Fp, trace.c1);
    d = din1_.forward(d, trace.in1);
    d = relu(d, trace.r1);
    if (trace.modulated) d = gap_modulate(d, alpha4, trace.m1);
    d = bilinear_upsample2x(d, trace.u1);
    d = dconv2_.forward(d, trace.c2);
    d = din2_.forward(d, trace.in2);
    d = relu(d, trace.r2);
    if (trace.modulated) d = gap_modulate(d, alpha2, trace.m2);
    d = bilinear_upsample2x(d, trace.u2);
    d = dconv3_.forward(d, trace.c3);
    d = din3_.forward(d, trace.in3);
    d = relu(d, trace.r3);
    d = out_.forward(d, trace.out);
    trace.P = sigmoid(d, trace.sig);
    return trace.P;
  }

  ModelConfig cfg_;
  ModelWeights<S> weights_;
  std::vector<std::vector<Conv2d<S>>> enc_convs_;
  Conv2d<S> fp_, fa_, fb_, fc_, fd_;
  InstanceNorm2d<S> mfpm_in_;
  Conv2d<S> proj_, dconv1_, dconv2_, dconv3_, out_;
  InstanceNorm2d<S> din1_, din2_, din3_;
};

}  // namespace fgseg
