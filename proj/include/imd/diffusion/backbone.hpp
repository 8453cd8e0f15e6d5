#pragma once

// Desk-scale latent encoder and prompt-conditioned UNet feature extractor.
//
// Up-path blocks are numbered from the deepest level outwards, with
// `blocks_per_up_level` blocks per level. The tap can address them either by
// block number (TapConvention::Block) or by resolution stage
// (TapConvention::Stage, which selects the last block of that stage).

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "imd/ad/nn.hpp"
#include "imd/core/image.hpp"
#include "imd/core/types.hpp"
#include "imd/diffusion/schedule.hpp"

namespace imd::diffusion {

using ad::Binder;
using ad::ParamSet;
using ad::Var;

enum class TapConvention { Block, Stage };

struct BackboneSpec {
  int image_channels = 3;
  int encoder_hidden = 16;
  int latent_channels = 16;       // c_z
  std::vector<int> widths = {32, 64};
  int blocks_per_up_level = 2;
  int block_index = 2;            // n
  TapConvention tap = TapConvention::Block;
  int out_channels = 64;          // C_out
  int prompt_dim = 32;            // d_p
  int time_dim = 32;
  int groups = 8;

  int levels() const { return static_cast<int>(widths.size()); }
  int up_blocks() const { return levels() * blocks_per_up_level; }

  /// Up-path block number addressed by block_index under the tap convention.
  int tapped_block() const {
    const int b = tap == TapConvention::Block ? block_index : (block_index + 1) * blocks_per_up_level - 1;
    if (b < 0 || b >= up_blocks())
      throw ConfigError("block_index " + std::to_string(block_index) + " out of range for " +
                        std::to_string(levels()) + "-level UNet");
    return b;
  }
  /// Resolution level (0 = finest) of an up-path block.
  int level_of_up_block(int b) const { return levels() - 1 - b / blocks_per_up_level; }

  void validate() const {
    if (widths.empty()) throw ConfigError("UNet needs at least one level");
    for (int w : widths)
      if (w % groups) throw ConfigError("channel widths must be divisible by the group count");
    if (time_dim % 2) throw ConfigError("time_dim must be even");
    tapped_block();
  }
};

inline nlohmann::json to_json(const BackboneSpec& s) {
  return {{"image_channels", s.image_channels}, {"encoder_hidden", s.encoder_hidden},
          {"latent_channels", s.latent_channels}, {"widths", s.widths},
          {"blocks_per_up_level", s.blocks_per_up_level}, {"block_index", s.block_index},
          {"tap", s.tap == TapConvention::Block ? "block" : "stage"}, {"out_channels", s.out_channels},
          {"prompt_dim", s.prompt_dim}, {"time_dim", s.time_dim}, {"groups", s.groups}};
}

inline BackboneSpec backbone_spec_from_json(const nlohmann::json& j) {
  BackboneSpec s;
  s.image_channels = j.value("image_channels", s.image_channels);
  s.encoder_hidden = j.value("encoder_hidden", s.encoder_hidden);
  s.latent_channels = j.value("latent_channels", s.latent_channels);
  s.widths = j.value("widths", s.widths);
  s.blocks_per_up_level = j.value("blocks_per_up_level", s.blocks_per_up_level);
  s.block_index = j.value("block_index", s.block_index);
  s.tap = j.value("tap", std::string("block")) == "stage" ? TapConvention::Stage : TapConvention::Block;
  s.out_channels = j.value("out_channels", s.out_channels);
  s.prompt_dim = j.value("prompt_dim", s.prompt_dim);
  s.time_dim = j.value("time_dim", s.time_dim);
  s.groups = j.value("groups", s.groups);
  return s;
}

// ---------------------------------------------------------------- latent encoder

/// Frozen stride-8 encoder: 4x4/4 conv, SiLU, 2x2/2 conv. Biases are drawn
/// nonzero so that an all-zero image has a nontrivial response.
template <class T>
void init_latent_encoder(ParamSet<T>& params, const BackboneSpec& spec, std::uint64_t seed) {
  ad::Initializer<T> init(params, seed);
  init.conv("enc.c1", spec.encoder_hidden, spec.image_channels, 4, 1.5);
  init.normal("enc.c1.b", {spec.encoder_hidden}, 0.1);
  init.conv("enc.c2", spec.latent_channels, spec.encoder_hidden, 2, 1.5);
  init.normal("enc.c2.b", {spec.latent_channels}, 0.1);
}

template <class T>
Var<T> encode_latent(Binder<T>& p, Var<T> image) {
  if (image.dim(1) % kCoarseStride || image.dim(2) % kCoarseStride)
    throw ShapeError("encode_latent needs dims divisible by 8, got " + shape_str(image.shape()));
  Var<T> h = ad::silu(ad::conv(p, "enc.c1", image, 4, 0));
  return ad::conv(p, "enc.c2", h, 2, 0);
}

// ---------------------------------------------------------------- UNet

inline std::string up_name(int b) { return "unet.up" + std::to_string(b); }
inline std::string down_name(int l) { return "unet.down" + std::to_string(l); }

template <class T>
void init_unet(ParamSet<T>& params, const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  ad::Initializer<T> init(params, seed);
  const int temb = 2 * spec.time_dim;
  init.linear("unet.time.l1", temb, spec.time_dim);
  init.linear("unet.time.l2", temb, temb);
  init.conv("unet.conv_in", spec.widths[0], spec.latent_channels, 3);

  auto res = [&](const std::string& n, int ci, int co) {
    init.norm(n + ".n1", ci);
    init.conv(n + ".c1", co, ci, 3);
    init.linear(n + ".t", co, temb);
    init.norm(n + ".n2", co);
    init.conv(n + ".c2", co, co, 3, 0.5);
    if (ci != co) init.conv(n + ".skip", co, ci, 1);
  };
  auto xattn = [&](const std::string& n, int c) {
    init.norm(n + ".n", c);
    init.linear(n + ".q", c, c, 1.0, false);
    init.linear(n + ".k", c, spec.prompt_dim, 1.0, false);
    init.linear(n + ".v", c, spec.prompt_dim, 1.0, false);
    init.linear(n + ".o", c, c);
  };

  int ch = spec.widths[0];
  for (int l = 0; l < spec.levels(); ++l) {
    const int w = spec.widths[l];
    res(down_name(l) + ".res", ch, w);
    xattn(down_name(l) + ".attn", w);
    if (l + 1 < spec.levels()) init.conv(down_name(l) + ".down", w, w, 3);
    ch = w;
  }
  res("unet.mid.res", ch, ch);
  xattn("unet.mid.attn", ch);
  for (int b = 0; b < spec.up_blocks(); ++b) {
    const int l = spec.level_of_up_block(b);
    const int w = spec.widths[l];
    const bool first = b % spec.blocks_per_up_level == 0;
    res(up_name(b) + ".res", first ? ch + spec.widths[l] : ch, w);
    xattn(up_name(b) + ".attn", w);
    ch = w;
  }
  const int tapped_width = spec.widths[spec.level_of_up_block(spec.tapped_block())];
  init.conv("unet.out", spec.out_channels, tapped_width, 1);
}

/// Sinusoidal embedding of a scalar timestep as a [dim, 1] column.
template <class T>
Tensor<T> timestep_embedding(int t, int dim) {
  Tensor<T> out({dim, 1});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out.data[i] = static_cast<T>(std::sin(t * freq));
    out.data[i + half] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

template <class T>
Var<T> res_block(Binder<T>& p, const std::string& n, Var<T> x, Var<T> temb, int groups) {
  Var<T> h = ad::conv(p, n + ".c1", ad::silu(ad::gnorm(p, n + ".n1", x, groups)), 1, 1);
  Var<T> tproj = ad::linear(p, n + ".t", ad::silu(temb));  // [C, 1]
  h = ad::add_row_bias(h, ad::reshape(tproj, {tproj.dim(0)}));
  h = ad::conv(p, n + ".c2", ad::silu(ad::gnorm(p, n + ".n2", h, groups)), 1, 1);
  Var<T> skip = p.has(n + ".skip.w") ? ad::conv(p, n + ".skip", x, 1, 0) : x;
  return ad::add(skip, h);
}

/// Residual cross-attention from feature tokens to prompt tokens [L, d_p].
template <class T>
Var<T> cross_attn_block(Binder<T>& p, const std::string& n, Var<T> x, Var<T> prompt, int groups) {
  const Shape shape = x.shape();
  const int c = shape[0], tokens = shape[1] * shape[2];
  Var<T> xn = ad::reshape(ad::gnorm(p, n + ".n", x, groups), {c, tokens});
  Var<T> q = ad::linear(p, n + ".q", xn);
  Var<T> k = ad::matmul(p(n + ".k.w"), prompt, false, true);
  Var<T> v = ad::matmul(p(n + ".v.w"), prompt, false, true);
  Var<T> att = ad::linear(p, n + ".o", ad::attention(q, k, v));
  return ad::add(x, ad::reshape(att, shape));
}

/// Runs the UNet on a latent [c_z, h, w] and returns the projected activations of
/// the tapped up-block as a stride-8 map [C_out, h, w].
template <class T>
Var<T> extract_features(Binder<T>& p, Var<T> latent, int t, Var<T> prompt, const BackboneSpec& spec) {
  if (prompt.value().rank() != 2 || prompt.dim(1) != spec.prompt_dim)
    throw ShapeError("prompt width " + (prompt.value().rank() == 2 ? std::to_string(prompt.dim(1)) : std::string("?")) +
                     " does not match d_p = " + std::to_string(spec.prompt_dim));
  if (latent.dim(0) != spec.latent_channels) throw ShapeError("latent channel mismatch");
  const int L = spec.levels();
  const int scale = 1 << (L - 1);
  if (latent.dim(1) % scale || latent.dim(2) % scale)
    throw ShapeError("latent " + shape_str(latent.shape()) + " not divisible by 2^(levels-1)");
  auto& tape = p.tape();
  Var<T> temb = tape.constant(timestep_embedding<T>(t, spec.time_dim));
  temb = ad::linear(p, "unet.time.l2", ad::silu(ad::linear(p, "unet.time.l1", temb)));

  Var<T> h = ad::conv(p, "unet.conv_in", latent, 1, 1);
  std::vector<Var<T>> skips;
  for (int l = 0; l < L; ++l) {
    h = res_block(p, down_name(l) + ".res", h, temb, spec.groups);
    h = cross_attn_block(p, down_name(l) + ".attn", h, prompt, spec.groups);
    skips.push_back(h);
    if (l + 1 < L) h = ad::conv(p, down_name(l) + ".down", h, 2, 1);
  }
  h = res_block(p, "unet.mid.res", h, temb, spec.groups);
  h = cross_attn_block(p, "unet.mid.attn", h, prompt, spec.groups);

  const int tapped = spec.tapped_block();
  for (int b = 0; b <= tapped; ++b) {
    const int l = spec.level_of_up_block(b);
    if (b % spec.blocks_per_up_level == 0) {
      if (h.dim(1) != skips[l].dim(1)) h = ad::upsample_nearest(h, 2);
      h = ad::concat<T>({h, skips[l]}, 0);
    }
    h = res_block(p, up_name(b) + ".res", h, temb, spec.groups);
    h = cross_attn_block(p, up_name(b) + ".attn", h, prompt, spec.groups);
  }
  const int level = spec.level_of_up_block(tapped);
  if (level > 0) h = ad::upsample_nearest(h, 1 << level);
  return ad::conv(p, "unet.out", h, 1, 0);
}

// ---------------------------------------------------------------- adapter seam

/// Anything that turns (image, timestep, prompt) into a stride-8 feature map,
/// e.g. a wrapper around an external pretrained diffusion model.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeatureMap extract(const Image& image, int t, const Tensor<float>& prompt) = 0;
};

/// The built-in desk-scale encoder + UNet behind the adapter interface.
class DeskUnetExtractor : public FeatureExtractor {
 public:
  DeskUnetExtractor(const ParamSet<float>& params, BackboneSpec spec, NoiseSchedule schedule, std::uint64_t seed)
      : params_(params), spec_(std::move(spec)), schedule_(std::move(schedule)), seed_(seed) {}

  FeatureMap extract(const Image& image, int t, const Tensor<float>& prompt) override {
    ad::Tape<float> tape;
    Binder<float> p(tape, params_);
    Var<float> z0 = encode_latent(p, tape.constant(image_to_tensor<float>(image)));
    Var<float> zt = tape.constant(add_noise(z0.value(), t, schedule_, seed_));
    Var<float> f = extract_features(p, zt, t, tape.constant(prompt), spec_);
    return FeatureMap{f.value(), kCoarseStride};
  }

 private:
  const ParamSet<float>& params_;
  BackboneSpec spec_;
  NoiseSchedule schedule_;
  std::uint64_t seed_;
};

}  // namespace imd::diffusion
