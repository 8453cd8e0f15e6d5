#pragma once

// Cross-image interaction prompts.
//
// Each image's prompt is built by letting its encoder grid attend to the
// partner's grid (queries from self, keys and values from the partner), then
// mapping every attended token through a one-hidden-layer MLP into the UNet's
// conditioning space.

#include <string>
#include <utility>

#include "imd/ad/nn.hpp"
#include "imd/core/image.hpp"
#include "imd/core/types.hpp"

namespace imd::cipm {

using ad::Binder;
using ad::ParamSet;
using ad::Var;

enum class PromptMode { Empty, Individual, Shared, Cross };

inline std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::Empty: return "empty";
    case PromptMode::Individual: return "individual";
    case PromptMode::Shared: return "shared";
    case PromptMode::Cross: return "cross";
  }
  return "?";
}

inline PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "empty") return PromptMode::Empty;
  if (s == "individual") return PromptMode::Individual;
  if (s == "shared") return PromptMode::Shared;
  if (s == "cross") return PromptMode::Cross;
  throw ConfigError("unknown prompt mode '" + s + "' (expected empty|individual|shared|cross)");
}

struct CipmSpec {
  int encoder_hidden = 16;
  int encoder_dim = 32;  // d_e
  int grid = 16;         // g
  int key_dim = 32;      // d_k
  int prompt_dim = 32;   // d_p
  bool identity_mlp = false;  // test mode: skip the MLP (requires key_dim == prompt_dim)
};

inline nlohmann::json to_json(const CipmSpec& s) {
  return {{"encoder_hidden", s.encoder_hidden}, {"encoder_dim", s.encoder_dim}, {"grid", s.grid},
          {"key_dim", s.key_dim}, {"prompt_dim", s.prompt_dim}, {"identity_mlp", s.identity_mlp}};
}

inline CipmSpec cipm_spec_from_json(const nlohmann::json& j) {
  CipmSpec s;
  s.encoder_hidden = j.value("encoder_hidden", s.encoder_hidden);
  s.encoder_dim = j.value("encoder_dim", s.encoder_dim);
  s.grid = j.value("grid", s.grid);
  s.key_dim = j.value("key_dim", s.key_dim);
  s.prompt_dim = j.value("prompt_dim", s.prompt_dim);
  s.identity_mlp = j.value("identity_mlp", s.identity_mlp);
  return s;
}

// ---------------------------------------------------------------- frozen image encoder

template <class T>
void init_image_encoder(ParamSet<T>& params, const CipmSpec& spec, std::uint64_t seed) {
  ad::Initializer<T> init(params, seed);
  init.conv("vis.c1", spec.encoder_hidden, 3, 3, 1.5);
  init.normal("vis.c1.b", {spec.encoder_hidden}, 0.1);
  init.conv("vis.c2", spec.encoder_dim, spec.encoder_hidden, 3, 1.5);
  init.normal("vis.c2.b", {spec.encoder_dim}, 0.1);
}

/// Encoder grid [d_e, g, g] of an image tensor [3, H, W].
template <class T>
Var<T> encode_image(Binder<T>& p, Var<T> image, const CipmSpec& spec) {
  Var<T> h = ad::silu(ad::conv(p, "vis.c1", image, 2, 1));
  h = ad::conv(p, "vis.c2", h, 2, 1);
  return ad::avg_pool_to(h, spec.grid, spec.grid);
}

// ---------------------------------------------------------------- prompt module

template <class T>
void init_cipm(ParamSet<T>& params, const CipmSpec& spec, std::uint64_t seed) {
  ad::Initializer<T> init(params, seed);
  init.linear("cipm.q", spec.key_dim, spec.encoder_dim, 1.0, false);
  init.linear("cipm.k", spec.key_dim, spec.encoder_dim, 1.0, false);
  init.linear("cipm.v", spec.key_dim, spec.encoder_dim, 1.0, false);
  init.linear("cipm.mlp.l1", 2 * spec.prompt_dim, spec.key_dim);
  init.linear("cipm.mlp.l2", spec.prompt_dim, 2 * spec.prompt_dim);
}

namespace detail {

template <class T>
Var<T> tokens(Var<T> grid) {
  return ad::reshape(grid, {grid.dim(0), grid.dim(1) * grid.dim(2)});
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_k)) V with queries from q_src[d_e, N] and keys/values
/// from k_src, v_src [d_e, M]. Returns the attended vectors as [d_k, N].
template <class T>
Var<T> attend(Binder<T>& p, Var<T> q_src, Var<T> k_src, Var<T> v_src) {
  Var<T> q = ad::linear(p, "cipm.q", q_src);
  Var<T> k = ad::linear(p, "cipm.k", k_src);
  Var<T> v = ad::linear(p, "cipm.v", v_src);
  return ad::attention(q, k, v);
}

/// Maps attended vectors [d_k, N] to prompt tokens [N, d_p].
template <class T>
Var<T> to_prompt(Binder<T>& p, Var<T> attended, const CipmSpec& spec) {
  Var<T> h = attended;
  if (!spec.identity_mlp) h = ad::linear(p, "cipm.mlp.l2", ad::gelu(ad::linear(p, "cipm.mlp.l1", h)));
  else if (spec.key_dim != spec.prompt_dim) throw ConfigError("identity MLP needs key_dim == prompt_dim");
  return ad::transpose(h);
}

/// Prompt pair for grids fa, fb [d_e, g, g]: P_A attends A -> B, P_B attends B -> A.
template <class T>
std::pair<Var<T>, Var<T>> cross_prompt(Binder<T>& p, Var<T> fa, Var<T> fb, const CipmSpec& spec) {
  if (fa.shape() != fb.shape()) throw ShapeError("encoder grids differ: " + shape_str(fa.shape()) + " vs " +
                                                 shape_str(fb.shape()));
  Var<T> ta = detail::tokens(fa), tb = detail::tokens(fb);
  return {to_prompt(p, attend(p, ta, tb, tb), spec), to_prompt(p, attend(p, tb, ta, ta), spec)};
}

/// Prompt pair under an ablation mode.
template <class T>
std::pair<Var<T>, Var<T>> make_prompts(Binder<T>& p, Var<T> fa, Var<T> fb, const CipmSpec& spec, PromptMode mode) {
  switch (mode) {
    case PromptMode::Cross: return cross_prompt(p, fa, fb, spec);
    case PromptMode::Individual: {
      Var<T> ta = detail::tokens(fa), tb = detail::tokens(fb);
      return {to_prompt(p, attend(p, ta, ta, ta), spec), to_prompt(p, attend(p, tb, tb, tb), spec)};
    }
    case PromptMode::Shared: {
      Var<T> joint = ad::concat<T>({detail::tokens(fa), detail::tokens(fb)}, 1);
      Var<T> shared = to_prompt(p, attend(p, joint, joint, joint), spec);
      return {shared, shared};
    }
    case PromptMode::Empty: {
      Var<T> zero = p.tape().constant(Tensor<T>({fa.dim(1) * fa.dim(2), spec.prompt_dim}));
      return {zero, zero};
    }
  }
  throw ConfigError("unhandled prompt mode");
}

}  // namespace imd::cipm
