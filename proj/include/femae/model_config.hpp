#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "femae/errors.hpp"

namespace femae {

/// Architecture configurations A–H: which branches exist and where LEM stacks sit.
enum class Variant { A, B, C, D, E, F, G, H };

struct VariantTraits {
  bool global_branch;
  bool local_branch;
  bool lem_on_global;
  bool lem_on_local;

  bool has_lem() const { return lem_on_global || lem_on_local; }
  bool dual() const { return global_branch && local_branch; }
};

inline VariantTraits traits(Variant v) {
  switch (v) {
    case Variant::A: return {true, false, false, false};
    case Variant::B: return {false, true, false, false};
    case Variant::C: return {true, false, true, false};
    case Variant::D: return {false, true, false, true};
    case Variant::E: return {true, true, false, false};
    case Variant::F: return {true, true, true, false};
    case Variant::G: return {true, true, false, true};
    case Variant::H: return {true, true, true, true};
  }
  throw ConfigError("unknown variant");
}

inline char to_char(Variant v) { return static_cast<char>('A' + static_cast<int>(v)); }

inline Variant parse_variant(const std::string& s) {
  if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'H') return static_cast<Variant>(s[0] - 'A');
  if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'h') return static_cast<Variant>(s[0] - 'a');
  throw ConfigError("unknown variant '" + s + "' (expected one of A-H)");
}

/// Order of the two sub-layers on a LEM-carrying branch.
enum class LayerOrder { TransformerThenLem, LemThenTransformer };

inline const char* to_string(LayerOrder o) {
  return o == LayerOrder::TransformerThenLem ? "transformer_then_lem" : "lem_then_transformer";
}

inline LayerOrder parse_layer_order(const std::string& s) {
  if (s == "transformer_then_lem") return LayerOrder::TransformerThenLem;
  if (s == "lem_then_transformer") return LayerOrder::LemThenTransformer;
  throw ConfigError("unknown layer_order '" + s + "'");
}

struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t embed_dim = 384;
  std::size_t heads = 6;
  std::size_t lem_k = 20;
  double lem_scale = 1.0;
  std::size_t decoder_depth = 4;
  double mask_ratio = 0.6;
  std::size_t patches = 64;
  std::size_t group_size = 32;
  std::size_t points = 1024;
  Variant variant = Variant::G;
  LayerOrder layer_order = LayerOrder::TransformerThenLem;
  std::size_t local_blocks = 1;

  // mini-PointNet widths: 3 → h1 → h2, [global ; local] 2·h2 → h3 → C
  std::size_t embed_hidden1 = 128;
  std::size_t embed_hidden2 = 256;
  std::size_t embed_hidden3 = 512;
  std::size_t pos_hidden = 128;
  std::size_t mlp_ratio = 4;
  std::size_t head_hidden = 256;
  std::size_t num_classes = 15;
  std::uint64_t init_seed = 0;

  /// Full-size encoder/decoder used to reproduce published parameter counts.
  static ModelConfig base() { return ModelConfig{}; }

  /// Desk-scale preset for CPU training.
  static ModelConfig toy() {
    ModelConfig c;
    c.n_layers = 3;
    c.embed_dim = 96;
    c.heads = 3;
    c.decoder_depth = 2;
    c.lem_k = 8;
    c.patches = 32;
    c.group_size = 16;
    c.points = 256;
    c.embed_hidden1 = 32;
    c.embed_hidden2 = 64;
    c.embed_hidden3 = 128;
    c.pos_hidden = 64;
    c.head_hidden = 64;
    c.num_classes = 6;
    return c;
  }

  std::size_t masked_patches() const {
    return static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(patches)));
  }
  std::size_t visible_patches() const { return patches - masked_patches(); }
  std::size_t lem_hidden() const {
    const auto h = static_cast<std::size_t>(std::llround(lem_scale * static_cast<double>(embed_dim)));
    return h == 0 ? 1 : h;
  }
  VariantTraits variant_traits() const { return traits(variant); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (n_layers == 0 || embed_dim == 0 || heads == 0) fail("n_layers, embed_dim and heads must be positive");
    if (embed_dim % heads != 0) {
      fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0, 1)");
    if (patches == 0 || group_size == 0) fail("patches and group_size must be positive");
    if (masked_patches() == 0 || masked_patches() >= patches) fail("mask_ratio masks no patch or every patch");
    if (decoder_depth == 0) fail("decoder_depth must be positive");
    if (!(lem_scale > 0.0 && lem_scale <= 1.0)) fail("lem_scale must lie in (0, 1]");
    if (variant_traits().has_lem()) {
      if (lem_k == 0) fail("lem_k must be positive");
      if (lem_k > visible_patches()) {
        fail("lem_k " + std::to_string(lem_k) + " exceeds the " + std::to_string(visible_patches()) +
             " visible patches during pre-training");
      }
    }
    if (num_classes < 2) fail("num_classes must be at least 2");
    if (local_blocks == 0 || local_blocks > masked_patches()) fail("local_blocks must lie in [1, masked patches]");
  }
};

}  // namespace femae
