#pragma once

// Dual-branch masked point autoencoder: mini-PointNet patch embedder, learnable
// positional encoding, a transformer stack shared by both branches, per-layer
// Local Enhancement Modules (edge convolution over the K nearest patches),
// branch-specific decoders, and a classification head.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "femae/autodiff.hpp"
#include "femae/errors.hpp"
#include "femae/geometry.hpp"
#include "femae/model_config.hpp"
#include "femae/patchmask.hpp"
#include "femae/tensor.hpp"

namespace femae {

enum class Branch { Global, Local };

inline const char* to_string(Branch b) { return b == Branch::Global ? "global" : "local"; }

/// Which part of the model a parameter belongs to; drives parameter counting and freezing.
enum class ParamGroup { Embedder, PosEncoder, Transformer, Lem, EncoderNorm, DecoderGlobal, DecoderLocal, Classifier };

/// Token matrix with aligned patch centers.
template <typename T>
struct TokenBatch {
  Var<T> tokens;     // count × C
  Tensor<T> centers; // count × 3
  Branch branch = Branch::Global;
};

/// Owns every parameter; names are unique dotted paths.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::unique_ptr<Parameter<T>> param;
    ParamGroup group;
  };

  Parameter<T>* add(std::string name, Tensor<T> value, ParamGroup group) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>(name, std::move(value));
    Parameter<T>* raw = p.get();
    index_.emplace(std::move(name), entries_.size());
    entries_.push_back({std::move(p), group});
    return raw;
  }

  Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second].param.get();
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.param->zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace nn {

/// Weights/bias initializer: truncated normal (±2σ) projections, zero biases, unit gains.
/// The point-wise embedder layers use U(±1/√fan_in) for weights and biases.
template <typename T>
class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> trunc_normal(Shape shape, double sigma = 0.02) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : t.storage()) {
      double z;
      do z = nd(rng_);
      while (std::abs(z) > 2.0);
      v = static_cast<T>(z * sigma);
    }
    return t;
  }

  Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.storage()) v = static_cast<T>(u(rng_));
    return t;
  }

  Tensor<T> normal(Shape shape, double sigma) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> nd(0.0, sigma);
    for (auto& v : t.storage()) v = static_cast<T>(nd(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

enum class InitKind { TruncNormal, FanInUniform };

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // in × out
  Parameter<T>* bias = nullptr;    // out, may be null

  static Linear make(ParamStore<T>& ps, Init<T>& init, const std::string& name, std::size_t in, std::size_t out,
                     ParamGroup group, bool with_bias = true, InitKind kind = InitKind::TruncNormal) {
    Linear l;
    const bool fan = kind == InitKind::FanInUniform;
    l.weight = ps.add(name + ".weight", fan ? init.fan_in_uniform({in, out}, in) : init.trunc_normal({in, out}), group);
    if (with_bias) l.bias = ps.add(name + ".bias", fan ? init.fan_in_uniform({out}, in) : Tensor<T>({out}), group);
    return l;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    Var<T> y = matmul(x, g.param(*weight));
    if (bias) y = add(y, broadcast(g.param(*bias), y.shape()));
    return y;
  }
};

template <typename T>
struct Norm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static Norm make(ParamStore<T>& ps, const std::string& name, std::size_t width, ParamGroup group) {
    return {ps.add(name + ".gain", Tensor<T>({width}, T(1)), group), ps.add(name + ".bias", Tensor<T>({width}), group)};
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) const { return layer_norm(x, g.param(*gain), g.param(*bias)); }
};

/// Two-stage mini-PointNet over center-relative patch groups.
template <typename T>
struct PatchEmbedder {
  Linear<T> fc1, fc2, fc3, fc4;
  Norm<T> norm1, norm3;

  static PatchEmbedder make(ParamStore<T>& ps, Init<T>& init, const ModelConfig& c) {
    const auto g = ParamGroup::Embedder;
    const auto k = InitKind::FanInUniform;
    PatchEmbedder e;
    e.fc1 = Linear<T>::make(ps, init, "embed.fc1", 3, c.embed_hidden1, g, true, k);
    e.norm1 = Norm<T>::make(ps, "embed.norm1", c.embed_hidden1, g);
    e.fc2 = Linear<T>::make(ps, init, "embed.fc2", c.embed_hidden1, c.embed_hidden2, g, true, k);
    e.fc3 = Linear<T>::make(ps, init, "embed.fc3", 2 * c.embed_hidden2, c.embed_hidden3, g, true, k);
    e.norm3 = Norm<T>::make(ps, "embed.norm3", c.embed_hidden3, g);
    e.fc4 = Linear<T>::make(ps, init, "embed.fc4", c.embed_hidden3, c.embed_dim, g, true, k);
    return e;
  }

  /// groups: q×m×3 → q×C
  Var<T> operator()(Graph<T>& g, Var<T> groups) const {
    const std::size_t q = groups.dim(0), m = groups.dim(1);
    Var<T> x = reshape(groups, {q * m, 3});
    x = fc2(g, gelu(norm1(g, fc1(g, x))));
    const std::size_t h2 = x.dim(1);
    Var<T> pooled = max_over_axis(reshape(x, {q, m, h2}), 1);
    std::vector<std::size_t> rep(q * m);
    for (std::size_t i = 0; i < q * m; ++i) rep[i] = i / m;
    x = concat<T>({gather_rows(pooled, std::move(rep)), x}, 1);
    x = fc4(g, gelu(norm3(g, fc3(g, x))));
    return max_over_axis(reshape(x, {q, m, x.dim(1)}), 1);
  }
};

/// 3 → hidden → C learnable positional encoding.
template <typename T>
struct PosEncoder {
  Linear<T> fc1, fc2;

  static PosEncoder make(ParamStore<T>& ps, Init<T>& init, const std::string& name, const ModelConfig& c,
                         ParamGroup group) {
    return {Linear<T>::make(ps, init, name + ".fc1", 3, c.pos_hidden, group),
            Linear<T>::make(ps, init, name + ".fc2", c.pos_hidden, c.embed_dim, group)};
  }

  Var<T> operator()(Graph<T>& g, Var<T> centers) const { return fc2(g, gelu(fc1(g, centers))); }
};

/// Pre-norm block: x + Attn(LN(x)), then + FFN(LN(·)).
template <typename T>
struct TransformerBlock {
  Norm<T> norm1, norm2;
  Linear<T> qkv, proj, fc1, fc2;
  std::size_t heads = 1;

  static TransformerBlock make(ParamStore<T>& ps, Init<T>& init, const std::string& name, const ModelConfig& c,
                               ParamGroup group) {
    const std::size_t C = c.embed_dim;
    TransformerBlock b;
    b.heads = c.heads;
    b.norm1 = Norm<T>::make(ps, name + ".norm1", C, group);
    b.qkv = Linear<T>::make(ps, init, name + ".attn.qkv", C, 3 * C, group, /*with_bias=*/false);
    b.proj = Linear<T>::make(ps, init, name + ".attn.proj", C, C, group);
    b.norm2 = Norm<T>::make(ps, name + ".norm2", C, group);
    b.fc1 = Linear<T>::make(ps, init, name + ".mlp.fc1", C, c.mlp_ratio * C, group);
    b.fc2 = Linear<T>::make(ps, init, name + ".mlp.fc2", c.mlp_ratio * C, C, group);
    return b;
  }

  /// Multi-head self-attention; per-head probability matrices are appended to `attn` when given.
  Var<T> attention(Graph<T>& g, Var<T> x, std::vector<Var<T>>* attn = nullptr) const {
    const std::size_t C = x.dim(1);
    const std::size_t d = C / heads;
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    Var<T> packed = qkv(g, x);
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Var<T> qh = slice(packed, 1, h * d, d);
      Var<T> kh = slice(packed, 1, C + h * d, d);
      Var<T> vh = slice(packed, 1, 2 * C + h * d, d);
      Var<T> p = softmax_lastaxis(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
      if (attn) attn->push_back(p);
      outs.push_back(matmul(p, vh));
    }
    return proj(g, concat<T>(std::span<const Var<T>>(outs), 1));
  }

  Var<T> operator()(Graph<T>& g, Var<T> x, std::vector<Var<T>>* attn = nullptr) const {
    x = add(x, attention(g, norm1(g, x), attn));
    return add(x, fc2(g, gelu(fc1(g, norm2(g, x)))));
  }
};

/// Edge convolution over the K nearest patches: [center ; neighbor − center] → hidden → max over K → C,
/// added back onto the input tokens.
template <typename T>
struct LocalEnhancement {
  Linear<T> fc1, fc2;
  Norm<T> norm1;

  static LocalEnhancement make(ParamStore<T>& ps, Init<T>& init, const std::string& name, const ModelConfig& c) {
    const auto g = ParamGroup::Lem;
    const std::size_t h = c.lem_hidden();
    LocalEnhancement l;
    l.fc1 = Linear<T>::make(ps, init, name + ".fc1", 2 * c.embed_dim, h, g);
    l.norm1 = Norm<T>::make(ps, name + ".norm1", h, g);
    l.fc2 = Linear<T>::make(ps, init, name + ".fc2", h, c.embed_dim, g);
    return l;
  }

  /// Edge tensor G (q·K × 2C) for tokens q×C and neighbour table q×K.
  static Var<T> edge_tensor(Var<T> tokens, const IndexMatrix& neighbors) {
    const std::size_t q = neighbors.rows, K = neighbors.cols;
    std::vector<std::size_t> self(q * K);
    for (std::size_t i = 0; i < q * K; ++i) self[i] = i / K;
    Var<T> center = gather_rows(tokens, std::move(self));
    Var<T> nbr = gather_rows(tokens, neighbors.data);
    return concat<T>({center, sub(nbr, center)}, 1);
  }

  Var<T> operator()(Graph<T>& g, Var<T> tokens, const IndexMatrix& neighbors) const {
    const std::size_t q = neighbors.rows, K = neighbors.cols;
    Var<T> h = gelu(norm1(g, fc1(g, edge_tensor(tokens, neighbors))));
    h = max_over_axis(reshape(h, {q, K, h.dim(1)}), 1);
    return add(tokens, fc2(g, h));
  }
};

/// Neighbour table for LEM: K nearest patch centers (self included).
template <typename T>
IndexMatrix lem_neighbors(const Tensor<T>& centers, std::size_t k) {
  if (k > centers.dim(0)) {
    throw UsageError("LEM K=" + std::to_string(k) + " exceeds token count " + std::to_string(centers.dim(0)));
  }
  return knn(centers, centers, k);
}

template <typename T>
struct Decoder {
  Parameter<T>* mask_token = nullptr;  // 1 × C
  PosEncoder<T> pos;
  std::vector<TransformerBlock<T>> blocks;
  Norm<T> norm;
  Linear<T> head;  // C → 3m

  static Decoder make(ParamStore<T>& ps, Init<T>& init, const std::string& name, const ModelConfig& c,
                      ParamGroup group) {
    Decoder d;
    d.mask_token = ps.add(name + ".mask_token", init.normal({1, c.embed_dim}, 0.02), group);
    d.pos = PosEncoder<T>::make(ps, init, name + ".pos", c, group);
    for (std::size_t i = 0; i < c.decoder_depth; ++i) {
      d.blocks.push_back(TransformerBlock<T>::make(ps, init, name + ".blocks." + std::to_string(i), c, group));
    }
    d.norm = Norm<T>::make(ps, name + ".norm", c.embed_dim, group);
    d.head = Linear<T>::make(ps, init, name + ".head", c.embed_dim, 3 * c.group_size, group);
    return d;
  }

  /// [visible ; mask tokens] + positions → blocks → last `masked` rows → q_m × m × 3.
  Var<T> operator()(Graph<T>& g, Var<T> visible, const Tensor<T>& visible_centers,
                    const Tensor<T>& masked_centers) const {
    const std::size_t v = visible.dim(0), k = masked_centers.dim(0);
    if (visible_centers.dim(0) != v) throw UsageError("decoder: visible tokens and centers disagree");
    Var<T> masks = gather_rows(g.param(*mask_token), std::vector<std::size_t>(k, 0));
    Var<T> x = concat<T>({visible, masks}, 0);
    Var<T> pe = pos(g, concat<T>({g.constant(visible_centers), g.constant(masked_centers)}, 0));
    x = add(x, pe);
    for (const auto& b : blocks) x = b(g, x);
    x = slice(norm(g, x), 0, v, k);
    Var<T> r = head(g, x);
    return reshape(r, {k, r.dim(1) / 3, 3});
  }
};

template <typename T>
struct ClassifierHead {
  Linear<T> fc1, fc2, fc3;
  Norm<T> norm1, norm2;

  static ClassifierHead make(ParamStore<T>& ps, Init<T>& init, const ModelConfig& c) {
    const auto g = ParamGroup::Classifier;
    ClassifierHead h;
    h.fc1 = Linear<T>::make(ps, init, "cls_head.fc1", 2 * c.embed_dim, c.head_hidden, g);
    h.norm1 = Norm<T>::make(ps, "cls_head.norm1", c.head_hidden, g);
    h.fc2 = Linear<T>::make(ps, init, "cls_head.fc2", c.head_hidden, c.head_hidden, g);
    h.norm2 = Norm<T>::make(ps, "cls_head.norm2", c.head_hidden, g);
    h.fc3 = Linear<T>::make(ps, init, "cls_head.fc3", c.head_hidden, c.num_classes, g);
    return h;
  }

  /// tokens q×C → [mean ; max] (1×2C) → logits 1×classes
  Var<T> operator()(Graph<T>& g, Var<T> tokens) const {
    const std::size_t C = tokens.dim(1);
    Var<T> feat = concat<T>({reshape(mean_over_axis(tokens, 0), {1, C}), reshape(max_over_axis(tokens, 0), {1, C})}, 1);
    Var<T> h = gelu(norm1(g, fc1(g, feat)));
    h = gelu(norm2(g, fc2(g, h)));
    return fc3(g, h);
  }
};

}  // namespace nn

/// Mean softmax cross-entropy over rows of `logits` (rows × classes).
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
  const auto& lv = logits.value();
  const std::size_t rows = lv.dim(0), classes = lv.dim(1);
  if (labels.size() != rows) throw UsageError("softmax_cross_entropy: label count mismatch");
  Tensor<T> probs(lv.shape());
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= classes) {
      throw UsageError("label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(classes) + ")");
    }
    const T* x = &lv[r * classes];
    T mx = x[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, x[j]);
    T s = T(0);
    for (std::size_t j = 0; j < classes; ++j) s += (probs[r * classes + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < classes; ++j) probs[r * classes + j] /= s;
    loss += -(x[labels[r]] - mx - std::log(s));
  }
  loss /= T(rows);
  return logits.graph->record(
      "softmax_cross_entropy", Tensor<T>({1}, std::vector<T>{loss}), {logits.id},
      [probs = std::move(probs), labels, rows, classes](Graph<T>& g, std::size_t self) {
        const auto& nd = g.node(self);
        auto gl = g.grad_buffer(nd.inputs[0]);
        const T w = nd.grad[0] / T(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < classes; ++j)
            gl[r * classes + j] += w * (probs[r * classes + j] - (j == labels[r] ? T(1) : T(0)));
      });
}

/// Per-branch reconstructions and the Eq.-4 style total.
template <typename T>
struct PretrainOutput {
  Var<T> loss;                    // sum of the active branch losses
  std::optional<Var<T>> loss_global;
  std::optional<Var<T>> loss_local;
  std::optional<Var<T>> recon_global;  // masked × m × 3
  std::optional<Var<T>> recon_local;
};

template <typename T>
class PointFemae {
 public:
  explicit PointFemae(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const VariantTraits vt = config_.variant_traits();
    nn::Init<T> init(config_.init_seed);
    embedder_ = nn::PatchEmbedder<T>::make(params_, init, config_);
    pos_ = nn::PosEncoder<T>::make(params_, init, "encoder.pos", config_, ParamGroup::PosEncoder);
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
      blocks_.push_back(nn::TransformerBlock<T>::make(params_, init, "encoder.blocks." + std::to_string(i), config_,
                                                      ParamGroup::Transformer));
    }
    if (vt.has_lem()) {
      for (std::size_t i = 0; i < config_.n_layers; ++i) {
        lems_.push_back(nn::LocalEnhancement<T>::make(params_, init, "encoder.lem." + std::to_string(i), config_));
      }
    }
    enc_norm_ = nn::Norm<T>::make(params_, "encoder.norm", config_.embed_dim, ParamGroup::EncoderNorm);
    if (vt.global_branch) {
      dec_global_ = nn::Decoder<T>::make(params_, init, "decoder_g", config_, ParamGroup::DecoderGlobal);
    }
    if (vt.local_branch) {
      dec_local_ = nn::Decoder<T>::make(params_, init, "decoder_l", config_, ParamGroup::DecoderLocal);
    }
    head_ = nn::ClassifierHead<T>::make(params_, init, config_);
  }

  PointFemae(const PointFemae&) = delete;
  PointFemae& operator=(const PointFemae&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  const nn::PatchEmbedder<T>& embedder() const { return embedder_; }
  const nn::PosEncoder<T>& pos_encoder() const { return pos_; }
  const std::vector<nn::TransformerBlock<T>>& blocks() const { return blocks_; }
  const std::vector<nn::LocalEnhancement<T>>& lems() const { return lems_; }
  const nn::Decoder<T>& decoder(Branch b) const {
    const auto& d = b == Branch::Global ? dec_global_ : dec_local_;
    if (!d) throw ConfigError(std::string("variant ") + to_char(config_.variant) + " has no " + to_string(b) + " decoder");
    return *d;
  }
  bool has_decoder(Branch b) const { return (b == Branch::Global ? dec_global_ : dec_local_).has_value(); }
  const nn::ClassifierHead<T>& classifier() const { return head_; }

  /// Transformer blocks reached through a branch. Both branches resolve to the same storage.
  std::vector<const nn::TransformerBlock<T>*> branch_blocks(Branch) const {
    std::vector<const nn::TransformerBlock<T>*> out;
    for (const auto& b : blocks_) out.push_back(&b);
    return out;
  }

  bool branch_uses_lem(Branch b) const {
    const auto vt = config_.variant_traits();
    return b == Branch::Global ? vt.lem_on_global : vt.lem_on_local;
  }

  /// Branch used when a probe asks for `wanted`; single-branch variants fall back to their only branch.
  Branch resolve_branch(Branch wanted) const {
    const auto vt = config_.variant_traits();
    if (wanted == Branch::Global && vt.global_branch) return Branch::Global;
    if (wanted == Branch::Local && vt.local_branch) return Branch::Local;
    return vt.global_branch ? Branch::Global : Branch::Local;
  }

  /// Patch embedding plus positional encoding.
  TokenBatch<T> embed(Graph<T>& g, const PatchSet<T>& patches, Branch branch) const {
    Var<T> tok = embedder_(g, g.constant(patches.groups));
    Var<T> pe = pos_(g, g.constant(patches.centers));
    return {add(tok, pe), patches.centers, branch};
  }

  /// One branch of the encoder: n layers of T_i, optionally with M_i, then the shared final norm.
  Var<T> encode_branch(Graph<T>& g, const TokenBatch<T>& in, bool use_lem) const {
    Var<T> x = in.tokens;
    IndexMatrix nbrs;
    if (use_lem) {
      if (lems_.empty()) throw ConfigError("LEM requested but this variant carries no LEM stack");
      nbrs = nn::lem_neighbors(in.centers, config_.lem_k);
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      if (!use_lem) {
        x = blocks_[i](g, x);
      } else if (config_.layer_order == LayerOrder::TransformerThenLem) {
        x = lems_[i](g, blocks_[i](g, x), nbrs);
      } else {
        x = blocks_[i](g, lems_[i](g, x, nbrs));
      }
    }
    return enc_norm_(g, x);
  }

  /// Both branches through the shared stack; absent branches yield nullopt.
  std::pair<std::optional<Var<T>>, std::optional<Var<T>>> encoder_forward(
      Graph<T>& g, const std::optional<TokenBatch<T>>& global_in, const std::optional<TokenBatch<T>>& local_in) const {
    const auto vt = config_.variant_traits();
    if (global_in && !vt.global_branch) throw ConfigError(std::string("variant ") + to_char(config_.variant) + " has no global branch");
    if (local_in && !vt.local_branch) throw ConfigError(std::string("variant ") + to_char(config_.variant) + " has no local branch");
    std::optional<Var<T>> eg, el;
    if (global_in) eg = encode_branch(g, *global_in, vt.lem_on_global);
    if (local_in) el = encode_branch(g, *local_in, vt.lem_on_local);
    return {eg, el};
  }

  /// Reconstruct the masked patches of one branch: visible → encoder → decoder → masked × m × 3.
  Var<T> reconstruct(Graph<T>& g, const PatchSet<T>& visible, const PatchSet<T>& masked, Branch branch) const {
    TokenBatch<T> in = embed(g, visible, branch);
    Var<T> enc = encode_branch(g, in, branch_uses_lem(branch));
    return decoder(branch)(g, enc, visible.centers, masked.centers);
  }

  /// Mask per branch (global random / local block), reconstruct, Chamfer loss per branch, summed.
  PretrainOutput<T> pretrain_forward(Graph<T>& g, const PatchSet<T>& patches, Rng& rng) const {
    const auto vt = config_.variant_traits();
    PretrainOutput<T> out;
    std::vector<Var<T>> terms;
    if (vt.global_branch) {
      const MaskPlan plan = global_random_mask(patches.count(), config_.mask_ratio, rng);
      auto [vis, hid] = split(patches, plan);
      Var<T> r = reconstruct(g, vis, hid, Branch::Global);
      out.recon_global = r;
      out.loss_global = patch_chamfer(r, g.constant(hid.groups));
      terms.push_back(*out.loss_global);
    }
    if (vt.local_branch) {
      const MaskPlan plan = local_block_mask(patches.centers, config_.mask_ratio, rng, config_.local_blocks);
      auto [vis, hid] = split(patches, plan);
      Var<T> r = reconstruct(g, vis, hid, Branch::Local);
      out.recon_local = r;
      out.loss_local = patch_chamfer(r, g.constant(hid.groups));
      terms.push_back(*out.loss_local);
    }
    out.loss = terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
    return out;
  }

  /// Fine-tuning path: all patches through the LEM-carrying encoder (when the variant has one).
  Var<T> classify(Graph<T>& g, const PatchSet<T>& patches) const {
    TokenBatch<T> in = embed(g, patches, Branch::Local);
    Var<T> enc = encode_branch(g, in, !lems_.empty());
    return head_(g, enc);
  }

  /// Classification of a (possibly masked) patch set through one branch's encoder path.
  Var<T> classify_branch(Graph<T>& g, const PatchSet<T>& patches, Branch branch) const {
    const Branch b = resolve_branch(branch);
    TokenBatch<T> in = embed(g, patches, b);
    return head_(g, encode_branch(g, in, branch_uses_lem(b)));
  }

  /// Trainable scalars in the fine-tune model or the pre-training model.
  enum class CountMode { Pretrain, Finetune };
  std::size_t count_params(CountMode mode) const {
    std::size_t total = 0;
    for (const auto& e : params_.entries()) {
      const bool shared = e.group == ParamGroup::Embedder || e.group == ParamGroup::PosEncoder ||
                          e.group == ParamGroup::Transformer || e.group == ParamGroup::Lem ||
                          e.group == ParamGroup::EncoderNorm;
      const bool counted = shared || (mode == CountMode::Finetune ? e.group == ParamGroup::Classifier
                                                                   : (e.group == ParamGroup::DecoderGlobal ||
                                                                      e.group == ParamGroup::DecoderLocal));
      if (counted) total += e.param->numel();
    }
    return total;
  }

 private:
  ModelConfig config_;
  ParamStore<T> params_;
  nn::PatchEmbedder<T> embedder_;
  nn::PosEncoder<T> pos_;
  std::vector<nn::TransformerBlock<T>> blocks_;
  std::vector<nn::LocalEnhancement<T>> lems_;
  nn::Norm<T> enc_norm_;
  std::optional<nn::Decoder<T>> dec_global_;
  std::optional<nn::Decoder<T>> dec_local_;
  nn::ClassifierHead<T> head_;
};

}  // namespace femae
