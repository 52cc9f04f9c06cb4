#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffprune/diffusion.hpp"
#include "diffprune/ops.hpp"
#include "diffprune/rng.hpp"
#include "diffprune/tensor.hpp"

namespace diffprune {

struct ModelConfig {
  std::size_t input_channels = 1;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t layers_per_stage = 2;
  std::vector<std::size_t> attention_stages{2};
  std::size_t heads = 4;
  std::size_t signal_length = 32;
  std::size_t time_embed_dim = 64;
  std::size_t num_classes = 0;

  std::size_t stages() const { return stage_channels.size(); }
  std::size_t stage_length(std::size_t s) const { return signal_length >> s; }
  bool has_attention(std::size_t s) const {
    return std::find(attention_stages.begin(), attention_stages.end(), s) != attention_stages.end();
  }

  void validate() const {
    require(input_channels >= 1, "model: input_channels must be positive");
    require(!stage_channels.empty(), "model: at least one stage required");
    for (auto c : stage_channels) require(c >= 1, "model: stage channels must be positive");
    require(layers_per_stage >= 1, "model: layers_per_stage must be positive");
    require(signal_length >= 1 && signal_length % (std::size_t{1} << (stages() - 1)) == 0,
            "model: signal_length must be divisible by 2^(stages-1)");
    require(time_embed_dim >= 2 && time_embed_dim % 2 == 0, "model: time_embed_dim must be even");
    for (auto s : attention_stages) {
      require(s < stages(), "model: attention stage index out of range");
      require(heads >= 1 && stage_channels[s] % heads == 0, "model: heads must divide the attention stage channels");
    }
  }
};

struct ResBlock {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t hidden = 0;  // width units: output channels of the first convolution
  Parameter norm1_scale, norm1_shift, conv1_weight, conv1_bias, temb_weight, temb_bias;
  Parameter norm2_scale, norm2_shift, conv2_weight, conv2_bias;
  bool has_shortcut = false;
  Parameter shortcut_weight, shortcut_bias;
};

struct AttentionBlock {
  std::size_t channels = 0;
  std::size_t heads = 0;  // width units
  std::size_t head_dim = 0;
  Parameter norm_scale, norm_shift;
  Parameter query_weight, query_bias, key_weight, key_bias, value_weight, value_bias;
  Parameter out_weight, out_bias;
};

struct Layer {
  bool present = true;
  std::size_t stage = 0;
  ResBlock res;
  bool has_attention = false;
  AttentionBlock attn;
};

enum class Section { encoder, middle, decoder };

// A maskable block: a ResBlock (units = hidden channels) or an attention
// block (units = heads).
struct WidthSlot {
  Section section;
  std::size_t layer;
  bool attention;
  int depth_unit;  // depth unit containing this block, -1 if not droppable
};

// A droppable layer: the last layer of one encoder or decoder stage.
struct DepthSlot {
  Section section;
  std::size_t layer;
  std::size_t stage;
};

// Binary architecture: which depth units survive and which physical width
// units survive in each slot.
struct Architecture {
  std::vector<bool> depth_kept;
  std::vector<std::vector<std::size_t>> width_kept;
};

// Relaxed architecture vectors. width[slot] holds one value per current unit
// of that slot (empty for slots of absent layers); depth holds one value per
// depth unit.
struct SoftMasks {
  std::vector<Tensor> width;
  Tensor depth;
};

class ExpertModel {
 public:
  ModelConfig config;
  Parameter time_fc1_weight, time_fc1_bias, time_fc2_weight, time_fc2_bias;
  Parameter class_embedding;
  Parameter input_weight, input_bias;
  std::vector<Parameter> down_weight, down_bias;  // transition s -> s+1
  std::vector<Parameter> up_weight, up_bias;      // transition s+1 -> s
  Parameter out_norm_scale, out_norm_shift, out_weight, out_bias;
  std::vector<Layer> encoder;  // stage-major
  std::vector<Layer> middle;
  std::vector<Layer> decoder;  // execution order: deepest stage first
  // Per width slot: physical unit indices, most important first.
  std::vector<std::vector<std::size_t>> importance;

  const std::vector<Layer>& section(Section s) const {
    return s == Section::encoder ? encoder : (s == Section::middle ? middle : decoder);
  }
  std::vector<Layer>& section(Section s) {
    return s == Section::encoder ? encoder : (s == Section::middle ? middle : decoder);
  }

  std::vector<WidthSlot> width_slots() const {
    std::vector<WidthSlot> slots;
    const auto depth = depth_slots();
    auto depth_of = [&](Section sec, std::size_t idx) {
      for (std::size_t j = 0; j < depth.size(); ++j) {
        if (depth[j].section == sec && depth[j].layer == idx) return static_cast<int>(j);
      }
      return -1;
    };
    for (Section sec : {Section::encoder, Section::middle, Section::decoder}) {
      const auto& layers = section(sec);
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const int j = depth_of(sec, i);
        slots.push_back({sec, i, false, j});
        if (layers[i].has_attention) slots.push_back({sec, i, true, j});
      }
    }
    return slots;
  }

  // Canonical order: encoder stages ascending, then decoder stages in
  // execution order (deepest first).
  std::vector<DepthSlot> depth_slots() const {
    std::vector<DepthSlot> slots;
    const std::size_t S = config.stages(), K = config.layers_per_stage;
    for (std::size_t s = 0; s < S; ++s) slots.push_back({Section::encoder, s * K + K - 1, s});
    for (std::size_t d = 0; d < S; ++d) slots.push_back({Section::decoder, d * K + K - 1, S - 1 - d});
    return slots;
  }

  const Layer& layer_of(const WidthSlot& w) const { return section(w.section)[w.layer]; }

  std::size_t width_units(const WidthSlot& w) const {
    const Layer& l = layer_of(w);
    if (!l.present) return 0;
    return w.attention ? l.attn.heads : l.res.hidden;
  }

  std::vector<std::size_t> unit_counts() const {
    std::vector<std::size_t> out;
    for (const auto& w : width_slots()) out.push_back(width_units(w));
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    collect(out);
    return out;
  }
  std::vector<Parameter*> parameters() {
    std::vector<const Parameter*> cp;
    collect(cp);
    std::vector<Parameter*> out;
    for (auto* p : cp) out.push_back(const_cast<Parameter*>(p));
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto* p : parameters()) p->requires_grad = on;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  static void collect_layer(const Layer& l, std::vector<const Parameter*>& out) {
    if (!l.present) return;
    const auto& r = l.res;
    for (const Parameter* p : {&r.norm1_scale, &r.norm1_shift, &r.conv1_weight, &r.conv1_bias, &r.temb_weight,
                               &r.temb_bias, &r.norm2_scale, &r.norm2_shift, &r.conv2_weight, &r.conv2_bias}) {
      out.push_back(p);
    }
    if (r.has_shortcut) {
      out.push_back(&r.shortcut_weight);
      out.push_back(&r.shortcut_bias);
    }
    if (l.has_attention) {
      const auto& a = l.attn;
      for (const Parameter* p : {&a.norm_scale, &a.norm_shift, &a.query_weight, &a.query_bias, &a.key_weight,
                                 &a.key_bias, &a.value_weight, &a.value_bias, &a.out_weight, &a.out_bias}) {
        out.push_back(p);
      }
    }
  }

 private:
  void collect(std::vector<const Parameter*>& out) const {
    for (const Parameter* p : {&time_fc1_weight, &time_fc1_bias, &time_fc2_weight, &time_fc2_bias}) out.push_back(p);
    if (config.num_classes > 0) out.push_back(&class_embedding);
    out.push_back(&input_weight);
    out.push_back(&input_bias);
    for (const auto& l : encoder) collect_layer(l, out);
    for (std::size_t i = 0; i < down_weight.size(); ++i) {
      out.push_back(&down_weight[i]);
      out.push_back(&down_bias[i]);
    }
    for (const auto& l : middle) collect_layer(l, out);
    for (const auto& l : decoder) collect_layer(l, out);
    for (std::size_t i = 0; i < up_weight.size(); ++i) {
      out.push_back(&up_weight[i]);
      out.push_back(&up_bias[i]);
    }
    for (const Parameter* p : {&out_norm_scale, &out_norm_shift, &out_weight, &out_bias}) out.push_back(p);
  }
};

// ----------------------------------------------------------------- building

namespace detail {

inline Parameter uniform_param(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Parameter{std::move(name), Tensor(std::move(shape), std::move(v)), {}, true};
}

inline Parameter const_param(std::string name, Shape shape, double value) {
  return Parameter{std::move(name), Tensor::full(std::move(shape), value), {}, true};
}

inline ResBlock make_res(const std::string& prefix, std::size_t in, std::size_t out, std::size_t temb, Rng& rng) {
  ResBlock r;
  r.in_channels = in;
  r.out_channels = out;
  r.hidden = out;
  r.norm1_scale = const_param(prefix + ".norm1.scale", {in}, 1.0);
  r.norm1_shift = const_param(prefix + ".norm1.shift", {in}, 0.0);
  r.conv1_weight = uniform_param(prefix + ".conv1.weight", {out, in, 3}, in * 3, rng);
  r.conv1_bias = const_param(prefix + ".conv1.bias", {out}, 0.0);
  r.temb_weight = uniform_param(prefix + ".temb.weight", {out, temb}, temb, rng);
  r.temb_bias = const_param(prefix + ".temb.bias", {out}, 0.0);
  r.norm2_scale = const_param(prefix + ".norm2.scale", {out}, 1.0);
  r.norm2_shift = const_param(prefix + ".norm2.shift", {out}, 0.0);
  r.conv2_weight = uniform_param(prefix + ".conv2.weight", {out, out, 3}, out * 3, rng);
  r.conv2_bias = const_param(prefix + ".conv2.bias", {out}, 0.0);
  if (in != out) {
    r.has_shortcut = true;
    r.shortcut_weight = uniform_param(prefix + ".shortcut.weight", {out, in, 1}, in, rng);
    r.shortcut_bias = const_param(prefix + ".shortcut.bias", {out}, 0.0);
  }
  return r;
}

inline AttentionBlock make_attn(const std::string& prefix, std::size_t channels, std::size_t heads, Rng& rng) {
  AttentionBlock a;
  a.channels = channels;
  a.heads = heads;
  a.head_dim = channels / heads;
  a.norm_scale = const_param(prefix + ".norm.scale", {channels}, 1.0);
  a.norm_shift = const_param(prefix + ".norm.shift", {channels}, 0.0);
  a.query_weight = uniform_param(prefix + ".query.weight", {channels, channels, 1}, channels, rng);
  a.query_bias = const_param(prefix + ".query.bias", {channels}, 0.0);
  a.key_weight = uniform_param(prefix + ".key.weight", {channels, channels, 1}, channels, rng);
  a.key_bias = const_param(prefix + ".key.bias", {channels}, 0.0);
  a.value_weight = uniform_param(prefix + ".value.weight", {channels, channels, 1}, channels, rng);
  a.value_bias = const_param(prefix + ".value.bias", {channels}, 0.0);
  a.out_weight = uniform_param(prefix + ".out.weight", {channels, channels, 1}, channels, rng);
  a.out_bias = const_param(prefix + ".out.bias", {channels}, 0.0);
  return a;
}

}  // namespace detail

// Encoder stages (downsampling between them), a middle block, decoder stages
// (upsampling between them). Every decoder layer concatenates the output of
// the mirrored encoder layer of its stage.
inline ExpertModel build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ExpertModel m;
  m.config = config;
  const std::size_t S = config.stages(), K = config.layers_per_stage, E = config.time_embed_dim;
  const auto& ch = config.stage_channels;
  using detail::const_param;
  using detail::uniform_param;
  m.time_fc1_weight = uniform_param("time.fc1.weight", {E, E}, E, rng);
  m.time_fc1_bias = const_param("time.fc1.bias", {E}, 0.0);
  m.time_fc2_weight = uniform_param("time.fc2.weight", {E, E}, E, rng);
  m.time_fc2_bias = const_param("time.fc2.bias", {E}, 0.0);
  if (config.num_classes > 0) {
    std::vector<double> v(config.num_classes * E);
    for (auto& x : v) x = rng.normal();
    m.class_embedding = Parameter{"class.embedding", Tensor({config.num_classes, E}, std::move(v)), {}, true};
  }
  m.input_weight = uniform_param("input.weight", {ch[0], config.input_channels, 3}, config.input_channels * 3, rng);
  m.input_bias = const_param("input.bias", {ch[0]}, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t k = 0; k < K; ++k) {
      Layer l;
      l.stage = s;
      const std::string prefix = "enc." + std::to_string(s * K + k);
      l.res = detail::make_res(prefix + ".res", ch[s], ch[s], E, rng);
      if (config.has_attention(s)) {
        l.has_attention = true;
        l.attn = detail::make_attn(prefix + ".attn", ch[s], config.heads, rng);
      }
      m.encoder.push_back(std::move(l));
    }
    if (s + 1 < S) {
      m.down_weight.push_back(uniform_param("down." + std::to_string(s) + ".weight", {ch[s + 1], ch[s], 3}, ch[s] * 3, rng));
      m.down_bias.push_back(const_param("down." + std::to_string(s) + ".bias", {ch[s + 1]}, 0.0));
    }
  }
  {
    Layer a;
    a.stage = S - 1;
    a.res = detail::make_res("mid.0.res", ch[S - 1], ch[S - 1], E, rng);
    if (config.has_attention(S - 1)) {
      a.has_attention = true;
      a.attn = detail::make_attn("mid.0.attn", ch[S - 1], config.heads, rng);
    }
    m.middle.push_back(std::move(a));
    Layer b;
    b.stage = S - 1;
    b.res = detail::make_res("mid.1.res", ch[S - 1], ch[S - 1], E, rng);
    m.middle.push_back(std::move(b));
  }
  for (std::size_t d = 0; d < S; ++d) {
    const std::size_t s = S - 1 - d;
    for (std::size_t k = 0; k < K; ++k) {
      Layer l;
      l.stage = s;
      const std::string prefix = "dec." + std::to_string(d * K + k);
      l.res = detail::make_res(prefix + ".res", 2 * ch[s], ch[s], E, rng);
      if (config.has_attention(s)) {
        l.has_attention = true;
        l.attn = detail::make_attn(prefix + ".attn", ch[s], config.heads, rng);
      }
      m.decoder.push_back(std::move(l));
    }
  }
  m.up_weight.resize(S - 1);
  m.up_bias.resize(S - 1);
  for (std::size_t s = 0; s + 1 < S; ++s) {
    m.up_weight[s] = uniform_param("up." + std::to_string(s) + ".weight", {ch[s], ch[s + 1], 3}, ch[s + 1] * 3, rng);
    m.up_bias[s] = const_param("up." + std::to_string(s) + ".bias", {ch[s]}, 0.0);
  }
  m.out_norm_scale = const_param("out.norm.scale", {ch[0]}, 1.0);
  m.out_norm_shift = const_param("out.norm.shift", {ch[0]}, 0.0);
  m.out_weight = uniform_param("out.weight", {config.input_channels, ch[0], 3}, ch[0] * 3, rng);
  m.out_bias = const_param("out.bias", {config.input_channels}, 0.0);
  for (const auto& w : m.width_slots()) {
    std::vector<std::size_t> order(m.width_units(w));
    std::iota(order.begin(), order.end(), std::size_t{0});
    m.importance.push_back(std::move(order));
  }
  return m;
}

// ------------------------------------------------------------------ forward

namespace detail {

inline bool constant_equal(const Tensor& t, double v) {
  Tape* tape = active_tape();
  if (tape != nullptr && tape->tracks(t)) return false;
  for (double x : t.values()) {
    if (x != v) return false;
  }
  return true;
}

inline Tensor sinusoidal_features(std::span<const int> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(t.size() * dim);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      v[b * dim + k] = std::sin(t[b] * freq);
      v[b * dim + half + k] = std::cos(t[b] * freq);
    }
  }
  return Tensor({t.size(), dim}, std::move(v));
}

inline Tensor res_forward(const ResBlock& r, const Tensor& x, const Tensor& act_temb, const Tensor* mask) {
  Tensor h = ops::silu(ops::channel_norm(x, r.norm1_scale.use(), r.norm1_shift.use()));
  h = ops::conv1d(h, r.conv1_weight.use(), r.conv1_bias.use(), 1, 1);
  // The time projection follows norm2: a per-channel norm would cancel it.
  h = ops::channel_norm(h, r.norm2_scale.use(), r.norm2_shift.use());
  h = ops::silu(ops::add_channels(h, ops::linear(act_temb, r.temb_weight.use(), r.temb_bias.use())));
  if (mask != nullptr && !constant_equal(*mask, 1.0)) h = ops::channel_mul(h, *mask);
  h = ops::conv1d(h, r.conv2_weight.use(), r.conv2_bias.use(), 1, 1);
  const Tensor shortcut =
      r.has_shortcut ? ops::conv1d(x, r.shortcut_weight.use(), r.shortcut_bias.use(), 1, 0) : x;
  return ops::add(h, shortcut);
}

inline Tensor split_heads(const Tensor& x, std::size_t heads, std::size_t head_dim) {
  const std::size_t B = x.dim(0), L = x.dim(2);
  Tensor y = ops::reshape(x, {B, heads, head_dim, L});
  y = ops::permute(y, {0, 1, 3, 2});
  return ops::reshape(y, {B * heads, L, head_dim});
}

inline Tensor attn_forward(const AttentionBlock& a, const Tensor& x, const Tensor* mask) {
  const std::size_t B = x.dim(0), L = x.dim(2), H = a.heads, d = a.head_dim;
  const Tensor h = ops::channel_norm(x, a.norm_scale.use(), a.norm_shift.use());
  const Tensor q = split_heads(ops::conv1d(h, a.query_weight.use(), a.query_bias.use(), 1, 0), H, d);
  const Tensor k = split_heads(ops::conv1d(h, a.key_weight.use(), a.key_bias.use(), 1, 0), H, d);
  const Tensor v = split_heads(ops::conv1d(h, a.value_weight.use(), a.value_bias.use(), 1, 0), H, d);
  const Tensor att = ops::softmax(ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d))));
  Tensor o = ops::bmm(att, v);  // [B*H, L, d]
  o = ops::reshape(o, {B, H, L, d});
  o = ops::permute(o, {0, 1, 3, 2});
  o = ops::reshape(o, {B, H * d, L});
  if (mask != nullptr && !constant_equal(*mask, 1.0)) {
    std::vector<std::size_t> expand(H * d);
    for (std::size_t c = 0; c < H * d; ++c) expand[c] = c / d;
    o = ops::channel_mul(o, ops::gather(*mask, expand));
  }
  return ops::add(x, ops::conv1d(o, a.out_weight.use(), a.out_bias.use(), 1, 0));
}

struct LayerMasks {
  const Tensor* res = nullptr;
  const Tensor* attn = nullptr;
  std::optional<Tensor> depth;  // scalar, only for depth units
};

// Encoder depth unit: u f(F) + (1 - u) F. Decoder depth unit: u f(F || skip) + (1 - u) F.
inline Tensor layer_forward(const Layer& l, const Tensor& h, const Tensor* skip, const Tensor& act_temb,
                            const LayerMasks& masks) {
  if (!l.present) return h;
  if (masks.depth && constant_equal(*masks.depth, 0.0)) return h;
  const Tensor in = skip != nullptr ? ops::concat({h, *skip}, 1) : h;
  Tensor y = res_forward(l.res, in, act_temb, masks.res);
  if (l.has_attention) y = attn_forward(l.attn, y, masks.attn);
  if (!masks.depth || constant_equal(*masks.depth, 1.0)) return y;
  const Tensor& u = *masks.depth;
  return ops::add(ops::mul_scalar(y, u), ops::mul_scalar(h, ops::add_scalar(ops::scale(u, -1.0), 1.0)));
}

}  // namespace detail

inline void check_masks(const ExpertModel& m, const SoftMasks& masks) {
  const auto slots = m.width_slots();
  require(masks.width.size() == slots.size(), "masks: expected " + std::to_string(slots.size()) + " width masks");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    require(masks.width[i].size() == m.width_units(slots[i]),
            "masks: width mask " + std::to_string(i) + " has " + std::to_string(masks.width[i].size()) +
                " values for " + std::to_string(m.width_units(slots[i])) + " units");
  }
  require(masks.depth.size() == m.depth_slots().size(), "masks: depth mask size mismatch");
}

// eps_theta(x, t, cond). x[B, C, L]; t holds one timestep per sample; cond is
// empty or one class label per sample.
inline Tensor forward(const ExpertModel& m, const Tensor& x, std::span<const int> t, std::span<const int> cond,
                      const SoftMasks* masks = nullptr) {
  const auto& cfg = m.config;
  require(x.rank() == 3 && x.dim(1) == cfg.input_channels && x.dim(2) == cfg.signal_length,
          "forward: input shape " + shape_string(x.shape()) + " does not match the model");
  require(t.size() == x.dim(0), "forward: one timestep per sample expected");
  require(cond.empty() || cond.size() == x.dim(0), "forward: one label per sample expected");
  if (masks != nullptr) check_masks(m, *masks);
  const std::size_t S = cfg.stages(), K = cfg.layers_per_stage;

  Tensor temb = ops::linear(detail::sinusoidal_features(t, cfg.time_embed_dim), m.time_fc1_weight.use(),
                            m.time_fc1_bias.use());
  temb = ops::linear(ops::silu(temb), m.time_fc2_weight.use(), m.time_fc2_bias.use());
  if (cfg.num_classes > 0 && !cond.empty()) temb = ops::add(temb, ops::embedding(m.class_embedding.use(), cond));
  const Tensor act_temb = ops::silu(temb);

  // Per-layer mask lookup.
  std::vector<detail::LayerMasks> enc(m.encoder.size()), mid(m.middle.size()), dec(m.decoder.size());
  if (masks != nullptr) {
    const auto slots = m.width_slots();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      auto& target = slots[i].section == Section::encoder ? enc : (slots[i].section == Section::middle ? mid : dec);
      (slots[i].attention ? target[slots[i].layer].attn : target[slots[i].layer].res) = &masks->width[i];
    }
    const auto depth = m.depth_slots();
    for (std::size_t j = 0; j < depth.size(); ++j) {
      auto& target = depth[j].section == Section::encoder ? enc : dec;
      target[depth[j].layer].depth = ops::slice(masks->depth, 0, j, j + 1);
    }
  }

  Tensor h = ops::conv1d(x, m.input_weight.use(), m.input_bias.use(), 1, 1);
  std::vector<Tensor> skips;
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t i = s * K + k;
      h = detail::layer_forward(m.encoder[i], h, nullptr, act_temb, enc[i]);
      skips.push_back(h);
    }
    if (s + 1 < S) h = ops::conv1d(h, m.down_weight[s].use(), m.down_bias[s].use(), 2, 1);
  }
  for (std::size_t i = 0; i < m.middle.size(); ++i) h = detail::layer_forward(m.middle[i], h, nullptr, act_temb, mid[i]);
  for (std::size_t d = 0; d < S; ++d) {
    const std::size_t s = S - 1 - d;
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t i = d * K + k;
      const Tensor skip = skips.back();
      skips.pop_back();
      h = detail::layer_forward(m.decoder[i], h, &skip, act_temb, dec[i]);
    }
    if (s > 0) {
      h = ops::upsample_nearest(h, 2);
      h = ops::conv1d(h, m.up_weight[s - 1].use(), m.up_bias[s - 1].use(), 1, 1);
    }
  }
  h = ops::silu(ops::channel_norm(h, m.out_norm_scale.use(), m.out_norm_shift.use()));
  return ops::conv1d(h, m.out_weight.use(), m.out_bias.use(), 1, 1);
}

inline Denoiser as_denoiser(const ExpertModel& m, const SoftMasks* masks = nullptr) {
  return [&m, masks](const Tensor& x, std::span<const int> t, std::span<const int> cond) {
    return forward(m, x, t, cond, masks);
  };
}

// ------------------------------------------------------- masks/architecture

inline Architecture full_architecture(const ExpertModel& m) {
  Architecture a;
  const auto depth = m.depth_slots();
  for (const auto& d : depth) a.depth_kept.push_back(m.section(d.section)[d.layer].present);
  for (const auto& w : m.width_slots()) {
    std::vector<std::size_t> all(m.width_units(w));
    std::iota(all.begin(), all.end(), std::size_t{0});
    a.width_kept.push_back(std::move(all));
  }
  return a;
}

inline SoftMasks ones_masks(const ExpertModel& m) {
  SoftMasks s;
  for (const auto& w : m.width_slots()) s.width.push_back(Tensor::full({m.width_units(w)}, 1.0));
  s.depth = Tensor::full({m.depth_slots().size()}, 1.0);
  return s;
}

inline SoftMasks binary_masks(const ExpertModel& m, const Architecture& a) {
  const auto slots = m.width_slots();
  require(a.width_kept.size() == slots.size() && a.depth_kept.size() == m.depth_slots().size(),
          "architecture: size does not match the model");
  SoftMasks s;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    std::vector<double> v(m.width_units(slots[i]), 0.0);
    for (auto u : a.width_kept[i]) {
      require(u < v.size(), "architecture: unit index out of range");
      v[u] = 1.0;
    }
    s.width.push_back(Tensor::from(std::move(v)));
  }
  std::vector<double> d;
  for (bool k : a.depth_kept) d.push_back(k ? 1.0 : 0.0);
  s.depth = Tensor::from(std::move(d));
  return s;
}

// Thresholds at 0.5.
inline Architecture architecture_from_masks(const SoftMasks& masks) {
  Architecture a;
  for (const auto& w : masks.width) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] > 0.5) kept.push_back(i);
    }
    a.width_kept.push_back(std::move(kept));
  }
  for (std::size_t j = 0; j < masks.depth.size(); ++j) a.depth_kept.push_back(masks.depth[j] > 0.5);
  return a;
}

// Kept prefix of the importance order of the given length, as sorted indices.
inline std::vector<std::size_t> importance_prefix(const std::vector<std::size_t>& order, std::size_t count) {
  std::vector<std::size_t> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(count, order.size())));
  std::sort(kept.begin(), kept.end());
  return kept;
}

// ------------------------------------------------------------- importance

// Per ResBlock: L1 norm of the second convolution's weights reading each hidden
// channel. Per attention block: L1 norm of each head's slice of the output
// projection. Descending, ties by original index.
inline void importance_sort(ExpertModel& m) {
  const auto slots = m.width_slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& w = slots[i];
    const Layer& l = m.layer_of(w);
    const std::size_t units = m.width_units(w);
    std::vector<double> norms(units, 0.0);
    if (units == 0) {
      m.importance[i].clear();
      continue;
    }
    if (!w.attention) {
      const Tensor& cw = l.res.conv2_weight.value;  // [out, hidden, 3]
      const std::size_t taps = cw.dim(2);
      for (std::size_t o = 0; o < cw.dim(0); ++o) {
        for (std::size_t u = 0; u < units; ++u) {
          for (std::size_t k = 0; k < taps; ++k) norms[u] += std::fabs(cw[(o * units + u) * taps + k]);
        }
      }
    } else {
      const Tensor& ow = l.attn.out_weight.value;  // [C, heads*d, 1]
      const std::size_t inner = ow.dim(1), d = l.attn.head_dim;
      for (std::size_t c = 0; c < ow.dim(0); ++c) {
        for (std::size_t j = 0; j < inner; ++j) norms[j / d] += std::fabs(ow[c * inner + j]);
      }
    }
    std::vector<std::size_t> order(units);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    m.importance[i] = std::move(order);
  }
}

// -------------------------------------------------------------- materialize

namespace detail {

// Keep `index` entries (each expanded to `group` consecutive positions) of
// `axis` of a parameter.
inline void select_axis(Parameter& p, std::size_t axis, const std::vector<std::size_t>& index, std::size_t group = 1) {
  const Tensor& v = p.value;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= v.dim(i);
  for (std::size_t i = axis + 1; i < v.rank(); ++i) inner *= v.dim(i);
  const std::size_t full = v.dim(axis);
  Shape shape = v.shape();
  shape[axis] = index.size() * group;
  std::vector<double> out;
  out.reserve(shape_size(shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (auto u : index) {
      for (std::size_t g = 0; g < group; ++g) {
        const double* src = v.data() + (o * full + u * group + g) * inner;
        out.insert(out.end(), src, src + inner);
      }
    }
  }
  p.value = Tensor(shape, std::move(out));
  p.grad.clear();
}

inline void clear_layer(Layer& l) {
  l.present = false;
  l.res = ResBlock{};
  l.attn = AttentionBlock{};
}

}  // namespace detail

// Physically removes masked units and dropped depth layers. The result's
// plain forward reproduces the parent's forward under binary_masks(a).
inline ExpertModel materialize(const ExpertModel& parent, const Architecture& a) {
  const auto slots = parent.width_slots();
  const auto depth = parent.depth_slots();
  require(a.width_kept.size() == slots.size() && a.depth_kept.size() == depth.size(),
          "materialize: architecture does not match the model");
  ExpertModel m = parent;
  for (std::size_t j = 0; j < depth.size(); ++j) {
    Layer& l = m.section(depth[j].section)[depth[j].layer];
    if (!a.depth_kept[j]) {
      detail::clear_layer(l);
    } else {
      require(l.present, "materialize: depth unit " + std::to_string(j) + " is already removed");
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Layer& l = m.section(slots[i].section)[slots[i].layer];
    if (!l.present) {
      m.importance[i].clear();
      continue;
    }
    std::vector<std::size_t> kept = a.width_kept[i];
    std::sort(kept.begin(), kept.end());
    kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
    const std::size_t units = parent.width_units(slots[i]);
    require(!kept.empty(), "materialize: width slot " + std::to_string(i) + " fully masked while its layer is kept");
    require(kept.back() < units, "materialize: unit index out of range");
    if (kept.size() != units) {
      if (!slots[i].attention) {
        ResBlock& r = l.res;
        detail::select_axis(r.conv1_weight, 0, kept);
        detail::select_axis(r.conv1_bias, 0, kept);
        detail::select_axis(r.temb_weight, 0, kept);
        detail::select_axis(r.temb_bias, 0, kept);
        detail::select_axis(r.norm2_scale, 0, kept);
        detail::select_axis(r.norm2_shift, 0, kept);
        detail::select_axis(r.conv2_weight, 1, kept);
        r.hidden = kept.size();
      } else {
        AttentionBlock& at = l.attn;
        const std::size_t d = at.head_dim;
        for (Parameter* p : {&at.query_weight, &at.query_bias, &at.key_weight, &at.key_bias, &at.value_weight,
                             &at.value_bias}) {
          detail::select_axis(*p, 0, kept, d);
        }
        detail::select_axis(at.out_weight, 1, kept, d);
        at.heads = kept.size();
      }
    }
    // Importance order restricted to survivors, re-indexed.
    std::vector<std::size_t> remap(units, units);
    for (std::size_t k = 0; k < kept.size(); ++k) remap[kept[k]] = k;
    std::vector<std::size_t> order;
    for (auto u : parent.importance[i]) {
      if (remap[u] < units) order.push_back(remap[u]);
    }
    m.importance[i] = std::move(order);
  }
  for (auto* p : m.parameters()) p->grad.clear();
  return m;
}

// ------------------------------------------------------------------- MACs

// Multiply-accumulates of one forward pass for one sample, read off the
// actual parameter shapes. Convolution: out x in x kernel x output length;
// dense: in x out; attention core: 2 x L^2 x head_dim x heads.
inline std::int64_t count_macs(const ExpertModel& m) {
  using I = std::int64_t;
  const auto& cfg = m.config;
  auto conv = [](const Parameter& w, std::size_t out_len) {
    return static_cast<I>(w.value.dim(0) * w.value.dim(1) * w.value.dim(2) * out_len);
  };
  auto dense = [](const Parameter& w) { return static_cast<I>(w.value.dim(0) * w.value.dim(1)); };
  I total = dense(m.time_fc1_weight) + dense(m.time_fc2_weight);
  total += conv(m.input_weight, cfg.signal_length);
  auto layer = [&](const Layer& l) {
    if (!l.present) return I{0};
    const std::size_t L = cfg.stage_length(l.stage);
    I n = conv(l.res.conv1_weight, L) + dense(l.res.temb_weight) + conv(l.res.conv2_weight, L);
    if (l.res.has_shortcut) n += conv(l.res.shortcut_weight, L);
    if (l.has_attention) {
      const auto& a = l.attn;
      n += conv(a.query_weight, L) + conv(a.key_weight, L) + conv(a.value_weight, L) + conv(a.out_weight, L);
      n += static_cast<I>(2 * L * L * a.head_dim * a.heads);
    }
    return n;
  };
  for (const auto& l : m.encoder) total += layer(l);
  for (const auto& l : m.middle) total += layer(l);
  for (const auto& l : m.decoder) total += layer(l);
  for (std::size_t s = 0; s < m.down_weight.size(); ++s) total += conv(m.down_weight[s], cfg.stage_length(s + 1));
  for (std::size_t s = 0; s < m.up_weight.size(); ++s) total += conv(m.up_weight[s], cfg.stage_length(s));
  total += conv(m.out_weight, cfg.signal_length);
  return total;
}

// MACs as an affine function of the architecture: fixed + sum over kept
// depth units of their non-width MACs + sum over width slots of
// slope x kept units (slots inside a dropped depth unit contribute nothing).
struct MacsTable {
  std::int64_t fixed = 0;
  std::vector<std::int64_t> width_slope;   // per-unit MACs of each width slot
  std::vector<std::size_t> width_units;    // current unit count W_l
  std::vector<int> width_depth_unit;       // owning depth unit or -1
  std::vector<std::int64_t> depth_fixed;   // non-width MACs of each depth unit

  // T_l: full-layer MACs of a width slot.
  std::int64_t width_full(std::size_t i) const { return width_slope[i] * static_cast<std::int64_t>(width_units[i]); }

  std::int64_t full() const {
    std::int64_t n = fixed;
    for (auto d : depth_fixed) n += d;
    for (std::size_t i = 0; i < width_slope.size(); ++i) n += width_full(i);
    return n;
  }

  std::int64_t predict(const Architecture& a) const {
    require(a.width_kept.size() == width_slope.size() && a.depth_kept.size() == depth_fixed.size(),
            "macs table: architecture size mismatch");
    std::int64_t n = fixed;
    for (std::size_t j = 0; j < depth_fixed.size(); ++j) n += a.depth_kept[j] ? depth_fixed[j] : 0;
    for (std::size_t i = 0; i < width_slope.size(); ++i) {
      const int j = width_depth_unit[i];
      if (j >= 0 && !a.depth_kept[static_cast<std::size_t>(j)]) continue;
      n += width_slope[i] * static_cast<std::int64_t>(a.width_kept[i].size());
    }
    return n;
  }
};

// Built from the configuration and unit counts (not from weight shapes), so
// it can be checked against count_macs independently.
inline MacsTable macs_table(const ExpertModel& m) {
  using I = std::int64_t;
  const auto& cfg = m.config;
  const auto& ch = cfg.stage_channels;
  const I E = static_cast<I>(cfg.time_embed_dim);
  const I S = static_cast<I>(cfg.stages());
  MacsTable t;
  t.fixed = 2 * E * E;
  t.fixed += static_cast<I>(ch[0] * cfg.input_channels * 3 * cfg.signal_length);
  t.fixed += static_cast<I>(cfg.input_channels * ch[0] * 3 * cfg.signal_length);
  for (I s = 0; s + 1 < S; ++s) {
    const auto su = static_cast<std::size_t>(s);
    t.fixed += static_cast<I>(ch[su + 1] * ch[su] * 3 * cfg.stage_length(su + 1));  // down
    t.fixed += static_cast<I>(ch[su] * ch[su + 1] * 3 * cfg.stage_length(su));      // up
  }
  const auto depth = m.depth_slots();
  t.depth_fixed.assign(depth.size(), 0);
  for (const auto& w : m.width_slots()) {
    const Layer& l = m.layer_of(w);
    const I L = static_cast<I>(cfg.stage_length(l.stage));
    const I C = static_cast<I>(ch[l.stage]);
    const I in = w.section == Section::decoder ? 2 * C : C;
    const std::size_t units = m.width_units(w);
    I slope = 0;
    if (!w.attention) {
      slope = in * 3 * L + E + C * 3 * L;
      const I shortcut = in != C ? C * in * L : 0;
      if (l.present) {
        if (w.depth_unit >= 0) {
          t.depth_fixed[static_cast<std::size_t>(w.depth_unit)] += shortcut;
        } else {
          t.fixed += shortcut;
        }
      }
    } else {
      const I d = C / static_cast<I>(cfg.heads);
      slope = 3 * C * d * L + C * d * L + 2 * L * L * d;
    }
    t.width_slope.push_back(slope);
    t.width_units.push_back(units);
    t.width_depth_unit.push_back(w.depth_unit);
  }
  return t;
}

// Depth units ranked most important first: shallowest stage first, decoder
// before encoder within a stage.
inline std::vector<std::size_t> default_depth_ranking(const ExpertModel& m) {
  const auto depth = m.depth_slots();
  std::vector<std::size_t> r(depth.size());
  std::iota(r.begin(), r.end(), std::size_t{0});
  std::stable_sort(r.begin(), r.end(), [&](std::size_t a, std::size_t b) {
    if (depth[a].stage != depth[b].stage) return depth[a].stage < depth[b].stage;
    return depth[a].section == Section::decoder && depth[b].section != Section::decoder;
  });
  return r;
}

}  // namespace diffprune
