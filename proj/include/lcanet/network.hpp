#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/attention.hpp"
#include "lcanet/local_context.hpp"
#include "lcanet/ops.hpp"
#include "lcanet/parameter.hpp"

namespace lcanet {

enum class Heads { kCoarseOnly, kCoarseAndRefine };
enum class AttentionKind { kNone, kSe, kNonlocal, kLocalAffinity, kAcf };

inline const char* to_string(Heads h) { return h == Heads::kCoarseOnly ? "coarse_only" : "coarse_and_refine"; }

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::kNone: return "none";
    case AttentionKind::kSe: return "se";
    case AttentionKind::kNonlocal: return "nonlocal";
    case AttentionKind::kLocalAffinity: return "local_affinity";
    case AttentionKind::kAcf: return "acf";
  }
  return "?";
}

inline AttentionKind parse_attention_kind(const std::string& s) {
  for (auto k : {AttentionKind::kNone, AttentionKind::kSe, AttentionKind::kNonlocal, AttentionKind::kLocalAffinity,
                 AttentionKind::kAcf})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown attention_kind: " + s);
}

inline Heads parse_heads(const std::string& s) {
  if (s == "coarse_only") return Heads::kCoarseOnly;
  if (s == "coarse_and_refine") return Heads::kCoarseAndRefine;
  throw std::invalid_argument("unknown heads: " + s);
}

/// Decoder stages, deepest first. Stage d fuses encoder stage d-1 and runs at its resolution.
inline constexpr int kDecoderStages[] = {5, 4, 3};

struct ModelConfig {
  int input_h = 64;
  int input_w = 64;
  std::vector<int> stage_channels{16, 32, 64, 64, 64};
  LcbConfig lcb;
  Heads heads = Heads::kCoarseAndRefine;
  AttentionKind attention_kind = AttentionKind::kAcf;
  bool use_grb = true;
  BaselineConfig baseline;

  int decoder_channels() const { return stage_channels.back(); }

  void validate() const {
    if (stage_channels.size() != 5) throw std::invalid_argument("model.stage_channels needs 5 entries");
    for (int c : stage_channels)
      if (c < 1) throw std::invalid_argument("model.stage_channels must be positive");
    if (input_h < 32 || input_w < 32 || input_h % 32 || input_w % 32)
      throw std::invalid_argument("model.input_size must be a positive multiple of 32");
    lcb.validate();
    for (int s : lcb.stages)
      if (s < 3 || s > 5) throw std::invalid_argument("model.lcb.stages entries must be in {3,4,5}");
    if (attention_kind == AttentionKind::kSe || attention_kind == AttentionKind::kNonlocal ||
        attention_kind == AttentionKind::kLocalAffinity)
      baseline.validate(decoder_channels());
  }

  bool has_attention_at(int stage) const {
    return attention_kind != AttentionKind::kNone && heads == Heads::kCoarseAndRefine &&
           std::find(lcb.stages.begin(), lcb.stages.end(), stage) != lcb.stages.end();
  }
};

template <typename T>
struct ForwardOutputs {
  BasicTensor<T> coarse;   // N x 1 x H x W in (0, 1)
  BasicTensor<T> refined;  // undefined for coarse-only models
  std::vector<BasicTensor<T>> stage_features;
  std::vector<AttentionMap<T>> attention;

  /// The map the model is judged on: refined when present, else coarse.
  const BasicTensor<T>& prediction() const { return refined.defined() ? refined : coarse; }
};

inline std::string stage_prefix(int d) { return "dec.s" + std::to_string(d); }

/**
 * Creates every parameter the configuration uses. Conv weights are
 * Kaiming-normal with zero biases; residual second convs, attention output
 * projections and the LCB fuse (pass-through) start so that each optional
 * block is an identity at step 0.
 */
template <typename T>
ParameterSet<T> build_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterSet<T> params(seed);
  int in = 3;
  for (int i = 0; i < 5; ++i) {
    const std::string s = "enc.s" + std::to_string(i + 1);
    params.add_conv(s + ".conv1", cfg.stage_channels[i], in, 3);
    params.add_conv(s + ".conv2", cfg.stage_channels[i], cfg.stage_channels[i], 3);
    in = cfg.stage_channels[i];
  }
  const int top = cfg.stage_channels[4];
  if (cfg.use_grb) {
    params.add_conv("grb.reduce", top, top, 1);
    params.add_conv("grb.expand", top, top, 1);
    params.add_conv("grb.gate", top, top, 1);
  }
  params.add_conv("coarse_head", 1, top, 1);
  if (cfg.heads == Heads::kCoarseOnly) return params;

  const int d = cfg.decoder_channels();
  for (int stage : kDecoderStages) {
    const std::string p = stage_prefix(stage);
    params.add_conv(p + ".proj", d, cfg.stage_channels[stage - 2], 1);
    params.add_conv(p + ".conv1", d, d, 3);
    params.add_zero_conv(p + ".conv2", d, d, 3);
    if (!cfg.has_attention_at(stage)) continue;
    switch (cfg.attention_kind) {
      case AttentionKind::kAcf: add_lcb_parameters(params, p + ".lcb", d, cfg.lcb); break;
      case AttentionKind::kSe: add_se_parameters(params, p + ".se", d, cfg.baseline); break;
      case AttentionKind::kNonlocal: add_nonlocal_parameters(params, p + ".nl", d, cfg.baseline); break;
      case AttentionKind::kLocalAffinity: add_local_affinity_parameters(params, p + ".lf", d); break;
      case AttentionKind::kNone: break;
    }
  }
  params.add_conv("refine_head", 1, d, 1);
  return params;
}

namespace detail {
template <typename T>
BasicTensor<T> conv(const BasicTensor<T>& x, const ParameterSet<T>& params, const std::string& name, int pad = 0) {
  return conv2d(x, params[name + ".w"], params[name + ".b"], 1, pad);
}
}  // namespace detail

/// Five stages of two conv3x3+ReLU; 2x2 max pooling after stages 1-4 (strides 2, 4, 8, 16, 16).
template <typename T>
std::vector<BasicTensor<T>> encoder_forward(const BasicTensor<T>& image, const ModelConfig& cfg,
                                            const ParameterSet<T>& params) {
  detail::require_rank("encoder_forward", image.shape(), 4);
  detail::require(image.dim(1) == 3, "encoder_forward: expected 3 input channels, got " + shape_str(image.shape()));
  detail::require(image.dim(2) % 32 == 0 && image.dim(3) % 32 == 0,
                  "encoder_forward: input " + shape_str(image.shape()) + " is not divisible by 32");
  std::vector<BasicTensor<T>> stages;
  BasicTensor<T> x = image;
  for (int i = 0; i < 5; ++i) {
    const std::string s = "enc.s" + std::to_string(i + 1);
    x = relu(detail::conv(x, params, s + ".conv1", 1));
    x = relu(detail::conv(x, params, s + ".conv2", 1));
    if (i < 4) x = max_pool2x2(x);
    stages.push_back(x);
  }
  (void)cfg;
  return stages;
}

/// expand(relu(reduce(f))) gated per channel by sigmoid(gate(gap(f))).
template <typename T>
BasicTensor<T> grb_forward(const BasicTensor<T>& top, const ParameterSet<T>& params) {
  const auto refined = detail::conv(relu(detail::conv(top, params, "grb.reduce")), params, "grb.expand");
  const auto gate = sigmoid(detail::conv(global_avg_pool(top), params, "grb.gate"));
  return mul(refined, gate);
}

/// 1x1 conv to a logit map, bilinear upsampling to out_h x out_w, then sigmoid.
template <typename T>
BasicTensor<T> saliency_head(const BasicTensor<T>& x, const ParameterSet<T>& params, const std::string& name,
                             int out_h, int out_w) {
  return sigmoid(bilinear_resize(detail::conv(x, params, name), out_h, out_w));
}

template <typename T>
BasicTensor<T> coarse_head(const BasicTensor<T>& x, const ParameterSet<T>& params, int out_h, int out_w) {
  return saliency_head(x, params, "coarse_head", out_h, out_w);
}

/// x = upsample(deep) + proj(lateral); returns x + conv3(relu(conv3(x))).
template <typename T>
BasicTensor<T> srb_forward(const BasicTensor<T>& deep, const BasicTensor<T>& lateral, const ParameterSet<T>& params,
                           const std::string& prefix) {
  detail::require_rank("srb_forward deep", deep.shape(), 4);
  detail::require_rank("srb_forward lateral", lateral.shape(), 4);
  const int lh = lateral.dim(2), lw = lateral.dim(3);
  const bool same = lh == deep.dim(2) && lw == deep.dim(3);
  const bool doubled = lh == 2 * deep.dim(2) && lw == 2 * deep.dim(3);
  detail::require(same || doubled, "srb_forward: lateral " + shape_str(lateral.shape()) +
                                       " must be 1x or 2x the spatial size of " + shape_str(deep.shape()));
  const auto up = same ? deep : bilinear_resize(deep, lh, lw);
  const auto x = add(up, detail::conv(lateral, params, prefix + ".proj"));
  const auto residual =
      detail::conv(relu(detail::conv(x, params, prefix + ".conv1", 1)), params, prefix + ".conv2", 1);
  return add(x, residual);
}

template <typename T>
BasicTensor<T> apply_attention(const BasicTensor<T>& x, const BasicTensor<T>& coarse, const ModelConfig& cfg,
                               const ParameterSet<T>& params, int stage, const ForwardContext<T>* ctx) {
  const std::string p = stage_prefix(stage);
  ForwardContext<T> local = ctx ? *ctx : ForwardContext<T>{};
  local.stage = stage;
  switch (cfg.attention_kind) {
    case AttentionKind::kAcf:
      return lcb_forward(x, coarse, cfg.lcb, params[p + ".lcb.fuse.w"], params[p + ".lcb.fuse.b"], &local);
    case AttentionKind::kSe: return se_forward(x, params, p + ".se");
    case AttentionKind::kNonlocal: return nonlocal_forward(x, params, p + ".nl");
    case AttentionKind::kLocalAffinity:
      return local_affinity_forward(x, coarse, params, p + ".lf", cfg.baseline, &local);
    case AttentionKind::kNone: break;
  }
  return x;
}

/**
 * SRB chain over decoder stages 5, 4, 3 starting from `top`, with the
 * configured attention block after each selected stage's SRB; the stage-3
 * map (stride 4) goes through the refine head and is upsampled x4.
 */
template <typename T>
BasicTensor<T> decoder_forward(const std::vector<BasicTensor<T>>& stage_features, const BasicTensor<T>& top,
                               const BasicTensor<T>& coarse_pred, const ModelConfig& cfg,
                               const ParameterSet<T>& params, const ForwardContext<T>* ctx = nullptr) {
  if (cfg.attention_kind == AttentionKind::kAcf || cfg.attention_kind == AttentionKind::kLocalAffinity)
    detail::require(coarse_pred.defined(), "decoder_forward: attention needs the coarse prediction");
  BasicTensor<T> x = top;
  for (int stage : kDecoderStages) {
    x = srb_forward(x, stage_features[stage - 2], params, stage_prefix(stage));
    if (cfg.has_attention_at(stage)) x = apply_attention(x, coarse_pred, cfg, params, stage, ctx);
  }
  return saliency_head(x, params, "refine_head", 4 * x.dim(2), 4 * x.dim(3));
}

template <typename T>
ForwardOutputs<T> model_forward(const BasicTensor<T>& image, const ModelConfig& cfg, const ParameterSet<T>& params,
                                BoxTape* tape = nullptr, bool collect_attention = false) {
  ForwardOutputs<T> out;
  out.stage_features = encoder_forward(image, cfg, params);
  const auto& top_raw = out.stage_features.back();
  const auto top = cfg.use_grb ? grb_forward(top_raw, params) : top_raw;
  out.coarse = coarse_head(top, params, image.dim(2), image.dim(3));
  if (cfg.heads == Heads::kCoarseOnly) return out;
  ForwardContext<T> ctx;
  ctx.tape = tape;
  ctx.attention = collect_attention ? &out.attention : nullptr;
  out.refined = decoder_forward(out.stage_features, top, out.coarse, cfg, params, &ctx);
  return out;
}

}  // namespace lcanet
