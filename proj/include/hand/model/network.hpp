#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hand/core/ops.hpp"
#include "hand/core/random.hpp"
#include "hand/model/config.hpp"

namespace hand::model {

struct Parameter {
  std::string name;
  Var var;
};

// Forward-pass context: training toggles batch statistics and dropout.
// The dropout stream is owned by the caller so step determinism stays in
// the trainer's hands.
struct ForwardCtx {
  bool training = false;
  RandomStream* rng = nullptr;
};

// Optional introspection hooks.
struct StageTrace {
  std::vector<std::pair<std::string, std::vector<int>>> stages;
  void record(const std::string& name, const Tensor& t) {
    stages.emplace_back(name, t.shape());
  }
};

struct AttnCapture {
  std::vector<Tensor> layer_weights;  // (B, heads, N, N) per layer
};

struct ForwardOutput {
  Var reconstruction;   // (B, 1, S, S) in [0, 1]
  Var ood_probability;  // (B,) in (0, 1)
  Var tokens;           // (B, N, d)
};

// The HAND network: CNN encoder -> token projection -> transformer
// bottleneck with a parallel MLP discriminator -> CNN decoder.
class HandNet {
public:
  HandNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    RandomStream init(derive_seed(seed, "param-init"));
    build(init);
  }

  // Copying would alias parameter nodes between nets.
  HandNet(const HandNet&) = delete;
  HandNet& operator=(const HandNet&) = delete;
  HandNet(HandNet&&) = default;
  HandNet& operator=(HandNet&&) = default;

  const ModelConfig& config() const { return cfg_; }

  // ---- parameter access -------------------------------------------------

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  // Everything on the reconstruction path (encoder, projection, positional
  // embedding, transformer, decoder). The gradient-reversed second training
  // update applies to exactly this group.
  std::vector<Parameter> recon_parameters() const {
    std::vector<Parameter> out;
    for (const auto& p : params_)
      if (p.name.rfind("discriminator.", 0) != 0) out.push_back(p);
    return out;
  }

  std::vector<Parameter> disc_parameters() const {
    std::vector<Parameter> out;
    for (const auto& p : params_)
      if (p.name.rfind("discriminator.", 0) == 0) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, std::shared_ptr<Tensor>>>& buffers() {
    return buffers_;
  }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor>>>& buffers() const {
    return buffers_;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // ---- forward pieces ---------------------------------------------------

  // (B, 1, S, S) -> (B, C3, S/8, S/8)
  Var encode(const Var& x, const ForwardCtx& ctx, StageTrace* trace = nullptr) const {
    const auto& s = x.value().shape();
    if (x.value().rank() != 4 || s[1] != 1 || s[2] != cfg_.input_size || s[3] != cfg_.input_size)
      throw input_error("encode: expected (B,1," + std::to_string(cfg_.input_size) + "," +
                        std::to_string(cfg_.input_size) + "), got " + x.value().shape_str());
    Var h = init_conv_(x);
    if (ctx.training && ctx.rng) h = ops::dropout(h, cfg_.dropout_rate, *ctx.rng);
    if (trace) trace->record("init_conv", h.value());
    for (int i = 0; i < 4; ++i) {
      h = enc_norm_[i](h, ctx.training);
      h = ops::relu(h);
      h = enc_conv_[i](h);
      if (trace) trace->record("enc_block" + std::to_string(i + 1), h.value());
      if (i < 3) {
        h = down_conv_[i](h);
        if (trace) trace->record("down_sample" + std::to_string(i + 1), h.value());
      }
    }
    return h;
  }

  // (B, C3, S/8, S/8) -> (B, N, d); token n maps to grid cell
  // (n / token_grid, n % token_grid).
  Var project_tokens(const Var& fmap, StageTrace* trace = nullptr) const {
    int half = cfg_.input_size / 8;
    const auto& s = fmap.value().shape();
    if (fmap.value().rank() != 4 || s[1] != cfg_.encoder_channels[3] || s[2] != half || s[3] != half)
      throw input_error("project_tokens: unexpected feature map shape " +
                        fmap.value().shape_str());
    Var h = proj_conv_(fmap);  // (B, d, g, g)
    int B = s[0], g = cfg_.token_grid();
    h = ops::reshape(h, {B, cfg_.token_dim, g * g, 1});
    h = ops::permute4(h, {0, 2, 1, 3});  // (B, N, d, 1)
    h = ops::reshape(h, {B, g * g, cfg_.token_dim});
    if (trace) trace->record("linear_projection", h.value());
    return h;
  }

  // Four pre-norm attention + feed-forward blocks; learned positional
  // embeddings are added once before layer 1.
  Var transform_tokens(const Var& tokens, const ForwardCtx& ctx,
                       bool use_positional = true, AttnCapture* capture = nullptr,
                       StageTrace* trace = nullptr) const {
    const auto& s = tokens.value().shape();
    if (tokens.value().rank() != 3 || s[1] != cfg_.token_count() || s[2] != cfg_.token_dim)
      throw input_error("transform_tokens: expected (B," + std::to_string(cfg_.token_count()) +
                        "," + std::to_string(cfg_.token_dim) + "), got " +
                        tokens.value().shape_str());
    Var h = tokens;
    if (use_positional) h = ops::add_expand0(h, pos_embedding_);
    for (const auto& layer : transformer_) h = layer.apply(h, cfg_, ctx, capture);
    if (trace) trace->record("transformer", h.value());
    return h;
  }

  // (B, N, d) -> (B,) OOD probability via mean token pooling + MLP.
  Var discriminate(const Var& tokens) const {
    Var h = ops::mean_axis1(tokens);  // (B, d)
    for (size_t i = 0; i + 1 < disc_layers_.size(); ++i)
      h = ops::relu(disc_layers_[i](h));
    h = disc_layers_.back()(h);  // (B, 1)
    h = ops::reshape(h, {tokens.value().dim(0)});
    return ops::sigmoid(h);
  }

  // (B, N, d) -> (B, 1, S, S) in [0, 1]
  Var decode(const Var& tokens, const ForwardCtx& ctx, StageTrace* trace = nullptr) const {
    const auto& s = tokens.value().shape();
    if (tokens.value().rank() != 3 || s[1] != cfg_.token_count() || s[2] != cfg_.token_dim)
      throw input_error("decode: unexpected token shape " + tokens.value().shape_str());
    int B = s[0], g = cfg_.token_grid();
    Var h = ops::permute3_021(tokens);              // (B, d, N)
    h = ops::reshape(h, {B, cfg_.token_dim, g, g});  // (B, d, g, g)
    h = feature_map_conv_(h);                        // (B, C3, g, g)
    if (trace) trace->record("feature_mapping", h.value());

    h = refine1_conv_(h);
    h = refine1_norm_(h, ctx.training);
    h = ops::relu(h);
    if (trace) trace->record("de_block1", h.value());

    for (int i = 0; i < 3; ++i) {
      h = up_conv_[i](h);
      h = up_deconv_[i](h);
      if (trace) trace->record("up_sample" + std::to_string(i + 1), h.value());
      if (i == 2) {
        h = refine2_conv_(h);
        h = refine2_norm_(h, ctx.training);
        h = ops::relu(h);
        if (trace) trace->record("de_block2", h.value());
      }
    }
    h = up_conv_[3](h);
    h = up_deconv_[3](h);
    if (trace) trace->record("up_sample4", h.value());

    h = refine3_norm_(h, ctx.training);
    h = ops::relu(h);
    h = refine3_conv_(h);
    if (trace) trace->record("de_block2d", h.value());

    h = end_conv_(h);
    h = ops::sigmoid(h);
    if (trace) trace->record("end_conv", h.value());
    return h;
  }

  // Full forward: both heads share the encoder + transformer tokens.
  ForwardOutput forward(const Tensor& batch, const ForwardCtx& ctx,
                        StageTrace* trace = nullptr) const {
    Var x = Var::leaf(batch, false);
    Var fmap = encode(x, ctx, trace);
    Var tokens = transform_tokens(project_tokens(fmap, trace), ctx, true, nullptr, trace);
    ForwardOutput out;
    out.tokens = tokens;
    out.ood_probability = discriminate(tokens);
    out.reconstruction = decode(tokens, ctx, trace);
    return out;
  }

private:
  struct Conv {
    Var w, b;
    int stride = 1, pad = 1;
    Var operator()(const Var& x) const { return ops::conv2d(x, w, b, stride, pad); }
  };
  struct Deconv {
    Var w, b;
    Var operator()(const Var& x) const { return ops::conv_transpose2d_x2(x, w, b); }
  };
  struct Norm {
    Var gamma, beta;
    std::shared_ptr<Tensor> running_mean, running_var;
    Var operator()(const Var& x, bool training) const {
      return ops::batch_norm2d(x, gamma, beta, running_mean.get(), running_var.get(), training);
    }
  };
  struct Dense {
    Var w, b;
    Var operator()(const Var& x) const { return ops::linear(x, w, b); }
  };
  struct TransformerLayer {
    Var ln1_g, ln1_b, ln2_g, ln2_b;
    Dense wq, wk, wv, wo, ff1, ff2;

    Var apply(const Var& x, const ModelConfig& cfg, const ForwardCtx& ctx,
              AttnCapture* capture) const {
      int B = x.value().dim(0), N = x.value().dim(1), d = x.value().dim(2);
      int heads = cfg.attention_heads, dk = d / heads;
      Var h = ops::layer_norm(x, ln1_g, ln1_b);
      auto split = [&](const Var& v) {
        return ops::permute4(ops::reshape(v, {B, N, heads, dk}), {0, 2, 1, 3});
      };
      Var q = split(wq(h)), k = split(wk(h)), v = split(wv(h));
      Var scores = ops::scale(ops::bmm(q, ops::permute4(k, {0, 1, 3, 2})),
                              1.0f / std::sqrt(static_cast<float>(dk)));
      Var attn = ops::softmax_lastdim(scores);  // rows sum to 1 per head/query
      if (capture) capture->layer_weights.push_back(attn.value());
      Var ctx_tokens = ops::bmm(attn, v);  // (B, heads, N, dk)
      ctx_tokens = ops::reshape(ops::permute4(ctx_tokens, {0, 2, 1, 3}), {B, N, d});
      Var attn_out = wo(ctx_tokens);
      if (ctx.training && ctx.rng) attn_out = ops::dropout(attn_out, cfg.dropout_rate, *ctx.rng);
      Var x1 = ops::add(x, attn_out);

      Var h2 = ops::layer_norm(x1, ln2_g, ln2_b);
      Var ff = ff2(ops::relu(ff1(h2)));
      if (ctx.training && ctx.rng) ff = ops::dropout(ff, cfg.dropout_rate, *ctx.rng);
      return ops::add(x1, ff);
    }
  };

  Var make_param(const std::string& name, Tensor value) {
    Var v = Var::leaf(std::move(value), true);
    params_.push_back({name, v});
    return v;
  }

  Tensor uniform_fan_in(RandomStream& rng, std::vector<int> shape, int fan_in) {
    Tensor t(shape);
    float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<float>(rng.uniform(-bound, bound));
    return t;
  }

  Conv make_conv(RandomStream& rng, const std::string& name, int in_ch, int out_ch,
                 int stride) {
    Conv c;
    c.stride = stride;
    c.pad = 1;
    c.w = make_param(name + ".w", uniform_fan_in(rng, {out_ch, in_ch, 3, 3}, in_ch * 9));
    c.b = make_param(name + ".b", Tensor({out_ch}));
    return c;
  }

  Deconv make_deconv(RandomStream& rng, const std::string& name, int in_ch, int out_ch) {
    Deconv d;
    d.w = make_param(name + ".w", uniform_fan_in(rng, {in_ch, out_ch, 2, 2}, in_ch * 4));
    d.b = make_param(name + ".b", Tensor({out_ch}));
    return d;
  }

  Norm make_norm(const std::string& name, int ch) {
    Norm n;
    n.gamma = make_param(name + ".gamma", Tensor({ch}, 1.0f));
    n.beta = make_param(name + ".beta", Tensor({ch}));
    n.running_mean = std::make_shared<Tensor>(Tensor({ch}));
    n.running_var = std::make_shared<Tensor>(Tensor({ch}, 1.0f));
    buffers_.emplace_back(name + ".running_mean", n.running_mean);
    buffers_.emplace_back(name + ".running_var", n.running_var);
    return n;
  }

  Dense make_dense(RandomStream& rng, const std::string& name, int in, int out) {
    Dense d;
    d.w = make_param(name + ".w", uniform_fan_in(rng, {out, in}, in));
    d.b = make_param(name + ".b", Tensor({out}));
    return d;
  }

  void build(RandomStream& rng) {
    const auto& ec = cfg_.encoder_channels;
    int d = cfg_.token_dim, N = cfg_.token_count();

    init_conv_ = make_conv(rng, "encoder.init_conv", 1, cfg_.init_channels, 1);
    for (int i = 0; i < 4; ++i) {
      enc_norm_.push_back(make_norm("encoder.block" + std::to_string(i + 1) + ".norm", ec[i]));
      enc_conv_.push_back(make_conv(rng, "encoder.block" + std::to_string(i + 1) + ".conv",
                                    ec[i], ec[i], 1));
      if (i < 3)
        down_conv_.push_back(make_conv(rng, "encoder.down" + std::to_string(i + 1),
                                       ec[i], ec[i + 1], 2));
    }
    proj_conv_ = make_conv(rng, "projection.conv", ec[3], d, 2);
    pos_embedding_ = make_param("projection.pos_embedding", [&] {
      Tensor t({N, d});
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.normal(0.0, 0.02));
      return t;
    }());

    for (int l = 0; l < cfg_.transformer_layers; ++l) {
      std::string base = "transformer.layer" + std::to_string(l);
      TransformerLayer layer;
      layer.ln1_g = make_param(base + ".ln1.gamma", Tensor({d}, 1.0f));
      layer.ln1_b = make_param(base + ".ln1.beta", Tensor({d}));
      layer.wq = make_dense(rng, base + ".attn.wq", d, d);
      layer.wk = make_dense(rng, base + ".attn.wk", d, d);
      layer.wv = make_dense(rng, base + ".attn.wv", d, d);
      layer.wo = make_dense(rng, base + ".attn.wo", d, d);
      layer.ln2_g = make_param(base + ".ln2.gamma", Tensor({d}, 1.0f));
      layer.ln2_b = make_param(base + ".ln2.beta", Tensor({d}));
      layer.ff1 = make_dense(rng, base + ".ffn.w1", d, 4 * d);
      layer.ff2 = make_dense(rng, base + ".ffn.w2", 4 * d, d);
      transformer_.push_back(std::move(layer));
    }

    int prev = d;
    for (size_t i = 0; i < cfg_.discriminator_hidden.size(); ++i) {
      int width = cfg_.discriminator_hidden[i];
      disc_layers_.push_back(
          make_dense(rng, "discriminator.fc" + std::to_string(i), prev, width));
      prev = width;
    }
    disc_layers_.push_back(make_dense(rng, "discriminator.out", prev, 1));

    feature_map_conv_ = make_conv(rng, "decoder.feature_mapping", d, ec[3], 1);
    refine1_conv_ = make_conv(rng, "decoder.refine1.conv", ec[3], ec[3], 1);
    refine1_norm_ = make_norm("decoder.refine1.norm", ec[3]);
    // Upsampling channel path follows the network table: 32->16->16->8->4.
    const int up_in[4] = {ec[3], ec[2], ec[2], ec[1]};
    const int up_out[4] = {ec[2], ec[2], ec[1], ec[0]};
    for (int i = 0; i < 4; ++i) {
      up_conv_.push_back(make_conv(rng, "decoder.up" + std::to_string(i + 1) + ".conv",
                                   up_in[i], up_out[i], 1));
      up_deconv_.push_back(make_deconv(rng, "decoder.up" + std::to_string(i + 1) + ".deconv",
                                       up_out[i], up_out[i]));
    }
    refine2_conv_ = make_conv(rng, "decoder.refine2.conv", ec[1], ec[1], 1);
    refine2_norm_ = make_norm("decoder.refine2.norm", ec[1]);
    refine3_norm_ = make_norm("decoder.refine3.norm", ec[0]);
    refine3_conv_ = make_conv(rng, "decoder.refine3.conv", ec[0], ec[0], 1);
    end_conv_ = make_conv(rng, "decoder.end_conv", ec[0], 1, 1);
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor>>> buffers_;

  Conv init_conv_;
  std::vector<Norm> enc_norm_;
  std::vector<Conv> enc_conv_;
  std::vector<Conv> down_conv_;
  Conv proj_conv_;
  Var pos_embedding_;
  std::vector<TransformerLayer> transformer_;
  std::vector<Dense> disc_layers_;
  Conv feature_map_conv_;
  Conv refine1_conv_;
  Norm refine1_norm_;
  std::vector<Conv> up_conv_;
  std::vector<Deconv> up_deconv_;
  Conv refine2_conv_;
  Norm refine2_norm_;
  Norm refine3_norm_;
  Conv refine3_conv_;
  Conv end_conv_;
};

}  // namespace hand::model
