#include "segkit/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "segkit/rng.hpp"

namespace segkit {

Family family_from_string(const std::string& s) {
  if (s == "unet") return Family::unet;
  if (s == "dilated_unet") return Family::dilated_unet;
  if (s == "unet_gcn_head") return Family::unet_gcn_head;
  if (s == "gcn_unet") return Family::gcn_unet;
  throw std::invalid_argument("unknown model family '" + s + "'");
}

std::string to_string(Family f) {
  switch (f) {
    case Family::unet: return "unet";
    case Family::dilated_unet: return "dilated_unet";
    case Family::unet_gcn_head: return "unet_gcn_head";
    case Family::gcn_unet: return "gcn_unet";
  }
  return "?";
}

void ModelSpec::validate() const {
  if (depth < 1) throw std::invalid_argument("model: depth must be >= 1");
  if (base_width < 1) throw std::invalid_argument("model: base_width must be >= 1");
  if (width_multiplier != 1 && width_multiplier != 2) {
    throw std::invalid_argument("model: width_multiplier must be 1 or 2");
  }
  if (out_channels != 1) throw std::invalid_argument("model: out_channels must be 1");
  if (!dilation_scheme.empty()) {
    if (static_cast<int>(dilation_scheme.size()) != depth) {
      throw std::invalid_argument("model: dilation_scheme has " +
                                  std::to_string(dilation_scheme.size()) + " entries for depth " +
                                  std::to_string(depth));
    }
    for (int d : dilation_scheme) {
      if (d < 1) throw std::invalid_argument("model: dilations must be >= 1");
    }
  } else if (family == Family::dilated_unet && depth != 4) {
    throw std::invalid_argument(
        "model: dilated_unet has a default dilation scheme only at depth 4; set one explicitly");
  }
  if (uses_gcn()) {
    if (gcn_kernel < 1 || gcn_kernel % 2 == 0) {
      throw std::invalid_argument("model: family " + to_string(family) +
                                  " needs an odd gcn_kernel, got " + std::to_string(gcn_kernel));
    }
  } else if (gcn_kernel != 0) {
    throw std::invalid_argument("model: gcn_kernel is only valid for GCN families");
  }
}

std::vector<int> ModelSpec::effective_dilations() const {
  if (!dilation_scheme.empty()) return dilation_scheme;
  if (family == Family::dilated_unet) return {2, 2, 2, 4};
  return std::vector<int>(static_cast<size_t>(depth), 1);
}

Tensor gcn_block(Tape& tape, const Tensor& input, const GcnParams& p) {
  return conv_separable_pair(tape, input, p.w);
}

Tensor br_block(Tape& tape, const Tensor& score, const BrParams& p) {
  Tensor r = conv2d(tape, score, p.c1.w, p.c1.b, 1, 1, 1);
  if (p.relu_between) r = relu(tape, r);
  r = conv2d(tape, r, p.c2.w, p.c2.b, 1, 1, 1);
  return add(tape, score, r);
}

// ---------------------------------------------------------------------------
// Building

struct ModelBuilder {
  Model& m;
  Rng rng;

  Tensor kaiming(Shape shape, int fan_in) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
  }

  ConvParams conv(const std::string& name, int in_ch, int out_ch, int kh, int kw) {
    ConvParams p;
    p.w = kaiming({out_ch, in_ch, kh, kw}, in_ch * kh * kw);
    p.b = Tensor::zeros({out_ch}, true);
    m.params_.emplace_back(name + ".w", p.w);
    m.params_.emplace_back(name + ".b", p.b);
    return p;
  }

  std::optional<BnParams> bn(const std::string& name, int ch) {
    if (!m.spec_.batch_norm) return std::nullopt;
    BnParams p;
    p.gamma = Tensor::full({ch}, 1.0, true);
    p.beta = Tensor::zeros({ch}, true);
    p.stats.running_mean.assign(static_cast<size_t>(ch), 0.0);
    p.stats.running_var.assign(static_cast<size_t>(ch), 1.0);
    m.params_.emplace_back(name + ".gamma", p.gamma);
    m.params_.emplace_back(name + ".beta", p.beta);
    return p;
  }

  DoubleConv double_conv(const std::string& name, int in_ch, int out_ch, int dilation) {
    DoubleConv dc;
    dc.c1.conv = conv(name + ".conv1", in_ch, out_ch, 3, 3);
    dc.c1.bn = bn(name + ".bn1", out_ch);
    dc.c1.dilation = dilation;
    dc.c2.conv = conv(name + ".conv2", out_ch, out_ch, 3, 3);
    dc.c2.bn = bn(name + ".bn2", out_ch);
    dc.c2.dilation = dilation;
    return dc;
  }

  GcnParams gcn(const std::string& name, int in_ch, int k) {
    // both branches run the class-score width (out_channels) end to end
    const int mid = m.spec_.out_channels;
    const int out = m.spec_.out_channels;
    GcnParams p;
    p.k = k;
    p.w.a_row_w = kaiming({mid, in_ch, 1, k}, in_ch * k);
    p.w.a_row_b = Tensor::zeros({mid}, true);
    p.w.a_col_w = kaiming({out, mid, k, 1}, mid * k);
    p.w.a_col_b = Tensor::zeros({out}, true);
    p.w.b_col_w = kaiming({mid, in_ch, k, 1}, in_ch * k);
    p.w.b_col_b = Tensor::zeros({mid}, true);
    p.w.b_row_w = kaiming({out, mid, 1, k}, mid * k);
    p.w.b_row_b = Tensor::zeros({out}, true);
    m.params_.emplace_back(name + ".a_row.w", p.w.a_row_w);
    m.params_.emplace_back(name + ".a_row.b", p.w.a_row_b);
    m.params_.emplace_back(name + ".a_col.w", p.w.a_col_w);
    m.params_.emplace_back(name + ".a_col.b", p.w.a_col_b);
    m.params_.emplace_back(name + ".b_col.w", p.w.b_col_w);
    m.params_.emplace_back(name + ".b_col.b", p.w.b_col_b);
    m.params_.emplace_back(name + ".b_row.w", p.w.b_row_w);
    m.params_.emplace_back(name + ".b_row.b", p.w.b_row_b);
    return p;
  }

  BrParams br(const std::string& name, int ch) {
    BrParams p;
    p.c1 = conv(name + ".conv1", ch, ch, 3, 3);
    p.c2 = conv(name + ".conv2", ch, ch, 3, 3);
    p.relu_between = m.spec_.br_relu;
    return p;
  }
};

Model Model::build(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  ModelBuilder b{m, Rng(derive_seed(seed, "model.init"))};

  const int depth = spec.depth;
  const int w0 = spec.effective_width();
  auto dil = spec.effective_dilations();
  std::vector<int> enc_ch(static_cast<size_t>(depth));
  for (int i = 0; i < depth; ++i) enc_ch[static_cast<size_t>(i)] = w0 << i;

  int in_ch = 1;
  for (int i = 0; i < depth; ++i) {
    m.enc_.push_back(b.double_conv("enc" + std::to_string(i), in_ch, enc_ch[static_cast<size_t>(i)],
                                   dil[static_cast<size_t>(i)]));
    in_ch = enc_ch[static_cast<size_t>(i)];
  }

  if (spec.family == Family::gcn_unet) {
    const int k = spec.gcn_kernel;
    for (int i = 0; i < depth; ++i) {
      m.level_gcn_.push_back(b.gcn("gcn" + std::to_string(i), enc_ch[static_cast<size_t>(i)], k));
      m.level_br_.push_back(b.br("br" + std::to_string(i), spec.out_channels));
    }
    for (int i = depth - 2; i >= 0; --i) {
      m.merge_br_.push_back(b.br("merge" + std::to_string(i), spec.out_channels));
    }
    m.final_br_ = b.br("final_br", spec.out_channels);
    return m;
  }

  const int bott_ch = w0 << depth;
  m.bottleneck_ = b.double_conv("bottleneck", enc_ch[static_cast<size_t>(depth - 1)], bott_ch, 1);

  m.dec_.resize(static_cast<size_t>(depth));
  int carried = bott_ch;
  for (int i = depth - 1; i >= 0; --i) {
    int skip_ch = enc_ch[static_cast<size_t>(i)];
    m.dec_[static_cast<size_t>(i)] =
        b.double_conv("dec" + std::to_string(i), skip_ch + carried, skip_ch, 1);
    carried = skip_ch;
  }

  if (spec.family == Family::unet_gcn_head) {
    m.head_gcn_ = b.gcn("head.gcn", enc_ch[0], spec.gcn_kernel);
    m.head_br_ = b.br("head.br", spec.out_channels);
  } else {
    m.head_ = b.conv("head", enc_ch[0], spec.out_channels, 1, 1);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward

Tensor Model::apply_double_conv(Tape& tape, DoubleConv& dc, const Tensor& x, bool training) {
  auto block = [&](ConvBlock& cb, const Tensor& in) {
    Tensor y = conv2d(tape, in, cb.conv.w, cb.conv.b,
                      Conv2dOpts{1, cb.dilation, cb.dilation, cb.dilation});
    if (cb.bn) y = batch_norm2d(tape, y, cb.bn->gamma, cb.bn->beta, cb.bn->stats, training);
    return relu(tape, y);
  };
  return block(dc.c2, block(dc.c1, x));
}

Model::ForwardResult Model::forward_with_features(Tape& tape, const Tensor& batch,
                                                  bool training) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("forward expects an N x C x H x W batch, got " +
                                shape_str(batch.shape()));
  }
  const int H = batch.dim(2), W = batch.dim(3);
  const int factor = 1 << spec_.depth;
  if (H % factor != 0 || W % factor != 0) {
    throw std::invalid_argument(
        "forward: H and W must be divisible by " + std::to_string(factor) + ", got " +
        shape_str(batch.shape()) + "; pad the input first (pad_to_multiple)");
  }

  if (spec_.family == Family::gcn_unet) {
    // large-kernel score per encoder scale, fused coarse-to-fine
    std::vector<Tensor> scores;
    Tensor x = batch;
    for (int i = 0; i < spec_.depth; ++i) {
      x = apply_double_conv(tape, enc_[static_cast<size_t>(i)], x, training);
      Tensor s = gcn_block(tape, x, level_gcn_[static_cast<size_t>(i)]);
      scores.push_back(br_block(tape, s, level_br_[static_cast<size_t>(i)]));
      if (i + 1 < spec_.depth) x = max_pool2d(tape, x);
    }
    Tensor y = scores.back();
    for (int i = spec_.depth - 2; i >= 0; --i) {
      Tensor up = bilinear_upsample2x(tape, y);
      size_t merge_idx = static_cast<size_t>(spec_.depth - 2 - i);
      y = br_block(tape, add(tape, scores[static_cast<size_t>(i)], up), merge_br_[merge_idx]);
    }
    ForwardResult r;
    r.features = y;
    r.prob = sigmoid(tape, br_block(tape, y, final_br_));
    return r;
  }

  std::vector<Tensor> skips;
  Tensor x = batch;
  for (int i = 0; i < spec_.depth; ++i) {
    x = apply_double_conv(tape, enc_[static_cast<size_t>(i)], x, training);
    skips.push_back(x);
    x = max_pool2d(tape, x);
  }
  x = apply_double_conv(tape, bottleneck_, x, training);
  for (int i = spec_.depth - 1; i >= 0; --i) {
    x = bilinear_upsample2x(tape, x);
    x = concat_channels(tape, skips[static_cast<size_t>(i)], x);
    x = apply_double_conv(tape, dec_[static_cast<size_t>(i)], x, training);
  }

  ForwardResult r;
  r.features = x;
  if (spec_.family == Family::unet_gcn_head) {
    Tensor s = gcn_block(tape, x, head_gcn_);
    r.prob = sigmoid(tape, br_block(tape, s, head_br_));
  } else {
    r.prob = sigmoid(tape, conv2d(tape, x, head_.w, head_.b));
  }
  return r;
}

Tensor Model::forward(Tape& tape, const Tensor& batch, bool training) {
  return forward_with_features(tape, batch, training).prob;
}

std::vector<std::pair<std::string, std::vector<double>*>> Model::buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  auto add_dc = [&out](const std::string& name, DoubleConv& dc) {
    if (dc.c1.bn) {
      out.emplace_back(name + ".bn1.running_mean", &dc.c1.bn->stats.running_mean);
      out.emplace_back(name + ".bn1.running_var", &dc.c1.bn->stats.running_var);
    }
    if (dc.c2.bn) {
      out.emplace_back(name + ".bn2.running_mean", &dc.c2.bn->stats.running_mean);
      out.emplace_back(name + ".bn2.running_var", &dc.c2.bn->stats.running_var);
    }
  };
  for (size_t i = 0; i < enc_.size(); ++i) add_dc("enc" + std::to_string(i), enc_[i]);
  if (spec_.family != Family::gcn_unet) {
    add_dc("bottleneck", bottleneck_);
    for (size_t i = 0; i < dec_.size(); ++i) add_dc("dec" + std::to_string(i), dec_[i]);
  }
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

}  // namespace segkit
