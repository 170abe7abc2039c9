#include "epep/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "epep/error.hpp"

namespace epep {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

using Size = std::size_t;

Matrix random_matrix(Size rows, Size cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal(0.0, stddev);
  return m;
}

LayerNormParams make_layer_norm(Size d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }

void add_row_bias(Matrix& x, const Matrix& bias) {
  for (Size r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (Size c = 0; c < x.cols(); ++c) row[c] += bias(0, c);
  }
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

Matrix layer_norm_forward(const Matrix& x, const LayerNormParams& p, LayerNormTrace& trace) {
  const Size n = x.rows();
  const Size d = x.cols();
  trace.xhat = Matrix(n, d);
  trace.rstd.assign(n, 0.0);
  Matrix y(n, d);
  for (Size r = 0; r < n; ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    trace.rstd[r] = rstd;
    auto xh = trace.xhat.row(r);
    auto out = y.row(r);
    for (Size c = 0; c < d; ++c) {
      xh[c] = (in[c] - mean) * rstd;
      out[c] = xh[c] * p.gamma(0, c) + p.beta(0, c);
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormParams& p, const LayerNormTrace& trace,
                           LayerNormParams* grad) {
  const Size n = dy.rows();
  const Size d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (Size r = 0; r < n; ++r) {
    auto g = dy.row(r);
    auto xh = trace.xhat.row(r);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (Size c = 0; c < d; ++c) {
      dxhat[c] = g[c] * p.gamma(0, c);
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xh[c];
      if (grad) {
        grad->gamma(0, c) += g[c] * xh[c];
        grad->beta(0, c) += g[c];
      }
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    auto out = dx.row(r);
    for (Size c = 0; c < d; ++c) {
      out[c] = trace.rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
    }
  }
  return dx;
}

Matrix slice_cols(const Matrix& m, Size c0, Size width) {
  Matrix out(m.rows(), width);
  for (Size r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    auto dst = out.row(r);
    for (Size c = 0; c < width; ++c) dst[c] = src[c0 + c];
  }
  return out;
}

void put_cols(Matrix& m, Size c0, const Matrix& src) {
  for (Size r = 0; r < src.rows(); ++r) {
    auto s = src.row(r);
    auto d = m.row(r);
    for (Size c = 0; c < src.cols(); ++c) d[c0 + c] = s[c];
  }
}

void softmax_rows(Matrix& s) {
  for (Size r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    double top = row[0];
    for (double v : row) top = std::max(top, v);
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - top);
      total += v;
    }
    for (double& v : row) v /= total;
  }
}

void accumulate_bias(const Matrix& dy, Matrix& db) {
  for (Size r = 0; r < dy.rows(); ++r) {
    auto row = dy.row(r);
    for (Size c = 0; c < dy.cols(); ++c) db(0, c) += row[c];
  }
}

Matrix layer_forward(const Matrix& x, const EncoderLayerParams& p, int heads, LayerTrace& t) {
  const Size n = x.rows();
  const Size d = x.cols();
  const Size dh = d / static_cast<Size>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  t.y1 = layer_norm_forward(x, p.ln1, t.ln1);
  t.q = linear(t.y1, p.wq, p.bq);
  t.k = linear(t.y1, p.wk, p.bk);
  t.v = linear(t.y1, p.wv, p.bv);
  t.ctx = Matrix(n, d);
  t.attn.resize(static_cast<Size>(heads));
  for (Size h = 0; h < static_cast<Size>(heads); ++h) {
    const Matrix qh = slice_cols(t.q, h * dh, dh);
    const Matrix kh = slice_cols(t.k, h * dh, dh);
    const Matrix vh = slice_cols(t.v, h * dh, dh);
    Matrix s = matmul_nt(qh, kh);
    s *= scale;
    softmax_rows(s);
    put_cols(t.ctx, h * dh, matmul(s, vh));
    t.attn[h] = std::move(s);
  }
  t.x2 = x + linear(t.ctx, p.wo, p.bo);

  t.y2 = layer_norm_forward(t.x2, p.ln2, t.ln2);
  t.hidden = linear(t.y2, p.w1, p.b1);
  t.act = t.hidden;
  for (double& v : t.act.data()) {
    const double inner = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(inner));
  }
  return t.x2 + linear(t.act, p.w2, p.b2);
}

Matrix layer_backward(const Matrix& dout, const EncoderLayerParams& p, int heads,
                      const LayerTrace& t, EncoderLayerParams* grad) {
  const Size d = dout.cols();
  const Size dh = d / static_cast<Size>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Feed-forward block.
  Matrix dx2 = dout;
  if (grad) {
    matmul_tn_acc(t.act, dout, grad->w2);
    accumulate_bias(dout, grad->b2);
  }
  Matrix dhidden = matmul_nt(dout, p.w2);
  {
    auto h = t.hidden.data();
    auto g = dhidden.data();
    for (Size i = 0; i < g.size(); ++i) {
      const double x = h[i];
      const double inner = kGeluC * (x + kGeluA * x * x * x);
      const double th = std::tanh(inner);
      const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      g[i] *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
    }
  }
  if (grad) {
    matmul_tn_acc(t.y2, dhidden, grad->w1);
    accumulate_bias(dhidden, grad->b1);
  }
  const Matrix dy2 = matmul_nt(dhidden, p.w1);
  dx2 += layer_norm_backward(dy2, p.ln2, t.ln2, grad ? &grad->ln2 : nullptr);

  // Attention block.
  if (grad) {
    matmul_tn_acc(t.ctx, dx2, grad->wo);
    accumulate_bias(dx2, grad->bo);
  }
  const Matrix dctx = matmul_nt(dx2, p.wo);
  Matrix dq(dout.rows(), d), dk(dout.rows(), d), dv(dout.rows(), d);
  for (Size h = 0; h < static_cast<Size>(heads); ++h) {
    const Matrix& pw = t.attn[h];
    const Matrix qh = slice_cols(t.q, h * dh, dh);
    const Matrix kh = slice_cols(t.k, h * dh, dh);
    const Matrix vh = slice_cols(t.v, h * dh, dh);
    const Matrix dctx_h = slice_cols(dctx, h * dh, dh);
    Matrix dp = matmul_nt(dctx_h, vh);
    put_cols(dv, h * dh, matmul_tn(pw, dctx_h));
    for (Size r = 0; r < dp.rows(); ++r) {
      auto prow = pw.row(r);
      auto grow = dp.row(r);
      double dot = 0.0;
      for (Size c = 0; c < grow.size(); ++c) dot += prow[c] * grow[c];
      for (Size c = 0; c < grow.size(); ++c) grow[c] = prow[c] * (grow[c] - dot) * scale;
    }
    put_cols(dq, h * dh, matmul(dp, kh));
    put_cols(dk, h * dh, matmul_tn(dp, qh));
  }
  if (grad) {
    matmul_tn_acc(t.y1, dq, grad->wq);
    matmul_tn_acc(t.y1, dk, grad->wk);
    matmul_tn_acc(t.y1, dv, grad->wv);
    accumulate_bias(dq, grad->bq);
    accumulate_bias(dk, grad->bk);
    accumulate_bias(dv, grad->bv);
  }
  Matrix dy1 = matmul_nt(dq, p.wq);
  dy1 += matmul_nt(dk, p.wk);
  dy1 += matmul_nt(dv, p.wv);
  dx2 += layer_norm_backward(dy1, p.ln1, t.ln1, grad ? &grad->ln1 : nullptr);
  return dx2;
}

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

}  // namespace

void EncoderConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("EncoderConfig: " + what);
  };
  require(modalities == 2, "the toy encoder has exactly 2 modalities (text, image)");
  require(d_model > 0 && layers > 0 && heads > 0, "d_model, layers, heads must be positive");
  require(d_model % heads == 0, "d_model must be divisible by heads");
  require(ffn_dim > 0 && tokens_per_modality > 0 && patch_dim > 0, "sizes must be positive");
  require(text_vocab > 1, "text_vocab must exceed 1 (token 0 is padding)");
  require(prompt_len > 0, "prompt_len must be positive");
  require(prompt_inject_layers >= 0 && prompt_inject_layers <= layers,
          "prompt_inject_layers must lie in [0, layers]");
  require(num_classes >= 2, "num_classes must be at least 2");
}

Sample substitute_dummy(Sample sample) {
  if (sample.pattern.contains(kTextModality)) {
    std::fill(sample.text_tokens.begin(), sample.text_tokens.end(), kPadToken);
  }
  if (sample.pattern.contains(kImageModality)) sample.image_patches.fill(0.0);
  return sample;
}

void BackboneParams::for_each_parameter(const ParamVisitor& visit) {
  visit("backbone.token_embed", token_embed);
  visit("backbone.text_pos", text_pos);
  visit("backbone.patch_w", patch_w);
  visit("backbone.patch_b", patch_b);
  visit("backbone.image_pos", image_pos);
  visit("backbone.type_embed", type_embed);
  for (Size i = 0; i < layers.size(); ++i) {
    const std::string pre = "backbone.layer" + std::to_string(i) + ".";
    auto& l = layers[i];
    visit(pre + "ln1.gamma", l.ln1.gamma);
    visit(pre + "ln1.beta", l.ln1.beta);
    visit(pre + "wq", l.wq);
    visit(pre + "bq", l.bq);
    visit(pre + "wk", l.wk);
    visit(pre + "bk", l.bk);
    visit(pre + "wv", l.wv);
    visit(pre + "bv", l.bv);
    visit(pre + "wo", l.wo);
    visit(pre + "bo", l.bo);
    visit(pre + "ln2.gamma", l.ln2.gamma);
    visit(pre + "ln2.beta", l.ln2.beta);
    visit(pre + "w1", l.w1);
    visit(pre + "b1", l.b1);
    visit(pre + "w2", l.w2);
    visit(pre + "b2", l.b2);
  }
  visit("backbone.final_ln.gamma", final_ln.gamma);
  visit("backbone.final_ln.beta", final_ln.beta);
}

BackboneParams BackboneParams::zeros_like() const {
  BackboneParams z = *this;
  z.for_each_parameter([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

void HeadParams::for_each_parameter(const ParamVisitor& visit) {
  visit("head.pooler_w", pooler_w);
  visit("head.pooler_b", pooler_b);
  visit("head.cls_w", cls_w);
  visit("head.cls_b", cls_b);
}

HeadParams HeadParams::zeros_like() const {
  return {epep::zeros_like(pooler_w), epep::zeros_like(pooler_b), epep::zeros_like(cls_w),
          epep::zeros_like(cls_b)};
}

MultimodalEncoder::MultimodalEncoder(EncoderConfig config, Rng& rng) : config_(config) {
  config_.validate();
  const auto d = static_cast<Size>(config_.d_model);
  const auto f = static_cast<Size>(config_.ffn_dim);
  const auto t = static_cast<Size>(config_.tokens_per_modality);
  const auto p = static_cast<Size>(config_.patch_dim);
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_f = 1.0 / std::sqrt(static_cast<double>(f));

  backbone_.token_embed = random_matrix(static_cast<Size>(config_.text_vocab), d, 1.0, rng);
  // The padding embedding is zero and never trained, as with a padding index.
  for (double& v : backbone_.token_embed.row(kPadToken)) v = 0.0;
  backbone_.text_pos = random_matrix(t, d, 0.1, rng);
  backbone_.patch_w = random_matrix(p, d, 1.0 / std::sqrt(static_cast<double>(p)), rng);
  backbone_.patch_b = Matrix(1, d);
  backbone_.image_pos = random_matrix(t, d, 0.1, rng);
  backbone_.type_embed = random_matrix(2, d, 0.1, rng);
  for (int i = 0; i < config_.layers; ++i) {
    EncoderLayerParams l;
    l.ln1 = make_layer_norm(d);
    l.wq = random_matrix(d, d, inv_d, rng);
    l.bq = Matrix(1, d);
    l.wk = random_matrix(d, d, inv_d, rng);
    l.bk = Matrix(1, d);
    l.wv = random_matrix(d, d, inv_d, rng);
    l.bv = Matrix(1, d);
    l.wo = random_matrix(d, d, inv_d, rng);
    l.bo = Matrix(1, d);
    l.ln2 = make_layer_norm(d);
    l.w1 = random_matrix(d, f, inv_d, rng);
    l.b1 = Matrix(1, f);
    l.w2 = random_matrix(f, d, inv_f, rng);
    l.b2 = Matrix(1, d);
    backbone_.layers.push_back(std::move(l));
  }
  backbone_.final_ln = make_layer_norm(d);

  head_.pooler_w = random_matrix(d, d, inv_d, rng);
  head_.pooler_b = Matrix(1, d);
  reinit_classifier(rng);
}

MultimodalEncoder::MultimodalEncoder(EncoderConfig config, BackboneParams backbone,
                                     HeadParams head)
    : config_(config), backbone_(std::move(backbone)), head_(std::move(head)) {
  config_.validate();
  const auto d = static_cast<Size>(config_.d_model);
  auto expect = [](const Matrix& m, Size r, Size c, const std::string& name) {
    if (m.rows() != r || m.cols() != c) {
      throw ShapeError("parameter " + name + " is " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                       std::to_string(c));
    }
  };
  if (backbone_.layers.size() != static_cast<Size>(config_.layers)) {
    throw ShapeError("backbone layer count does not match config");
  }
  expect(backbone_.token_embed, static_cast<Size>(config_.text_vocab), d, "token_embed");
  expect(backbone_.patch_w, static_cast<Size>(config_.patch_dim), d, "patch_w");
  expect(backbone_.text_pos, static_cast<Size>(config_.tokens_per_modality), d, "text_pos");
  expect(backbone_.image_pos, static_cast<Size>(config_.tokens_per_modality), d, "image_pos");
  expect(head_.pooler_w, d, d, "pooler_w");
  expect(head_.cls_w, d, static_cast<Size>(config_.num_classes), "cls_w");
  expect(head_.cls_b, 1, static_cast<Size>(config_.num_classes), "cls_b");
}

void MultimodalEncoder::reinit_classifier(Rng& rng) {
  const auto d = static_cast<Size>(config_.d_model);
  const auto k = static_cast<Size>(config_.num_classes);
  head_.cls_w = random_matrix(d, k, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  head_.cls_b = Matrix(1, k);
}

void MultimodalEncoder::check_sample(const Sample& sample) const {
  const auto t = static_cast<Size>(config_.tokens_per_modality);
  if (sample.text_tokens.size() != t) {
    throw ShapeError("sample has " + std::to_string(sample.text_tokens.size()) +
                     " text tokens, model expects " + std::to_string(t));
  }
  for (int tok : sample.text_tokens) {
    if (tok < 0 || tok >= config_.text_vocab) {
      throw ShapeError("text token " + std::to_string(tok) + " outside vocabulary of size " +
                       std::to_string(config_.text_vocab));
    }
  }
  if (sample.image_patches.rows() != t ||
      sample.image_patches.cols() != static_cast<Size>(config_.patch_dim)) {
    throw ShapeError("image patches are " + std::to_string(sample.image_patches.rows()) + "x" +
                     std::to_string(sample.image_patches.cols()) + ", model expects " +
                     std::to_string(t) + "x" + std::to_string(config_.patch_dim));
  }
  for (int c : sample.labels) {
    if (c < 0 || c >= config_.num_classes) {
      throw ShapeError("label " + std::to_string(c) + " outside " +
                       std::to_string(config_.num_classes) + " classes");
    }
  }
  sample.pattern.validate(config_.modalities);
}

void MultimodalEncoder::check_prompts(std::span<const Matrix> prompts) const {
  if (prompts.empty()) return;
  if (config_.prompt_inject_layers == 0) {
    throw ShapeError("prompts given but prompt_inject_layers is 0");
  }
  if (prompts.size() != 1 && prompts.size() != static_cast<Size>(config_.prompt_inject_layers)) {
    throw ShapeError("expected 1 or " + std::to_string(config_.prompt_inject_layers) +
                     " prompt banks, got " + std::to_string(prompts.size()));
  }
  for (const auto& p : prompts) {
    if (p.rows() != static_cast<Size>(config_.d_model) ||
        p.cols() != static_cast<Size>(config_.prompt_len)) {
      throw ShapeError("prompt is " + std::to_string(p.rows()) + "x" + std::to_string(p.cols()) +
                       ", model expects " + std::to_string(config_.d_model) + "x" +
                       std::to_string(config_.prompt_len));
    }
  }
}

Matrix MultimodalEncoder::embed(const Sample& sample) const {
  const auto t = static_cast<Size>(config_.tokens_per_modality);
  const auto d = static_cast<Size>(config_.d_model);
  Matrix h(2 * t, d);
  for (Size j = 0; j < t; ++j) {
    auto out = h.row(j);
    auto tok = backbone_.token_embed.row(static_cast<Size>(sample.text_tokens[j]));
    auto pos = backbone_.text_pos.row(j);
    auto typ = backbone_.type_embed.row(kTextModality);
    for (Size c = 0; c < d; ++c) out[c] = tok[c] + pos[c] + typ[c];
  }
  const Matrix proj = linear(sample.image_patches, backbone_.patch_w, backbone_.patch_b);
  for (Size j = 0; j < t; ++j) {
    auto out = h.row(t + j);
    auto pr = proj.row(j);
    auto pos = backbone_.image_pos.row(j);
    auto typ = backbone_.type_embed.row(kImageModality);
    for (Size c = 0; c < d; ++c) out[c] = pr[c] + pos[c] + typ[c];
  }
  return h;
}

std::vector<double> MultimodalEncoder::forward(const Sample& sample,
                                               std::span<const Matrix> prompts,
                                               ForwardTrace* trace) const {
  check_sample(sample);
  check_prompts(prompts);
  const auto l = static_cast<Size>(config_.prompt_len);
  const auto d = static_cast<Size>(config_.d_model);

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr.layers.assign(backbone_.layers.size(), {});
  tr.layer_tokens.clear();
  tr.num_prompt_banks = prompts.size();

  Matrix h = embed(sample);
  const Size base = h.rows();
  for (Size i = 0; i < backbone_.layers.size(); ++i) {
    const bool inject = !prompts.empty() && i < static_cast<Size>(config_.prompt_inject_layers);
    Matrix x;
    if (inject) {
      // Strip-then-prepend: fresh prompt tokens ahead of the base tokens.
      const Matrix& p = prompts.size() == 1 ? prompts[0] : prompts[i];
      x = Matrix(l + base, d);
      for (Size r = 0; r < l; ++r)
        for (Size c = 0; c < d; ++c) x(r, c) = p(c, r);
      for (Size r = 0; r < base; ++r) {
        auto src = h.row(r);
        std::copy(src.begin(), src.end(), x.row(l + r).begin());
      }
    } else {
      x = std::move(h);
    }
    tr.layer_tokens.push_back(static_cast<int>(x.rows()));
    LayerTrace& lt = tr.layers[i];
    lt.prompt_rows = inject ? static_cast<int>(l) : 0;
    Matrix out = layer_forward(x, backbone_.layers[i], config_.heads, lt);
    if (inject) {
      h = Matrix(base, d);
      for (Size r = 0; r < base; ++r) {
        auto src = out.row(l + r);
        std::copy(src.begin(), src.end(), h.row(r).begin());
      }
    } else {
      h = std::move(out);
    }
  }
  tr.final_in = h;
  const Matrix fin = layer_norm_forward(h, backbone_.final_ln, tr.final_ln);
  tr.pooled = Matrix(1, d);
  for (Size r = 0; r < base; ++r) {
    auto row = fin.row(r);
    for (Size c = 0; c < d; ++c) tr.pooled(0, c) += row[c];
  }
  tr.pooled *= 1.0 / static_cast<double>(base);
  tr.logits = head_forward(tr.pooled, &tr.pooler);
  return tr.logits;
}

Matrix MultimodalEncoder::pooled_features(const Sample& sample,
                                          std::span<const Matrix> prompts) const {
  ForwardTrace tr;
  forward(sample, prompts, &tr);
  return tr.pooled;
}

std::vector<double> MultimodalEncoder::head_forward(const Matrix& pooled,
                                                    Matrix* pooler_out) const {
  Matrix z = linear(pooled, head_.pooler_w, head_.pooler_b);
  for (double& v : z.data()) v = std::tanh(v);
  const Matrix logits = linear(z, head_.cls_w, head_.cls_b);
  if (pooler_out) *pooler_out = std::move(z);
  return {logits.data().begin(), logits.data().end()};
}

ModelGradients MultimodalEncoder::zero_gradients(std::size_t prompt_banks,
                                                 bool with_backbone) const {
  ModelGradients g;
  if (with_backbone) g.backbone = backbone_.zeros_like();
  g.head = head_.zeros_like();
  for (Size b = 0; b < prompt_banks; ++b) {
    g.prompts.emplace_back(static_cast<Size>(config_.d_model),
                           static_cast<Size>(config_.prompt_len));
  }
  return g;
}

void MultimodalEncoder::head_backward(const Matrix& pooled, const Matrix& pooler_out,
                                      std::span<const double> dlogits, HeadParams& grad) const {
  const Matrix dl = Matrix::row_vector(dlogits);
  matmul_tn_acc(pooler_out, dl, grad.cls_w);
  grad.cls_b += dl;
  Matrix dz = matmul_nt(dl, head_.cls_w);
  for (Size c = 0; c < dz.cols(); ++c) dz(0, c) *= 1.0 - pooler_out(0, c) * pooler_out(0, c);
  matmul_tn_acc(pooled, dz, grad.pooler_w);
  grad.pooler_b += dz;
}

void MultimodalEncoder::backward(const Sample& sample, const ForwardTrace& trace,
                                 std::span<const double> dlogits, const BackwardOptions& options,
                                 ModelGradients& grads) const {
  if (dlogits.size() != static_cast<Size>(config_.num_classes)) {
    throw ShapeError("backward: dlogits has wrong length");
  }
  if (options.backbone && grads.backbone.layers.size() != backbone_.layers.size()) {
    throw ShapeError("backward: backbone gradients were not allocated");
  }
  const auto l = static_cast<Size>(config_.prompt_len);
  const auto d = static_cast<Size>(config_.d_model);
  const Size base = trace.final_in.rows();

  // Head.
  const Matrix dl = Matrix::row_vector(dlogits);
  Matrix dz = matmul_nt(dl, head_.cls_w);
  for (Size c = 0; c < dz.cols(); ++c) dz(0, c) *= 1.0 - trace.pooler(0, c) * trace.pooler(0, c);
  if (options.head) {
    matmul_tn_acc(trace.pooler, dl, grads.head.cls_w);
    grads.head.cls_b += dl;
    matmul_tn_acc(trace.pooled, dz, grads.head.pooler_w);
    grads.head.pooler_b += dz;
  }
  const bool need_input_grads =
      options.backbone || (options.prompts && trace.num_prompt_banks > 0);
  if (!need_input_grads) return;
  const Matrix dpooled = matmul_nt(dz, head_.pooler_w);

  // Mean pooling spreads the gradient evenly over the base tokens.
  Matrix dfin(base, d);
  const double inv = 1.0 / static_cast<double>(base);
  for (Size r = 0; r < base; ++r)
    for (Size c = 0; c < d; ++c) dfin(r, c) = dpooled(0, c) * inv;
  Matrix dh = layer_norm_backward(dfin, backbone_.final_ln, trace.final_ln,
                                  options.backbone ? &grads.backbone.final_ln : nullptr);

  if (options.prompts && trace.num_prompt_banks > 0 &&
      grads.prompts.size() != trace.num_prompt_banks) {
    throw ShapeError("backward: gradient holds " + std::to_string(grads.prompts.size()) +
                     " prompt banks, forward used " + std::to_string(trace.num_prompt_banks));
  }

  for (Size ii = backbone_.layers.size(); ii-- > 0;) {
    const LayerTrace& lt = trace.layers[ii];
    const auto pr = static_cast<Size>(lt.prompt_rows);
    Matrix dout;
    if (pr > 0) {
      // Prompt outputs were discarded, so their rows carry no gradient.
      dout = Matrix(pr + base, d);
      for (Size r = 0; r < base; ++r) {
        auto src = dh.row(r);
        std::copy(src.begin(), src.end(), dout.row(pr + r).begin());
      }
    } else {
      dout = std::move(dh);
    }
    Matrix dx = layer_backward(dout, backbone_.layers[ii], config_.heads, lt,
                               options.backbone ? &grads.backbone.layers[ii] : nullptr);
    if (pr > 0) {
      if (options.prompts) {
        Matrix& gp = trace.num_prompt_banks == 1 ? grads.prompts[0] : grads.prompts[ii];
        for (Size r = 0; r < l; ++r)
          for (Size c = 0; c < d; ++c) gp(c, r) += dx(r, c);
      }
      dh = Matrix(base, d);
      for (Size r = 0; r < base; ++r) {
        auto src = dx.row(pr + r);
        std::copy(src.begin(), src.end(), dh.row(r).begin());
      }
    } else {
      dh = std::move(dx);
    }
  }

  if (!options.backbone) return;
  auto& gb = grads.backbone;
  const auto t = static_cast<Size>(config_.tokens_per_modality);
  for (Size j = 0; j < t; ++j) {
    auto g = dh.row(j);
    const int token = sample.text_tokens[j];
    auto tok = gb.token_embed.row(static_cast<Size>(token));
    auto pos = gb.text_pos.row(j);
    auto typ = gb.type_embed.row(kTextModality);
    for (Size c = 0; c < d; ++c) {
      if (token != kPadToken) tok[c] += g[c];
      pos[c] += g[c];
      typ[c] += g[c];
    }
  }
  Matrix dimg(t, d);
  for (Size j = 0; j < t; ++j) {
    auto g = dh.row(t + j);
    auto pos = gb.image_pos.row(j);
    auto typ = gb.type_embed.row(kImageModality);
    auto dst = dimg.row(j);
    for (Size c = 0; c < d; ++c) {
      pos[c] += g[c];
      typ[c] += g[c];
      dst[c] = g[c];
    }
  }
  matmul_tn_acc(sample.image_patches, dimg, gb.patch_w);
  accumulate_bias(dimg, gb.patch_b);
}

}  // namespace epep
