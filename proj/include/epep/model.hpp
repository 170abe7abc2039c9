#pragma once

#include <span>
#include <string>
#include <vector>

#include "epep/numerics.hpp"
#include "epep/prompting.hpp"

namespace epep {

inline constexpr int kTextModality = 0;
inline constexpr int kImageModality = 1;
inline constexpr int kPadToken = 0;

/// Dimensions of the toy two-modality encoder.
struct EncoderConfig {
  int modalities = 2;
  int d_model = 64;
  int layers = 6;
  int heads = 4;
  int ffn_dim = 128;
  int tokens_per_modality = 16;
  int patch_dim = 16;
  int text_vocab = 64;
  int prompt_len = 8;            // l: prompt tokens per injected layer
  int prompt_inject_layers = 6;  // N_p
  int num_classes = 2;

  void validate() const;
  int base_tokens() const { return 2 * tokens_per_modality; }
  bool operator==(const EncoderConfig&) const = default;
};

/// One example: integer text tokens, real image patches, label set, missing pattern.
struct Sample {
  std::vector<int> text_tokens;  // tokens_per_modality entries
  Matrix image_patches;          // tokens_per_modality × patch_dim
  std::vector<int> labels;       // class indices (one for single-label tasks)
  MissingPattern pattern;

  bool operator==(const Sample&) const = default;
};

// Replaces every missing modality with its dummy input: padding tokens for
// text, zero patches for images. Present modalities are left untouched.
Sample substitute_dummy(Sample sample);

struct LayerNormParams {
  Matrix gamma;  // 1×d
  Matrix beta;   // 1×d
};

struct EncoderLayerParams {
  LayerNormParams ln1;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  LayerNormParams ln2;
  Matrix w1, b1, w2, b2;
};

/// Frozen after warm-up.
struct BackboneParams {
  Matrix token_embed;  // text_vocab × d
  Matrix text_pos;     // T × d
  Matrix patch_w;      // patch_dim × d
  Matrix patch_b;      // 1 × d
  Matrix image_pos;    // T × d
  Matrix type_embed;   // 2 × d
  std::vector<EncoderLayerParams> layers;
  LayerNormParams final_ln;

  void for_each_parameter(const ParamVisitor& visit);
  BackboneParams zeros_like() const;
};

/// Pooler (dense + tanh) and classifier: the trainable θ.
struct HeadParams {
  Matrix pooler_w;  // d × d
  Matrix pooler_b;  // 1 × d
  Matrix cls_w;     // d × K
  Matrix cls_b;     // 1 × K

  void for_each_parameter(const ParamVisitor& visit);
  HeadParams zeros_like() const;
};

struct LayerNormTrace {
  Matrix xhat;
  std::vector<double> rstd;
};

struct LayerTrace {
  LayerNormTrace ln1;
  Matrix y1, q, k, v;
  std::vector<Matrix> attn;  // softmax weights per head
  Matrix ctx;
  Matrix x2;
  LayerNormTrace ln2;
  Matrix y2, hidden, act;
  int prompt_rows = 0;
};

/// Everything the backward pass needs from one forward pass.
struct ForwardTrace {
  std::vector<LayerTrace> layers;
  std::vector<int> layer_tokens;  // sequence length entering each layer
  Matrix final_in;
  LayerNormTrace final_ln;
  Matrix pooled;   // 1×d, mean over non-prompt tokens
  Matrix pooler;   // 1×d, tanh output
  std::vector<double> logits;
  std::size_t num_prompt_banks = 0;
};

struct BackwardOptions {
  bool backbone = false;  // accumulate backbone weight gradients
  bool head = true;
  bool prompts = true;
};

struct ModelGradients {
  BackboneParams backbone;
  HeadParams head;
  std::vector<Matrix> prompts;  // d×l per prompt bank
};

/// Toy ViLT-style encoder: token/patch embeddings with modality-type
/// embeddings, pre-LN transformer layers, mean pooling, pooler and classifier.
///
/// Prompts are given as d×l matrices (one per bank). Their columns become l
/// prompt tokens prepended before each of the first N_p layers; the prompt
/// outputs of a layer are dropped before the next injection.
class MultimodalEncoder {
 public:
  MultimodalEncoder(EncoderConfig config, Rng& rng);
  MultimodalEncoder(EncoderConfig config, BackboneParams backbone, HeadParams head);

  const EncoderConfig& config() const { return config_; }
  BackboneParams& backbone() { return backbone_; }
  const BackboneParams& backbone() const { return backbone_; }
  HeadParams& head() { return head_; }
  const HeadParams& head() const { return head_; }

  void reinit_classifier(Rng& rng);

  void check_sample(const Sample& sample) const;

  std::vector<double> forward(const Sample& sample, std::span<const Matrix> prompts,
                              ForwardTrace* trace = nullptr) const;

  // Backbone output before the head (1×d), for caching when no prompt applies.
  Matrix pooled_features(const Sample& sample, std::span<const Matrix> prompts) const;
  std::vector<double> head_forward(const Matrix& pooled, Matrix* pooler_out = nullptr) const;

  // The backbone part stays empty unless requested; backward() only touches
  // it when BackwardOptions::backbone is set.
  ModelGradients zero_gradients(std::size_t prompt_banks, bool with_backbone = false) const;

  void backward(const Sample& sample, const ForwardTrace& trace, std::span<const double> dlogits,
                const BackwardOptions& options, ModelGradients& grads) const;

  // Head-only backward from cached pooled features.
  void head_backward(const Matrix& pooled, const Matrix& pooler_out,
                     std::span<const double> dlogits, HeadParams& grad) const;

 private:
  Matrix embed(const Sample& sample) const;
  void check_prompts(std::span<const Matrix> prompts) const;

  EncoderConfig config_;
  BackboneParams backbone_;
  HeadParams head_;
};

}  // namespace epep
