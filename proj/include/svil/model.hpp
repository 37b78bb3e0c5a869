#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "svil/autodiff.hpp"
#include "svil/rng.hpp"
#include "svil/synthgen.hpp"

namespace svil::model {

struct EncoderConfig {
  std::size_t input_channels = 3;
  std::vector<std::size_t> stage_channels = {16, 16, 32};
  std::size_t embedding_dim = 32;
  // Jitter is applied to the output of this stage.
  std::size_t sjm_stage = 1;
  double tau_init = 1.0 / 16.0;
  double tau_min = 1e-3;
  // Guard inside the feature-space std.
  double style_eps = 1e-5;

  std::size_t num_stages() const { return stage_channels.size(); }
  std::size_t sjm_channels() const { return stage_channels.at(sjm_stage); }
  // `pixels` is H*W of the input; every stage preserves it.
  void validate(std::size_t pixels) const;
};

// Per-stage 1x1 channel mixing followed by ReLU.
struct StageParams {
  Tensor weight;  // [C_out, C_in]
  Tensor bias;    // [C_out]
};

struct ModelParams {
  std::vector<StageParams> stages;
  Tensor head_weight;                     // [d, C_last]
  Tensor head_bias;                       // [d]
  Tensor global_classifier;               // [|Y_g|, d]
  std::vector<Tensor> domain_classifiers;  // [|Y_k|, d]
  Tensor temperature;                     // [1]

  // Encoder-side tensors (stages, head, temperature): the Theta of the meta update.
  std::vector<Tensor*> encoder_tensors();
  std::vector<const Tensor*> encoder_tensors() const;

  // Every tensor with a stable name, in serialization order.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  ModelParams zeros_like() const;
  bool all_finite() const;
};

ModelParams init_params(const EncoderConfig& config, std::size_t global_classes,
                        std::span<const std::size_t> domain_classes, CounterRng rng);

// Graph leaves for one trace.
struct BoundParams {
  std::vector<ad::Var> stage_weight;
  std::vector<ad::Var> stage_bias;
  ad::Var head_weight;
  ad::Var head_bias;
  ad::Var global_classifier;
  std::vector<ad::Var> domain_classifiers;
  ad::Var temperature;
};

// Leaves are parameters (trainable) or constants.
BoundParams bind(ad::Graph& graph, const ModelParams& params, bool trainable = true);

// Gradients of every bound leaf, shaped like the parameters.
ModelParams collect_grads(const ad::Graph& graph, const BoundParams& bound, const ModelParams& shape);

struct ForwardPass {
  ad::Var sjm_input;   // F = g_m(x), [N, C_p, P]
  ad::Var sjm_output;  // F after jitter (== sjm_input when no jitter)
  ad::Var embeddings;  // f(x), [N, d]
  ad::Var global_logits;
};

// Stacks images into [N, C, P].
Tensor batch_images(std::span<const synth::Sample> samples);
Tensor batch_images(std::span<const synth::Sample> samples, std::span<const std::size_t> order);

// Runs the encoder on `images`, restyling the targeted samples' stage-p maps.
ForwardPass forward(const EncoderConfig& config, const BoundParams& params, ad::Var images,
                    std::span<const ad::RestyleTarget> jitter = {});

// Raw (pre-normalization) embeddings, no jitter. Rows follow `samples`.
Tensor extract_features(const EncoderConfig& config, const ModelParams& params,
                        std::span<const synth::Sample> samples);
Tensor normalize_rows(const Tensor& features);

// Stage-p feature maps, one [C_p, P] tensor per sample.
std::vector<Tensor> stage_features(const EncoderConfig& config, const ModelParams& params,
                                   std::span<const synth::Sample> samples);

// First floor(n_j / 2) occurrences of every identity, in batch order.
std::vector<std::size_t> plan_half_jitter(std::span<const int> labels);

// Checkpoint: manifest + little-endian float64 blob.
void save_checkpoint(const std::filesystem::path& stem, const EncoderConfig& config, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& stem, EncoderConfig* config = nullptr);

}  // namespace svil::model
