#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "svil/evalkit.hpp"
#include "svil/losses.hpp"
#include "svil/model.hpp"
#include "svil/rng.hpp"
#include "svil/sjm.hpp"
#include "svil/synthgen.hpp"

namespace svil::train {

struct MetaStepConfig {
  double inner_lr = 0.05;          // alpha
  double meta_test_weight = 1.0;   // beta: balances the meta-test gradient, also the W_t step size
  double outer_lr = 0.05;          // gamma
  double lambda = losses::kDefaultLambda;
  double momentum = sjm::kDefaultMomentum;
  double margin = losses::kDefaultMargin;
  std::size_t identities_per_domain = 4;  // P
  std::size_t images_per_identity = 4;    // K
  bool sjm = true;
  sjm::WeightMode weight_mode = sjm::WeightMode::kSoft;
  bool cross_domain = true;
  bool maml = true;
  // Only the first-order meta gradient is implemented; kept explicit so
  // configs state it.
  bool first_order = true;
  sjm::StyleUpdateScope style_update = sjm::StyleUpdateScope::kJittered;

  void validate() const;
};

// Source domains with dense label spaces.
struct SourceSet {
  std::vector<std::vector<synth::Sample>> domains;
  std::vector<std::vector<int>> global_labels;  // dense in [0, global_classes)
  std::vector<std::vector<int>> local_labels;   // dense in [0, domain_classes[k])
  std::size_t global_classes = 0;
  std::vector<std::size_t> domain_classes;
  std::vector<int> domain_of;  // global identity -> lowest domain containing it

  std::size_t num_domains() const { return domains.size(); }
  std::vector<synth::Sample> all_samples() const;
  std::vector<int> all_global_labels() const;
};

// Domain k of the result is domains[k]; identities are re-indexed densely
// (global by original identity_global, local by original identity_local).
SourceSet make_source_set(std::vector<std::vector<synth::Sample>> domains);

struct MetaSplit {
  std::vector<int> train;
  int test = -1;
};

MetaSplit split_meta_domains(std::size_t domains, CounterRng& rng);

// theta - lr * grads, element-wise over matching tensors.
std::vector<Tensor> sgd_step(std::span<const Tensor> theta, std::span<const Tensor> grads, double lr);

// theta - gamma * (g_mtr + beta * g_mte); the meta-test gradient was taken at
// the inner-updated parameters (first-order).
std::vector<Tensor> meta_optimize(std::span<const Tensor> theta, std::span<const Tensor> grads_mtr,
                                  std::span<const Tensor> grads_mte, double beta, double gamma);

struct Memories {
  sjm::StyleMemory style;
  sjm::SimilarityMemory similarity;
  sjm::DomainDistanceMemory distance;

  bool initialized() const { return style.initialized() && similarity.identities() > 0 && distance.domains() > 0; }
};

Memories init_memories(const model::EncoderConfig& config, const model::ModelParams& params, const SourceSet& sources,
                       double momentum);

// A mini-batch drawn from one or more source domains, identity-major per domain.
struct Batch {
  std::vector<synth::Sample> samples;
  std::vector<int> global_labels;
  std::vector<int> local_labels;
  std::vector<int> domains;  // source-domain index of each sample

  void append(const Batch& other);
  std::size_t size() const { return samples.size(); }
};

// P x K batch from one source domain.
Batch sample_domain_batch(const SourceSet& sources, int domain, std::size_t P, std::size_t K, CounterRng& rng);

// Per-identity style targets for the flagged samples, read from `memories`.
std::vector<ad::RestyleTarget> plan_jitter(const MetaStepConfig& step, const Batch& batch,
                                           std::span<const std::size_t> flagged, const Memories& memories,
                                           std::span<const int> domain_of);

// Instrumentation. Memory arguments are the live state at that point.
struct Hooks {
  std::function<void(std::uint64_t iteration, const Memories&)> before_jitter;
  std::function<void(std::uint64_t iteration, const Memories&)> after_style_update;
  std::function<void(std::uint64_t iteration, const Memories&)> after_relation_update;
};

struct MetaTrainResult {
  losses::LossBreakdown losses;
  model::ModelParams grads;
  model::ModelParams updated;  // inner-updated encoder and heads of the batch's domains
  std::vector<std::size_t> jittered;
};

// Meta-train forward/backward on `batch` (jittering when enabled), style
// memory update, one SGD step at `lr` on the encoder and the batch's heads,
// then the similarity and domain-distance memory updates.
MetaTrainResult meta_train_step(const MetaStepConfig& step, const model::EncoderConfig& config,
                                const model::ModelParams& params, const Batch& batch, Memories& memories,
                                std::span<const int> domain_of, double lr, std::uint64_t iteration = 0,
                                const Hooks* hooks = nullptr);

struct MetaTestResult {
  double loss = 0.0;
  double ce = 0.0;
  double triplet = 0.0;
  model::ModelParams grads;
};

// Single-domain loss of `domain` against its own head; never jittered.
MetaTestResult meta_test_step(const MetaStepConfig& step, const model::EncoderConfig& config,
                              const model::ModelParams& params, const Batch& batch, int domain);

struct TrainConfig {
  MetaStepConfig step;
  std::size_t epochs = 30;
  std::size_t iterations_per_epoch = 0;  // 0: enough for one pass over the largest domain
  std::vector<std::size_t> milestones = {10, 20};
  double decay = 0.1;
  std::size_t eval_every = 1;  // epochs; 0 turns per-epoch evaluation off
  std::uint64_t seed = 1;

  void validate(const SourceSet& sources) const;
};

struct IterationRecord {
  std::uint64_t iteration = 0;
  std::size_t epoch = 0;
  MetaSplit split;
  double lr_scale = 1.0;
  losses::LossBreakdown meta_train;
  std::optional<double> meta_test_loss;
  double temperature = 0.0;
  double style_norm = 0.0;
  double similarity_norm = 0.0;
  double distance_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total_loss = 0.0;
  std::optional<eval::EvalResult> target;
};

struct Observer {
  std::function<void(const IterationRecord&)> on_iteration;
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(std::size_t epoch, const model::ModelParams&)> on_epoch_params;
  Hooks hooks;
};

struct TrainResult {
  model::ModelParams params;
  Memories memories;
  std::vector<EpochRecord> epochs;
};

double lr_scale_at(const TrainConfig& config, std::size_t epoch);
std::size_t iterations_per_epoch(const TrainConfig& config, const SourceSet& sources);

TrainResult run_training(const TrainConfig& config, const model::EncoderConfig& encoder, const SourceSet& sources,
                         const eval::RetrievalSplit* target = nullptr, const Observer* observer = nullptr);

}  // namespace svil::train
