#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "svil/autodiff.hpp"
#include "svil/model.hpp"
#include "svil/tensor.hpp"

// Style jitter: per-identity style memory, identity/domain relationship
// memories, and stylized feature generation.
namespace svil::sjm {

inline constexpr double kDefaultMomentum = 0.9;

// Channel-wise style of a feature map.
struct StyleStats {
  std::vector<double> mu;
  std::vector<double> sigma;
};

// mu_c = spatial mean; sigma_c = sqrt(spatial variance + eps). `map` is [C, P].
StyleStats style_stats(const Tensor& map, double eps);

enum class StyleUpdateScope {
  kJittered,  // mean over the identity's jittered samples in the batch
  kAll,       // mean over all of the identity's samples in the batch
};

// Per-identity bank of (mu, sigma); row j belongs to global identity j.
class StyleMemory {
 public:
  StyleMemory() = default;
  StyleMemory(std::size_t identities, std::size_t channels, double momentum);

  // Row j <- mean of the given stats (every identity needs at least one).
  void initialize(const std::vector<std::vector<StyleStats>>& per_identity);

  // mu[j] <- m * mu[j] + (1 - m) * mean(batch stats of j); same for sigma.
  void update(const std::map<int, std::vector<StyleStats>>& batch_by_identity);

  std::size_t identities() const { return identities_; }
  std::size_t channels() const { return channels_; }
  double momentum() const { return momentum_; }
  bool initialized() const { return initialized_; }

  std::span<const double> mu(std::size_t j) const;
  std::span<const double> sigma(std::size_t j) const;
  StyleStats row(std::size_t j) const;
  void set_row(std::size_t j, const StyleStats& stats);

  const Tensor& mu_bank() const { return mu_; }
  const Tensor& sigma_bank() const { return sigma_; }

 private:
  std::size_t identities_ = 0;
  std::size_t channels_ = 0;
  double momentum_ = kDefaultMomentum;
  bool initialized_ = false;
  Tensor mu_;
  Tensor sigma_;
};

// Initializes the bank from the current model's stage-p features of every
// sample. `global_labels[i]` is the identity of `samples[i]`.
StyleMemory style_memory_init(const model::EncoderConfig& config, const model::ModelParams& params,
                              std::span<const synth::Sample> samples, std::span<const int> global_labels,
                              std::size_t identities, double momentum = kDefaultMomentum);

// Cosine similarity of classifier rows with the diagonal zeroed.
Tensor similarity_from_weights(const Tensor& weights);

// |Y_g| x |Y_g| identity-similarity memory. Starts at 1/|Y_g| off the
// diagonal, 0 on it.
class SimilarityMemory {
 public:
  SimilarityMemory() = default;
  explicit SimilarityMemory(std::size_t identities);

  void update(const Tensor& similarity, double momentum);

  const Tensor& matrix() const { return matrix_; }
  Tensor& matrix() { return matrix_; }
  std::size_t identities() const { return matrix_.empty() ? 0 : matrix_.dim(0); }
  double at(std::size_t i, std::size_t j) const { return matrix_[i * identities() + j]; }

 private:
  Tensor matrix_;
};

struct RbfKernel {
  double gamma = 1.0;  // k(a, b) = exp(-gamma * ||a - b||^2)
  double operator()(std::span<const double> a, std::span<const double> b) const;
};

// gamma = 1 / median of pairwise squared distances over the union of A and B
// (floored at 1e-12).
RbfKernel median_heuristic(const Tensor& a, const Tensor& b);

// Biased MMD^2 estimator, clamped at zero. Rows are samples.
double mmd2(const Tensor& a, const Tensor& b, const RbfKernel& kernel);
double mmd2(const Tensor& a, const Tensor& b);  // median-heuristic bandwidth

// K x K domain-distance memory; starts at zero.
class DomainDistanceMemory {
 public:
  DomainDistanceMemory() = default;
  explicit DomainDistanceMemory(std::size_t domains);

  // Rows of the domains present in `feature_sets` move toward the batch
  // MMD^2 between present domains; absent domains are untouched. The matrix
  // is then symmetrized and its diagonal cleared.
  void update(const std::map<int, Tensor>& feature_sets, double momentum);

  const Tensor& matrix() const { return matrix_; }
  Tensor& matrix() { return matrix_; }
  std::size_t domains() const { return matrix_.empty() ? 0 : matrix_.dim(0); }
  double at(std::size_t i, std::size_t j) const { return matrix_[i * domains() + j]; }

 private:
  Tensor matrix_;
};

// beta over identities with the anchor itself masked out.
struct IdentityFactor {
  std::vector<double> beta;
  std::vector<bool> masked;
};

// beta_i = S[j][i] (+ D[dom(j)][dom(i)] when cross_domain).
IdentityFactor compute_beta(std::size_t anchor, const SimilarityMemory& similarity,
                            const DomainDistanceMemory& distance, std::span<const int> domain_of,
                            bool cross_domain = true);

enum class WeightMode { kSoft, kHard };

// Soft: softmax over unmasked entries. Hard: one-hot at the first argmax.
std::vector<double> id_weight(const IdentityFactor& factor, WeightMode mode);

// mu' = sum_j alpha_j mu[j], sigma' = sum_j alpha_j sigma[j].
StyleStats synthesize_style(std::span<const double> alpha, const StyleMemory& memory);

// F' = sigma' * (F - mu(F)) / sigma(F) + mu'. `map` is [C, P].
Tensor jitter(const Tensor& map, std::span<const double> alpha, const StyleMemory& memory, double eps);
Tensor restyle_map(const Tensor& map, const StyleStats& target, double eps);

// Memory snapshots (manifest + float64 blob).
void save_memories(const std::filesystem::path& stem, const StyleMemory& style,
                   const SimilarityMemory& similarity, const DomainDistanceMemory& distance);
void load_memories(const std::filesystem::path& stem, StyleMemory& style, SimilarityMemory& similarity,
                   DomainDistanceMemory& distance);

}  // namespace svil::sjm
