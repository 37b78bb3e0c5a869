#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "svil/rng.hpp"
#include "svil/tensor.hpp"

namespace svil::synth {

// Std guard used by pixel-space stylization.
inline constexpr double kStdEpsilon = 1e-5;

// Channel-wise appearance of one domain: x = sigma * content + mu + noise.
struct DomainStyle {
  int domain_id = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
  double noise = 0.0;

  void validate(std::size_t channels) const;
};

struct Sample {
  Tensor image;  // [C, H*W], channel-major
  int identity_local = 0;
  int identity_global = 0;
  int domain_id = 0;
  int camera_id = 0;
};

struct DatasetSpec {
  std::size_t source_domains = 3;
  bool with_target = true;  // one extra held-out domain after the sources
  std::size_t identities_per_domain = 16;
  std::size_t images_per_identity = 12;
  std::size_t cameras_per_domain = 3;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 8;
  std::uint64_t seed = 1;

  // Generated style ranges: mu ~ U(-mu_range, mu_range),
  // log sigma ~ U(-log sigma_ratio, log sigma_ratio).
  double mu_range = 2.0;
  double sigma_ratio = 2.0;
  double noise = 0.1;
  // Per-camera style perturbation (offset and log-scale std), centred per domain.
  double camera_jitter = 0.05;
  // Amplitude of the per-image smooth content perturbation (pose stand-in).
  double pose_variation = 0.5;
  // Optional explicit styles, one per domain (sources then target).
  std::vector<DomainStyle> styles;

  std::size_t num_domains() const { return source_domains + (with_target ? 1 : 0); }
  std::size_t pixels() const { return height * width; }
  void validate() const;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<DomainStyle> styles;
  std::vector<Sample> samples;

  std::size_t num_domains() const { return styles.size(); }
  std::optional<int> target_domain() const;
  std::vector<Sample> domain_samples(int domain) const;
  std::vector<Sample> source_samples() const;
  std::vector<Sample> target_samples() const;

  // (domain, local) <-> global
  int global_id(int domain, int local) const;
  std::pair<int, int> domain_local(int global) const;
};

Dataset generate_dataset(const DatasetSpec& spec);

// Per-image, per-channel pixel AdaIN: x' = sigma_t * (x - mean) / std + mu_t,
// with std = sqrt(max(var, kStdEpsilon)). Constant channels collapse to mu_t.
std::vector<Sample> stylize_images(std::span<const Sample> samples, const DomainStyle& target);

// Partitions one domain's samples into pseudo-domains by camera. Distinct
// cameras are shuffled by `rng` and dealt round-robin. Returned samples carry
// domain_id = subset index and identity_local re-indexed within the subset;
// identity_global is preserved, so subsets may share identities.
std::vector<std::vector<Sample>> camera_split(std::span<const Sample> samples, std::size_t n_subsets,
                                              CounterRng rng);

// P identities x K images. Returns positions into `labels`, identity-major.
// Identities with fewer than K images are filled by drawing with replacement.
std::vector<std::size_t> pk_sample_batch(std::span<const int> labels, std::size_t P, std::size_t K,
                                         CounterRng& rng);

// Per-channel mean and (unguarded) standard deviation of one image.
std::pair<std::vector<double>, std::vector<double>> channel_moments(const Tensor& image);

// Snapshot: <stem>.json manifest + <stem>.bin little-endian float64 pixels in
// manifest order.
void save_dataset(const Dataset& data, const std::filesystem::path& stem);
Dataset load_dataset(const std::filesystem::path& stem);

}  // namespace svil::synth
