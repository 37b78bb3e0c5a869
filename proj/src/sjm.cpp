#include "svil/sjm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "svil/snapshot.hpp"

namespace svil::sjm {

namespace {

void check_momentum(double m, const char* who) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument(std::string(who) + ": momentum outside [0, 1]");
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_set(const Tensor& t, const char* who) {
  if (t.rank() != 2 || t.dim(0) == 0) throw std::invalid_argument(std::string(who) + ": expected a non-empty [n, d] set");
}

}  // namespace

StyleStats style_stats(const Tensor& map, double eps) {
  if (map.rank() != 2) throw std::invalid_argument("style_stats: expected [C, P], got " + shape_string(map.shape()));
  const std::size_t channels = map.dim(0);
  const std::size_t pixels = map.dim(1);
  StyleStats out;
  out.mu.resize(channels);
  out.sigma.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    auto row = map.row(c);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(pixels);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(pixels);
    out.mu[c] = mean;
    out.sigma[c] = std::sqrt(var + eps);
  }
  return out;
}

StyleMemory::StyleMemory(std::size_t identities, std::size_t channels, double momentum)
    : identities_(identities),
      channels_(channels),
      momentum_(momentum),
      mu_({identities, channels}),
      sigma_({identities, channels}) {
  check_momentum(momentum, "StyleMemory");
}

void StyleMemory::initialize(const std::vector<std::vector<StyleStats>>& per_identity) {
  if (per_identity.size() != identities_)
    throw std::invalid_argument("style_memory_init: expected stats for " + std::to_string(identities_) + " identities");
  for (std::size_t j = 0; j < identities_; ++j) {
    const auto& group = per_identity[j];
    if (group.empty()) throw std::invalid_argument("style_memory_init: identity " + std::to_string(j) + " has no samples");
    for (std::size_t c = 0; c < channels_; ++c) {
      double mu = 0.0, sigma = 0.0;
      for (const auto& s : group) {
        mu += s.mu.at(c);
        sigma += s.sigma.at(c);
      }
      mu_[j * channels_ + c] = mu / static_cast<double>(group.size());
      sigma_[j * channels_ + c] = sigma / static_cast<double>(group.size());
    }
  }
  initialized_ = true;
}

void StyleMemory::update(const std::map<int, std::vector<StyleStats>>& batch_by_identity) {
  if (!initialized_) throw std::logic_error("StyleMemory::update: memory not initialized");
  const double m = momentum_;
  for (const auto& [id, group] : batch_by_identity) {
    if (id < 0 || static_cast<std::size_t>(id) >= identities_)
      throw std::out_of_range("StyleMemory::update: unknown identity " + std::to_string(id));
    if (group.empty()) continue;
    const std::size_t j = static_cast<std::size_t>(id);
    for (std::size_t c = 0; c < channels_; ++c) {
      double mu = 0.0, sigma = 0.0;
      for (const auto& s : group) {
        mu += s.mu.at(c);
        sigma += s.sigma.at(c);
      }
      mu /= static_cast<double>(group.size());
      sigma /= static_cast<double>(group.size());
      double& mj = mu_[j * channels_ + c];
      double& sj = sigma_[j * channels_ + c];
      mj = m * mj + (1.0 - m) * mu;
      sj = m * sj + (1.0 - m) * sigma;
    }
  }
}

std::span<const double> StyleMemory::mu(std::size_t j) const {
  if (j >= identities_) throw std::out_of_range("StyleMemory: identity out of range");
  return mu_.row(j);
}

std::span<const double> StyleMemory::sigma(std::size_t j) const {
  if (j >= identities_) throw std::out_of_range("StyleMemory: identity out of range");
  return sigma_.row(j);
}

StyleStats StyleMemory::row(std::size_t j) const {
  auto m = mu(j);
  auto s = sigma(j);
  return {{m.begin(), m.end()}, {s.begin(), s.end()}};
}

void StyleMemory::set_row(std::size_t j, const StyleStats& stats) {
  if (j >= identities_) throw std::out_of_range("StyleMemory: identity out of range");
  if (stats.mu.size() != channels_ || stats.sigma.size() != channels_)
    throw std::invalid_argument("StyleMemory::set_row: channel mismatch");
  for (std::size_t c = 0; c < channels_; ++c) {
    if (!(stats.sigma[c] > 0.0)) throw std::invalid_argument("StyleMemory::set_row: sigma must be positive");
    mu_[j * channels_ + c] = stats.mu[c];
    sigma_[j * channels_ + c] = stats.sigma[c];
  }
  initialized_ = true;
}

StyleMemory style_memory_init(const model::EncoderConfig& config, const model::ModelParams& params,
                              std::span<const synth::Sample> samples, std::span<const int> global_labels,
                              std::size_t identities, double momentum) {
  if (samples.size() != global_labels.size())
    throw std::invalid_argument("style_memory_init: one label per sample required");
  const auto maps = model::stage_features(config, params, samples);
  std::vector<std::vector<StyleStats>> grouped(identities);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const int id = global_labels[i];
    if (id < 0 || static_cast<std::size_t>(id) >= identities)
      throw std::out_of_range("style_memory_init: label out of range");
    grouped[static_cast<std::size_t>(id)].push_back(style_stats(maps[i], config.style_eps));
  }
  StyleMemory memory(identities, config.sjm_channels(), momentum);
  memory.initialize(grouped);
  return memory;
}

Tensor similarity_from_weights(const Tensor& weights) {
  if (weights.rank() != 2) throw std::invalid_argument("similarity_from_weights: expected [n, d]");
  const std::size_t n = weights.dim(0);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = weights.row(i);
    double s = 0.0;
    for (double v : r) s += v * v;
    if (!(s > 0.0)) throw std::invalid_argument("similarity_from_weights: zero-norm row " + std::to_string(i));
    norms[i] = std::sqrt(s);
  }
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      auto a = weights.row(i);
      auto b = weights.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
      const double c = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      out[i * n + j] = c;
      out[j * n + i] = c;
    }
  }
  return out;
}

SimilarityMemory::SimilarityMemory(std::size_t identities) : matrix_({identities, identities}) {
  const double init = 1.0 / static_cast<double>(identities);
  for (std::size_t i = 0; i < identities; ++i)
    for (std::size_t j = 0; j < identities; ++j) matrix_[i * identities + j] = i == j ? 0.0 : init;
}

void SimilarityMemory::update(const Tensor& similarity, double momentum) {
  check_momentum(momentum, "SimilarityMemory::update");
  if (similarity.shape() != matrix_.shape())
    throw std::invalid_argument("SimilarityMemory::update: shape " + shape_string(similarity.shape()) + " vs " +
                                shape_string(matrix_.shape()));
  const std::size_t n = identities();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double& s = matrix_[i * n + j];
      s = i == j ? 0.0 : momentum * s + (1.0 - momentum) * similarity[i * n + j];
    }
}

double RbfKernel::operator()(std::span<const double> a, std::span<const double> b) const {
  return std::exp(-gamma * squared_distance(a, b));
}

RbfKernel median_heuristic(const Tensor& a, const Tensor& b) {
  check_set(a, "median_heuristic");
  check_set(b, "median_heuristic");
  if (a.dim(1) != b.dim(1)) throw std::invalid_argument("median_heuristic: feature width mismatch");
  std::vector<std::span<const double>> pts;
  for (std::size_t i = 0; i < a.dim(0); ++i) pts.push_back(a.row(i));
  for (std::size_t i = 0; i < b.dim(0); ++i) pts.push_back(b.row(i));
  std::vector<double> d2;
  d2.reserve(pts.size() * (pts.size() - 1) / 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d2.push_back(squared_distance(pts[i], pts[j]));
  const std::size_t n = d2.size();
  std::sort(d2.begin(), d2.end());
  const double median = n % 2 == 1 ? d2[n / 2] : 0.5 * (d2[n / 2 - 1] + d2[n / 2]);
  return RbfKernel{1.0 / std::max(median, 1e-12)};
}

double mmd2(const Tensor& a, const Tensor& b, const RbfKernel& kernel) {
  check_set(a, "mmd2");
  check_set(b, "mmd2");
  if (a.dim(1) != b.dim(1)) throw std::invalid_argument("mmd2: feature width mismatch");
  auto mean_kernel = [&](const Tensor& x, const Tensor& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < y.dim(0); ++j) s += kernel(x.row(i), y.row(j));
    return s / static_cast<double>(x.dim(0) * y.dim(0));
  };
  const double v = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
  return std::max(v, 0.0);
}

double mmd2(const Tensor& a, const Tensor& b) { return mmd2(a, b, median_heuristic(a, b)); }

DomainDistanceMemory::DomainDistanceMemory(std::size_t domains) : matrix_({domains, domains}) {}

void DomainDistanceMemory::update(const std::map<int, Tensor>& feature_sets, double momentum) {
  check_momentum(momentum, "DomainDistanceMemory::update");
  const std::size_t k = domains();
  for (const auto& [d, _] : feature_sets)
    if (d < 0 || static_cast<std::size_t>(d) >= k)
      throw std::out_of_range("DomainDistanceMemory::update: unknown domain " + std::to_string(d));
  for (const auto& [s, a] : feature_sets)
    for (const auto& [t, b] : feature_sets) {
      if (s == t) continue;
      double& cell = matrix_[static_cast<std::size_t>(s) * k + static_cast<std::size_t>(t)];
      cell = momentum * cell + (1.0 - momentum) * mmd2(a, b);
    }
  for (std::size_t i = 0; i < k; ++i) {
    matrix_[i * k + i] = 0.0;
    for (std::size_t j = i + 1; j < k; ++j) {
      const double avg = 0.5 * (matrix_[i * k + j] + matrix_[j * k + i]);
      matrix_[i * k + j] = avg;
      matrix_[j * k + i] = avg;
    }
  }
}

IdentityFactor compute_beta(std::size_t anchor, const SimilarityMemory& similarity,
                            const DomainDistanceMemory& distance, std::span<const int> domain_of,
                            bool cross_domain) {
  const std::size_t n = similarity.identities();
  if (anchor >= n) throw std::out_of_range("compute_beta: unknown identity " + std::to_string(anchor));
  if (cross_domain && domain_of.size() != n) throw std::invalid_argument("compute_beta: domain map size mismatch");
  IdentityFactor out;
  out.beta.resize(n);
  out.masked.assign(n, false);
  out.masked[anchor] = true;
  for (std::size_t i = 0; i < n; ++i) {
    double b = similarity.at(anchor, i);
    if (cross_domain) {
      const int dj = domain_of[anchor];
      const int di = domain_of[i];
      if (dj < 0 || di < 0 || static_cast<std::size_t>(dj) >= distance.domains() ||
          static_cast<std::size_t>(di) >= distance.domains())
        throw std::out_of_range("compute_beta: domain index out of range");
      b += distance.at(static_cast<std::size_t>(dj), static_cast<std::size_t>(di));
    }
    out.beta[i] = b;
  }
  return out;
}

std::vector<double> id_weight(const IdentityFactor& factor, WeightMode mode) {
  const std::size_t n = factor.beta.size();
  if (factor.masked.size() != n) throw std::invalid_argument("id_weight: mask size mismatch");
  std::size_t best = n;
  for (std::size_t i = 0; i < n; ++i)
    if (!factor.masked[i] && (best == n || factor.beta[i] > factor.beta[best])) best = i;
  if (best == n) throw std::invalid_argument("id_weight: every identity is masked");
  std::vector<double> alpha(n, 0.0);
  if (mode == WeightMode::kHard) {
    alpha[best] = 1.0;
    return alpha;
  }
  const double top = factor.beta[best];
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (!factor.masked[i]) z += alpha[i] = std::exp(factor.beta[i] - top);
  for (double& a : alpha) a /= z;
  return alpha;
}

StyleStats synthesize_style(std::span<const double> alpha, const StyleMemory& memory) {
  if (!memory.initialized()) throw std::logic_error("synthesize_style: memory not initialized");
  if (alpha.size() != memory.identities()) throw std::invalid_argument("synthesize_style: alpha size mismatch");
  const std::size_t channels = memory.channels();
  StyleStats out{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  for (std::size_t j = 0; j < alpha.size(); ++j) {
    if (alpha[j] == 0.0) continue;
    auto mu = memory.mu(j);
    auto sigma = memory.sigma(j);
    for (std::size_t c = 0; c < channels; ++c) {
      out.mu[c] += alpha[j] * mu[c];
      out.sigma[c] += alpha[j] * sigma[c];
    }
  }
  return out;
}

Tensor restyle_map(const Tensor& map, const StyleStats& target, double eps) {
  const StyleStats source = style_stats(map, eps);
  if (target.mu.size() != source.mu.size() || target.sigma.size() != source.sigma.size())
    throw std::invalid_argument("restyle_map: channel mismatch");
  Tensor out = Tensor::zeros_like(map);
  const std::size_t pixels = map.dim(1);
  for (std::size_t c = 0; c < source.mu.size(); ++c)
    for (std::size_t p = 0; p < pixels; ++p) {
      const double v = map[c * pixels + p];
      out[c * pixels + p] = target.sigma[c] * (v - source.mu[c]) / source.sigma[c] + target.mu[c];
    }
  return out;
}

Tensor jitter(const Tensor& map, std::span<const double> alpha, const StyleMemory& memory, double eps) {
  return restyle_map(map, synthesize_style(alpha, memory), eps);
}

void save_memories(const std::filesystem::path& stem, const StyleMemory& style, const SimilarityMemory& similarity,
                   const DomainDistanceMemory& distance) {
  std::vector<io::NamedTensor> tensors;
  if (style.initialized()) {
    tensors.push_back({"style.mu", style.mu_bank()});
    tensors.push_back({"style.sigma", style.sigma_bank()});
  }
  if (!similarity.matrix().empty()) tensors.push_back({"similarity", similarity.matrix()});
  if (!distance.matrix().empty()) tensors.push_back({"domain_distance", distance.matrix()});
  io::Json meta{{"kind", "sjm-memories"},
                {"style_momentum", style.momentum()},
                {"style_initialized", style.initialized()}};
  io::save_tensors(stem, tensors, meta);
}

void load_memories(const std::filesystem::path& stem, StyleMemory& style, SimilarityMemory& similarity,
                   DomainDistanceMemory& distance) {
  io::Json meta;
  const auto tensors = io::load_tensors(stem, &meta);
  if (meta.value("kind", "") != "sjm-memories") throw std::runtime_error("load_memories: not a memory snapshot");
  const Tensor* mu = nullptr;
  const Tensor* sigma = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "style.mu") mu = &t.tensor;
    else if (t.name == "style.sigma") sigma = &t.tensor;
    else if (t.name == "similarity") similarity.matrix() = t.tensor;
    else if (t.name == "domain_distance") distance.matrix() = t.tensor;
  }
  if (mu && sigma) {
    style = StyleMemory(mu->dim(0), mu->dim(1), meta.value("style_momentum", kDefaultMomentum));
    for (std::size_t j = 0; j < mu->dim(0); ++j) {
      auto m = mu->row(j);
      auto s = sigma->row(j);
      style.set_row(j, {{m.begin(), m.end()}, {s.begin(), s.end()}});
    }
  }
}

}  // namespace svil::sjm
