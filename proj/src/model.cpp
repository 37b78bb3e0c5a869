#include "svil/model.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "svil/losses.hpp"
#include "svil/snapshot.hpp"

namespace svil::model {

using ad::Var;

void EncoderConfig::validate(std::size_t pixels) const {
  if (input_channels == 0) throw std::invalid_argument("encoder.input_channels must be positive");
  if (stage_channels.empty()) throw std::invalid_argument("encoder.stage_channels must not be empty");
  for (auto c : stage_channels) {
    if (c == 0) throw std::invalid_argument("encoder.stage_channels entries must be positive");
  }
  if (embedding_dim == 0) throw std::invalid_argument("encoder.embedding_dim must be positive");
  if (sjm_stage >= stage_channels.size()) {
    throw std::invalid_argument("encoder.sjm_stage must be < number of stages (" +
                                std::to_string(stage_channels.size()) + ")");
  }
  if (!(tau_init > 0.0) || !(tau_min > 0.0)) throw std::invalid_argument("encoder.tau_init must be positive");
  if (!(style_eps > 0.0)) throw std::invalid_argument("encoder.style_eps must be positive");
  if (pixels <= 1) {
    throw std::invalid_argument("encoder: stage feature maps must have H*W > 1 for style statistics");
  }
}

std::vector<Tensor*> ModelParams::encoder_tensors() {
  std::vector<Tensor*> out;
  for (auto& s : stages) {
    out.push_back(&s.weight);
    out.push_back(&s.bias);
  }
  out.push_back(&head_weight);
  out.push_back(&head_bias);
  out.push_back(&temperature);
  return out;
}

std::vector<const Tensor*> ModelParams::encoder_tensors() const {
  std::vector<const Tensor*> out;
  for (auto* t : const_cast<ModelParams*>(this)->encoder_tensors()) out.push_back(t);
  return out;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    fn("stage" + std::to_string(i) + ".weight", stages[i].weight);
    fn("stage" + std::to_string(i) + ".bias", stages[i].bias);
  }
  fn("head.weight", head_weight);
  fn("head.bias", head_bias);
  fn("classifier.global", global_classifier);
  for (std::size_t k = 0; k < domain_classifiers.size(); ++k) {
    fn("classifier.domain" + std::to_string(k), domain_classifiers[k]);
  }
  fn("temperature", temperature);
}

void ModelParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ModelParams*>(this)->for_each([&](const std::string& name, Tensor& t) { fn(name, t); });
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out = *this;
  out.for_each([](const std::string&, Tensor& t) { t = Tensor::zeros_like(t); });
  return out;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

ModelParams init_params(const EncoderConfig& config, std::size_t global_classes,
                        std::span<const std::size_t> domain_classes, CounterRng rng) {
  if (global_classes == 0) throw std::invalid_argument("init_params: empty global label space");
  auto normal_tensor = [&](Shape shape, double stdev, std::string_view purpose) {
    auto r = rng.substream(purpose);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = stdev * r.normal();
    return t;
  };
  ModelParams p;
  std::size_t in_c = config.input_channels;
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    const std::size_t out_c = config.stage_channels[s];
    // He initialization for ReLU stages.
    p.stages.push_back({normal_tensor({out_c, in_c}, std::sqrt(2.0 / static_cast<double>(in_c)),
                                      "stage" + std::to_string(s)),
                        Tensor(Shape{out_c})});
    in_c = out_c;
  }
  p.head_weight = normal_tensor({config.embedding_dim, in_c}, std::sqrt(1.0 / static_cast<double>(in_c)), "head");
  p.head_bias = Tensor(Shape{config.embedding_dim});
  p.global_classifier = normal_tensor({global_classes, config.embedding_dim}, 1.0, "classifier.global");
  for (std::size_t k = 0; k < domain_classes.size(); ++k) {
    if (domain_classes[k] == 0) throw std::invalid_argument("init_params: empty domain label space");
    p.domain_classifiers.push_back(normal_tensor({domain_classes[k], config.embedding_dim}, 1.0,
                                                 "classifier.domain" + std::to_string(k)));
  }
  p.temperature = Tensor::scalar(config.tau_init);
  return p;
}

BoundParams bind(ad::Graph& graph, const ModelParams& params, bool trainable) {
  auto leaf = [&](const Tensor& t) { return trainable ? graph.parameter(t) : graph.constant(t); };
  BoundParams b;
  for (const auto& s : params.stages) {
    b.stage_weight.push_back(leaf(s.weight));
    b.stage_bias.push_back(leaf(s.bias));
  }
  b.head_weight = leaf(params.head_weight);
  b.head_bias = leaf(params.head_bias);
  b.global_classifier = leaf(params.global_classifier);
  for (const auto& w : params.domain_classifiers) b.domain_classifiers.push_back(leaf(w));
  b.temperature = leaf(params.temperature);
  return b;
}

ModelParams collect_grads(const ad::Graph& graph, const BoundParams& bound, const ModelParams& shape) {
  ModelParams g = shape;
  for (std::size_t s = 0; s < g.stages.size(); ++s) {
    g.stages[s].weight = graph.grad(bound.stage_weight[s]);
    g.stages[s].bias = graph.grad(bound.stage_bias[s]);
  }
  g.head_weight = graph.grad(bound.head_weight);
  g.head_bias = graph.grad(bound.head_bias);
  g.global_classifier = graph.grad(bound.global_classifier);
  for (std::size_t k = 0; k < g.domain_classifiers.size(); ++k) {
    g.domain_classifiers[k] = graph.grad(bound.domain_classifiers[k]);
  }
  g.temperature = graph.grad(bound.temperature);
  return g;
}

Tensor batch_images(std::span<const synth::Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("batch_images: empty batch");
  const auto& first = samples.front().image.shape();
  Tensor out(Shape{samples.size(), first.at(0), samples.front().image.size() / first.at(0)});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].image.shape() != first) {
      throw std::invalid_argument("batch_images: image " + std::to_string(i) + " has shape " +
                                  shape_string(samples[i].image.shape()) + ", expected " + shape_string(first));
    }
    const auto src = samples[i].image.values();
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Tensor batch_images(std::span<const synth::Sample> samples, std::span<const std::size_t> order) {
  std::vector<synth::Sample> picked;
  picked.reserve(order.size());
  for (auto i : order) picked.push_back(samples[i]);
  return batch_images(picked);
}

ForwardPass forward(const EncoderConfig& config, const BoundParams& params, Var images,
                    std::span<const ad::RestyleTarget> jitter) {
  if (params.stage_weight.size() != config.num_stages()) {
    throw std::invalid_argument("forward: parameters have " + std::to_string(params.stage_weight.size()) +
                                " stages, config expects " + std::to_string(config.num_stages()));
  }
  for (const auto& t : jitter) {
    if (t.sample >= images.shape().at(0)) {
      throw std::invalid_argument("forward: jitter plan references sample " + std::to_string(t.sample) +
                                  " outside batch of " + std::to_string(images.shape()[0]));
    }
  }
  ForwardPass out;
  Var x = images;
  for (std::size_t s = 0; s < config.num_stages(); ++s) {
    x = ad::relu(ad::channel_mix(x, params.stage_weight[s], params.stage_bias[s]));
    if (s == config.sjm_stage) {
      out.sjm_input = x;
      if (!jitter.empty()) x = ad::restyle(x, jitter, config.style_eps);
      out.sjm_output = x;
    }
  }
  out.embeddings = ad::dense(ad::spatial_mean(x), params.head_weight, params.head_bias);
  out.global_logits = losses::cosine_logits(out.embeddings, params.global_classifier, params.temperature);
  return out;
}

namespace {

constexpr std::size_t kChunk = 64;

}  // namespace

Tensor extract_features(const EncoderConfig& config, const ModelParams& params,
                        std::span<const synth::Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("extract_features: no samples");
  Tensor out(Shape{samples.size(), config.embedding_dim});
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    ad::Graph graph;
    const auto bound = bind(graph, params, false);
    const auto pass = forward(config, bound, graph.constant(batch_images(chunk)));
    const Tensor& emb = pass.embeddings.value();
    std::copy(emb.values().begin(), emb.values().end(), out.row(start).begin());
  }
  return out;
}

Tensor normalize_rows(const Tensor& features) {
  Tensor out = features;
  for (std::size_t r = 0; r < out.dim(0); ++r) {
    auto row = out.row(r);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    if (ss > 0.0) {
      const double inv = 1.0 / std::sqrt(ss);
      for (auto& v : row) v *= inv;
    }
  }
  return out;
}

std::vector<Tensor> stage_features(const EncoderConfig& config, const ModelParams& params,
                                   std::span<const synth::Sample> samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    ad::Graph graph;
    const auto bound = bind(graph, params, false);
    const Tensor& maps = forward(config, bound, graph.constant(batch_images(chunk))).sjm_input.value();
    const Shape one{maps.dim(1), maps.dim(2)};
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto r = maps.row(i);
      out.emplace_back(one, std::vector<double>(r.begin(), r.end()));
    }
  }
  return out;
}

std::vector<std::size_t> plan_half_jitter(std::span<const int> labels) {
  std::map<int, std::size_t> total, taken;
  for (int y : labels) ++total[y];
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (taken[y] < total[y] / 2) {
      ++taken[y];
      out.push_back(i);
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& stem, const EncoderConfig& config, const ModelParams& params) {
  std::vector<io::NamedTensor> tensors;
  params.for_each([&](const std::string& name, const Tensor& t) { tensors.push_back({name, t}); });
  io::Json meta = {{"kind", "model-checkpoint"},
                   {"input_channels", config.input_channels},
                   {"stage_channels", config.stage_channels},
                   {"embedding_dim", config.embedding_dim},
                   {"sjm_stage", config.sjm_stage},
                   {"tau_init", config.tau_init},
                   {"tau_min", config.tau_min},
                   {"style_eps", config.style_eps},
                   {"domain_classifiers", params.domain_classifiers.size()}};
  io::save_tensors(stem, tensors, meta);
}

ModelParams load_checkpoint(const std::filesystem::path& stem, EncoderConfig* config) {
  io::Json meta;
  auto tensors = io::load_tensors(stem, &meta);
  if (meta.value("kind", "") != "model-checkpoint") {
    throw std::runtime_error(stem.string() + ": not a model checkpoint");
  }
  EncoderConfig cfg;
  cfg.input_channels = meta.at("input_channels");
  cfg.stage_channels = meta.at("stage_channels").get<std::vector<std::size_t>>();
  cfg.embedding_dim = meta.at("embedding_dim");
  cfg.sjm_stage = meta.at("sjm_stage");
  cfg.tau_init = meta.at("tau_init");
  cfg.tau_min = meta.at("tau_min");
  cfg.style_eps = meta.at("style_eps");
  const std::size_t domains = meta.at("domain_classifiers");

  ModelParams p;
  p.stages.resize(cfg.num_stages());
  p.domain_classifiers.resize(domains);
  std::map<std::string, Tensor> by_name;
  for (auto& t : tensors) by_name[t.name] = std::move(t.tensor);
  p.for_each([&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error(stem.string() + ": missing tensor " + name);
    t = std::move(it->second);
  });
  if (config) *config = cfg;
  return p;
}

}  // namespace svil::model
