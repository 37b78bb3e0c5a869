#include "svil/metaloop.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

namespace svil::train {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

std::vector<Tensor> copy_encoder(const model::ModelParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : p.encoder_tensors()) out.push_back(*t);
  return out;
}

void assign_encoder(model::ModelParams& p, std::vector<Tensor> values) {
  auto dst = p.encoder_tensors();
  if (dst.size() != values.size()) throw std::logic_error("assign_encoder: tensor count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = std::move(values[i]);
}

void clamp_temperature(model::ModelParams& p, const model::EncoderConfig& config) {
  p.temperature[0] = std::max(p.temperature[0], config.tau_min);
}

void axpy(Tensor& y, const Tensor& x, double a) {
  if (y.shape() != x.shape()) throw std::invalid_argument("sgd: shape " + shape_string(y.shape()) + " vs " + shape_string(x.shape()));
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

std::vector<int> present_domains(const Batch& batch) {
  std::set<int> s(batch.domains.begin(), batch.domains.end());
  return {s.begin(), s.end()};
}

std::vector<std::size_t> rows_of(const Batch& batch, int domain) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.domains[i] == domain) rows.push_back(i);
  return rows;
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  Tensor out(Shape{rows.size(), m.row_size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = m.row(rows[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

void MetaStepConfig::validate() const {
  require(inner_lr > 0.0, "inner_lr must be positive");
  require(outer_lr > 0.0, "outer_lr must be positive");
  require(meta_test_weight >= 0.0, "meta_test_weight must be non-negative");
  require(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
  require(momentum >= 0.0 && momentum <= 1.0, "momentum must lie in [0, 1]");
  require(margin >= 0.0, "margin must be non-negative");
  require(identities_per_domain >= 2, "identities_per_domain must be at least 2");
  require(images_per_identity >= 1, "images_per_identity must be positive");
  require(first_order, "first_order: only the first-order meta gradient is implemented");
}

std::vector<synth::Sample> SourceSet::all_samples() const {
  std::vector<synth::Sample> out;
  for (const auto& d : domains) out.insert(out.end(), d.begin(), d.end());
  return out;
}

std::vector<int> SourceSet::all_global_labels() const {
  std::vector<int> out;
  for (const auto& d : global_labels) out.insert(out.end(), d.begin(), d.end());
  return out;
}

SourceSet make_source_set(std::vector<std::vector<synth::Sample>> domains) {
  if (domains.empty()) throw std::invalid_argument("make_source_set: no source domains");
  SourceSet s;
  std::set<int> globals;
  for (const auto& d : domains) {
    if (d.empty()) throw std::invalid_argument("make_source_set: empty source domain");
    for (const auto& x : d) globals.insert(x.identity_global);
  }
  std::map<int, int> dense_global;
  for (int g : globals) dense_global.emplace(g, static_cast<int>(dense_global.size()));
  s.global_classes = dense_global.size();
  s.domain_of.assign(s.global_classes, -1);

  for (std::size_t k = 0; k < domains.size(); ++k) {
    std::set<int> locals;
    for (const auto& x : domains[k]) locals.insert(x.identity_local);
    std::map<int, int> dense_local;
    for (int l : locals) dense_local.emplace(l, static_cast<int>(dense_local.size()));
    std::vector<int> gl, ll;
    for (const auto& x : domains[k]) {
      const int g = dense_global.at(x.identity_global);
      gl.push_back(g);
      ll.push_back(dense_local.at(x.identity_local));
      if (s.domain_of[static_cast<std::size_t>(g)] < 0) s.domain_of[static_cast<std::size_t>(g)] = static_cast<int>(k);
    }
    s.global_labels.push_back(std::move(gl));
    s.local_labels.push_back(std::move(ll));
    s.domain_classes.push_back(dense_local.size());
  }
  s.domains = std::move(domains);
  return s;
}

MetaSplit split_meta_domains(std::size_t domains, CounterRng& rng) {
  if (domains < 2) throw std::invalid_argument("split_meta_domains: need at least two domains (disable maml)");
  MetaSplit split;
  split.test = static_cast<int>(rng.below(domains));
  for (std::size_t k = 0; k < domains; ++k)
    if (static_cast<int>(k) != split.test) split.train.push_back(static_cast<int>(k));
  return split;
}

std::vector<Tensor> sgd_step(std::span<const Tensor> theta, std::span<const Tensor> grads, double lr) {
  if (theta.size() != grads.size()) throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  std::vector<Tensor> out(theta.begin(), theta.end());
  for (std::size_t i = 0; i < out.size(); ++i) axpy(out[i], grads[i], -lr);
  return out;
}

std::vector<Tensor> meta_optimize(std::span<const Tensor> theta, std::span<const Tensor> grads_mtr,
                                  std::span<const Tensor> grads_mte, double beta, double gamma) {
  if (theta.size() != grads_mtr.size() || theta.size() != grads_mte.size())
    throw std::invalid_argument("meta_optimize: parameter/gradient count mismatch");
  std::vector<Tensor> out(theta.begin(), theta.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    axpy(out[i], grads_mtr[i], -gamma);
    axpy(out[i], grads_mte[i], -gamma * beta);
  }
  return out;
}

Memories init_memories(const model::EncoderConfig& config, const model::ModelParams& params, const SourceSet& sources,
                       double momentum) {
  Memories m;
  const auto samples = sources.all_samples();
  const auto labels = sources.all_global_labels();
  m.style = sjm::style_memory_init(config, params, samples, labels, sources.global_classes, momentum);
  m.similarity = sjm::SimilarityMemory(sources.global_classes);
  m.distance = sjm::DomainDistanceMemory(sources.num_domains());
  return m;
}

void Batch::append(const Batch& other) {
  samples.insert(samples.end(), other.samples.begin(), other.samples.end());
  global_labels.insert(global_labels.end(), other.global_labels.begin(), other.global_labels.end());
  local_labels.insert(local_labels.end(), other.local_labels.begin(), other.local_labels.end());
  domains.insert(domains.end(), other.domains.begin(), other.domains.end());
}

Batch sample_domain_batch(const SourceSet& sources, int domain, std::size_t P, std::size_t K, CounterRng& rng) {
  if (domain < 0 || static_cast<std::size_t>(domain) >= sources.num_domains())
    throw std::out_of_range("sample_domain_batch: unknown domain " + std::to_string(domain));
  const auto d = static_cast<std::size_t>(domain);
  Batch b;
  for (std::size_t i : synth::pk_sample_batch(sources.local_labels[d], P, K, rng)) {
    b.samples.push_back(sources.domains[d][i]);
    b.global_labels.push_back(sources.global_labels[d][i]);
    b.local_labels.push_back(sources.local_labels[d][i]);
    b.domains.push_back(domain);
  }
  return b;
}

std::vector<ad::RestyleTarget> plan_jitter(const MetaStepConfig& step, const Batch& batch,
                                           std::span<const std::size_t> flagged, const Memories& memories,
                                           std::span<const int> domain_of) {
  std::vector<ad::RestyleTarget> targets;
  if (flagged.empty()) return targets;
  if (!memories.initialized()) throw std::logic_error("plan_jitter: memories not initialized");
  std::map<int, sjm::StyleStats> per_identity;
  for (std::size_t i : flagged) {
    const int id = batch.global_labels.at(i);
    auto it = per_identity.find(id);
    if (it == per_identity.end()) {
      const auto factor = sjm::compute_beta(static_cast<std::size_t>(id), memories.similarity, memories.distance,
                                            domain_of, step.cross_domain);
      const auto alpha = sjm::id_weight(factor, step.weight_mode);
      it = per_identity.emplace(id, sjm::synthesize_style(alpha, memories.style)).first;
    }
    targets.push_back({i, it->second.mu, it->second.sigma});
  }
  return targets;
}

MetaTrainResult meta_train_step(const MetaStepConfig& step, const model::EncoderConfig& config,
                                const model::ModelParams& params, const Batch& batch, Memories& memories,
                                std::span<const int> domain_of, double lr, std::uint64_t iteration,
                                const Hooks* hooks) {
  if (batch.size() == 0) throw std::invalid_argument("meta_train_step: empty batch");
  if (step.sjm && !memories.initialized()) throw std::logic_error("meta_train_step: memories not initialized");
  MetaTrainResult out;
  if (step.sjm) out.jittered = model::plan_half_jitter(batch.global_labels);
  if (hooks && hooks->before_jitter) hooks->before_jitter(iteration, memories);
  const auto targets = plan_jitter(step, batch, out.jittered, memories, domain_of);

  ad::Graph graph;
  const auto bound = model::bind(graph, params, true);
  const auto pass = model::forward(config, bound, graph.constant(model::batch_images(batch.samples)), targets);

  const auto domains = present_domains(batch);
  std::vector<losses::DomainTerm> terms;
  for (int d : domains) {
    if (static_cast<std::size_t>(d) >= bound.domain_classifiers.size())
      throw std::out_of_range("meta_train_step: no classifier for domain " + std::to_string(d));
    const auto rows = rows_of(batch, d);
    losses::DomainTerm term;
    term.features = ad::select_rows(pass.embeddings, rows);
    for (std::size_t r : rows) term.labels.push_back(batch.local_labels[r]);
    term.weights = bound.domain_classifiers[static_cast<std::size_t>(d)];
    terms.push_back(std::move(term));
  }
  ad::Var total;
  out.losses = losses::compute_all(pass.embeddings, batch.global_labels, bound.global_classifier, terms,
                                   bound.temperature, step.lambda, step.margin, &total);
  graph.backward(total);
  out.grads = model::collect_grads(graph, bound, params);

  if (step.sjm) {
    const Tensor& maps = pass.sjm_input.value();
    const Shape one{maps.dim(1), maps.dim(2)};
    std::vector<std::size_t> sources;
    if (step.style_update == sjm::StyleUpdateScope::kJittered) {
      sources = out.jittered;
    } else {
      for (std::size_t i = 0; i < batch.size(); ++i) sources.push_back(i);
    }
    std::map<int, std::vector<sjm::StyleStats>> grouped;
    for (std::size_t i : sources) {
      const auto r = maps.row(i);
      grouped[batch.global_labels[i]].push_back(
          sjm::style_stats(Tensor(one, std::vector<double>(r.begin(), r.end())), config.style_eps));
    }
    memories.style.update(grouped);
  }
  if (hooks && hooks->after_style_update) hooks->after_style_update(iteration, memories);

  out.updated = params;
  {
    auto dst = out.updated.encoder_tensors();
    auto grads = out.grads.encoder_tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) axpy(*dst[i], *grads[i], -lr);
  }
  axpy(out.updated.global_classifier, out.grads.global_classifier, -lr);
  for (int d : domains) {
    const auto k = static_cast<std::size_t>(d);
    axpy(out.updated.domain_classifiers[k], out.grads.domain_classifiers[k], -lr);
  }
  clamp_temperature(out.updated, config);

  if (step.sjm) {
    memories.similarity.update(sjm::similarity_from_weights(out.updated.global_classifier), step.momentum);
    const std::set<std::size_t> flagged(out.jittered.begin(), out.jittered.end());
    const Tensor& emb = pass.embeddings.value();
    std::map<int, Tensor> sets;
    for (int d : domains) {
      std::vector<std::size_t> rows;
      for (std::size_t r : rows_of(batch, d))
        if (!flagged.count(r)) rows.push_back(r);
      if (!rows.empty()) sets.emplace(d, gather_rows(emb, rows));
    }
    memories.distance.update(sets, step.momentum);
  }
  if (hooks && hooks->after_relation_update) hooks->after_relation_update(iteration, memories);
  return out;
}

MetaTestResult meta_test_step(const MetaStepConfig& step, const model::EncoderConfig& config,
                              const model::ModelParams& params, const Batch& batch, int domain) {
  if (domain < 0 || static_cast<std::size_t>(domain) >= params.domain_classifiers.size())
    throw std::out_of_range("meta_test_step: no classifier for domain " + std::to_string(domain));
  ad::Graph graph;
  const auto bound = model::bind(graph, params, true);
  const auto pass = model::forward(config, bound, graph.constant(model::batch_images(batch.samples)));
  const auto rows = rows_of(batch, domain);
  if (rows.size() != batch.size()) throw std::invalid_argument("meta_test_step: batch mixes domains");
  const auto weights = bound.domain_classifiers[static_cast<std::size_t>(domain)];
  ad::Var ce = losses::cosine_ce(pass.embeddings, batch.local_labels, weights, bound.temperature);
  ad::Var tri = losses::triplet_batch_hard(pass.embeddings, batch.local_labels, step.margin);
  ad::Var loss = ad::add(ce, tri);
  graph.backward(loss);
  MetaTestResult out;
  out.loss = loss.value().item();
  out.ce = ce.value().item();
  out.triplet = tri.value().item();
  out.grads = model::collect_grads(graph, bound, params);
  return out;
}

void TrainConfig::validate(const SourceSet& sources) const {
  step.validate();
  require(epochs >= 1, "epochs must be positive");
  require(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
  require(sources.num_domains() >= 1, "at least one source domain is required");
  if (step.maml) require(sources.num_domains() >= 2, "maml requires at least two source domains");
  for (std::size_t k = 0; k < sources.num_domains(); ++k)
    require(sources.domain_classes[k] >= step.identities_per_domain,
            "source domain " + std::to_string(k) + " has fewer identities than identities_per_domain");
}

double lr_scale_at(const TrainConfig& config, std::size_t epoch) {
  double s = 1.0;
  for (std::size_t m : config.milestones)
    if (epoch >= m) s *= config.decay;
  return s;
}

std::size_t iterations_per_epoch(const TrainConfig& config, const SourceSet& sources) {
  if (config.iterations_per_epoch > 0) return config.iterations_per_epoch;
  std::size_t largest = 0;
  for (const auto& d : sources.domains) largest = std::max(largest, d.size());
  const std::size_t batch = config.step.identities_per_domain * config.step.images_per_identity;
  return std::max<std::size_t>(1, (largest + batch - 1) / batch);
}

TrainResult run_training(const TrainConfig& config, const model::EncoderConfig& encoder, const SourceSet& sources,
                         const eval::RetrievalSplit* target, const Observer* observer) {
  config.validate(sources);
  encoder.validate(sources.domains.front().front().image.dim(1));
  const auto& step = config.step;
  const CounterRng root(config.seed, fnv1a64("train"));
  const Hooks* hooks = observer ? &observer->hooks : nullptr;

  TrainResult result;
  result.params = model::init_params(encoder, sources.global_classes, sources.domain_classes, root.substream("init"));
  if (step.sjm) result.memories = init_memories(encoder, result.params, sources, step.momentum);
  model::ModelParams& params = result.params;

  const std::size_t per_epoch = iterations_per_epoch(config, sources);
  const std::size_t K = sources.num_domains();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double scale = lr_scale_at(config, epoch);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < per_epoch; ++i) {
      const std::uint64_t it = epoch * per_epoch + i;
      CounterRng irng = root.substream("iteration", it);
      IterationRecord rec;
      rec.iteration = it;
      rec.epoch = epoch + 1;
      rec.lr_scale = scale;

      std::vector<Batch> per_domain;
      for (std::size_t d = 0; d < K; ++d) {
        CounterRng brng = irng.substream("batch", d);
        per_domain.push_back(sample_domain_batch(sources, static_cast<int>(d), step.identities_per_domain,
                                                 step.images_per_identity, brng));
      }

      if (step.maml) {
        CounterRng srng = irng.substream("split");
        rec.split = split_meta_domains(K, srng);
        Batch train_batch;
        for (int d : rec.split.train) train_batch.append(per_domain[static_cast<std::size_t>(d)]);
        const auto mtr = meta_train_step(step, encoder, params, train_batch, result.memories, sources.domain_of,
                                         step.inner_lr * scale, it, hooks);
        const int t = rec.split.test;
        const auto mte = meta_test_step(step, encoder, mtr.updated, per_domain[static_cast<std::size_t>(t)], t);

        model::ModelParams next = mtr.updated;
        assign_encoder(next, meta_optimize(copy_encoder(params), copy_encoder(mtr.grads), copy_encoder(mte.grads),
                                           step.meta_test_weight, step.outer_lr * scale));
        axpy(next.domain_classifiers[static_cast<std::size_t>(t)],
             mte.grads.domain_classifiers[static_cast<std::size_t>(t)], -step.meta_test_weight * scale);
        clamp_temperature(next, encoder);
        params = std::move(next);
        rec.meta_train = mtr.losses;
        rec.meta_test_loss = mte.loss;
      } else {
        Batch all;
        for (const auto& b : per_domain) all.append(b);
        for (std::size_t d = 0; d < K; ++d) rec.split.train.push_back(static_cast<int>(d));
        auto mtr = meta_train_step(step, encoder, params, all, result.memories, sources.domain_of,
                                   step.outer_lr * scale, it, hooks);
        params = std::move(mtr.updated);
        rec.meta_train = mtr.losses;
      }
      if (!params.all_finite()) throw std::runtime_error("run_training: non-finite parameters at iteration " + std::to_string(it));

      loss_sum += rec.meta_train.total;
      rec.temperature = params.temperature[0];
      if (step.sjm) {
        rec.style_norm = frobenius(result.memories.style.mu_bank());
        rec.similarity_norm = frobenius(result.memories.similarity.matrix());
        rec.distance_norm = frobenius(result.memories.distance.matrix());
      }
      if (observer && observer->on_iteration) observer->on_iteration(rec);
    }

    EpochRecord er;
    er.epoch = epoch + 1;
    er.mean_total_loss = loss_sum / static_cast<double>(per_epoch);
    const bool last = epoch + 1 == config.epochs;
    if (target && config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last))
      er.target = eval::evaluate_model(encoder, params, *target);
    if (observer && observer->on_epoch) observer->on_epoch(er);
    if (observer && observer->on_epoch_params) observer->on_epoch_params(epoch + 1, params);
    result.epochs.push_back(std::move(er));
  }
  return result;
}

}  // namespace svil::train
