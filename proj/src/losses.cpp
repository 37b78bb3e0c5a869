#include "svil/losses.hpp"

#include <set>
#include <stdexcept>

namespace svil::losses {

using ad::Var;

Var cosine_logits(Var features, Var weights, Var tau) {
  if (!(tau.value().item() > 0.0)) throw std::invalid_argument("cosine_logits: temperature must be positive");
  return ad::div_scalar(ad::matmul_nt(ad::l2_normalize_rows(features), ad::l2_normalize_rows(weights)), tau);
}

Var cosine_ce(Var features, std::span<const int> labels, Var weights, Var tau) {
  return ad::cross_entropy(cosine_logits(features, weights, tau), labels);
}

Var triplet_batch_hard(Var features, std::span<const int> labels, double margin) {
  std::set<int> ids(labels.begin(), labels.end());
  if (ids.size() < 2) throw std::invalid_argument("triplet_batch_hard: batch needs at least two identities");
  return ad::batch_hard_triplet(ad::pairwise_distance(features), labels, margin);
}

Var agnostic_loss(Var features, std::span<const int> global_labels, Var global_weights, Var tau, double margin) {
  return ad::add(cosine_ce(features, global_labels, global_weights, tau),
                 triplet_batch_hard(features, global_labels, margin));
}

Var domain_loss(const DomainTerm& term, Var tau, double margin) {
  if (!term.weights.valid()) throw std::invalid_argument("domain_loss: missing domain classifier");
  return ad::add(cosine_ce(term.features, term.labels, term.weights, tau),
                 triplet_batch_hard(term.features, term.labels, margin));
}

Var specific_loss(std::span<const DomainTerm> terms, Var tau, double margin) {
  if (terms.empty()) throw std::invalid_argument("specific_loss: no domains");
  Var acc = domain_loss(terms[0], tau, margin);
  for (std::size_t k = 1; k < terms.size(); ++k) acc = ad::add(acc, domain_loss(terms[k], tau, margin));
  return ad::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

Var total_loss(Var agnostic, Var specific, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("total_loss: lambda outside [0, 1]");
  return ad::add(ad::scale(agnostic, lambda), ad::scale(specific, 1.0 - lambda));
}

double total_loss(double agnostic, double specific, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("total_loss: lambda outside [0, 1]");
  return lambda * agnostic + (1.0 - lambda) * specific;
}

LossBreakdown compute_all(Var features, std::span<const int> global_labels, Var global_weights,
                          std::span<const DomainTerm> terms, Var tau, double lambda, double margin,
                          Var* total_var) {
  LossBreakdown out;
  out.lambda = lambda;
  Var agno_ce = cosine_ce(features, global_labels, global_weights, tau);
  Var agno_tri = triplet_batch_hard(features, global_labels, margin);
  Var agno = ad::add(agno_ce, agno_tri);
  out.agnostic_ce = agno_ce.value().item();
  out.agnostic_triplet = agno_tri.value().item();
  out.agnostic = agno.value().item();

  if (terms.empty()) throw std::invalid_argument("compute_all: no domain terms");
  Var spec_sum;
  for (const auto& term : terms) {
    if (!term.weights.valid()) throw std::invalid_argument("compute_all: missing domain classifier");
    Var ce = cosine_ce(term.features, term.labels, term.weights, tau);
    Var tri = triplet_batch_hard(term.features, term.labels, margin);
    out.specific_ce.push_back(ce.value().item());
    out.specific_triplet.push_back(tri.value().item());
    Var both = ad::add(ce, tri);
    spec_sum = spec_sum.valid() ? ad::add(spec_sum, both) : both;
  }
  Var spec = ad::scale(spec_sum, 1.0 / static_cast<double>(terms.size()));
  out.specific = spec.value().item();
  Var total = total_loss(agno, spec, lambda);
  out.total = total.value().item();
  if (total_var) *total_var = total;
  return out;
}

}  // namespace svil::losses
