#pragma once

#include <span>
#include <vector>

#include "svil/autodiff.hpp"

namespace svil::losses {

inline constexpr double kDefaultMargin = 0.3;
inline constexpr double kDefaultLambda = 0.1;

// cos(W_j, f_i) / tau
ad::Var cosine_logits(ad::Var features, ad::Var weights, ad::Var tau);

// Cross-entropy over cosine logits, averaged over rows.
ad::Var cosine_ce(ad::Var features, std::span<const int> labels, ad::Var weights, ad::Var tau);

// Batch-hard triplet on Euclidean distances.
ad::Var triplet_batch_hard(ad::Var features, std::span<const int> labels, double margin = kDefaultMargin);

// Global head over the pooled label space plus triplet over the whole batch.
ad::Var agnostic_loss(ad::Var features, std::span<const int> global_labels, ad::Var global_weights,
                      ad::Var tau, double margin = kDefaultMargin);

// One source domain's slice of the batch with its own head and local labels.
struct DomainTerm {
  ad::Var features;
  std::vector<int> labels;
  ad::Var weights;
};

// Single-domain term: CE against the domain head + triplet within the domain.
ad::Var domain_loss(const DomainTerm& term, ad::Var tau, double margin = kDefaultMargin);

// Mean of domain_loss over the given domains.
ad::Var specific_loss(std::span<const DomainTerm> terms, ad::Var tau, double margin = kDefaultMargin);

ad::Var total_loss(ad::Var agnostic, ad::Var specific, double lambda);
double total_loss(double agnostic, double specific, double lambda);

struct LossBreakdown {
  double agnostic_ce = 0.0;
  double agnostic_triplet = 0.0;
  std::vector<double> specific_ce;       // per domain in the batch
  std::vector<double> specific_triplet;  // per domain in the batch
  double agnostic = 0.0;
  double specific = 0.0;
  double total = 0.0;
  double lambda = kDefaultLambda;
};

// Evaluates every component on an existing graph. `total_var` (optional)
// receives the differentiable total.
LossBreakdown compute_all(ad::Var features, std::span<const int> global_labels, ad::Var global_weights,
                          std::span<const DomainTerm> terms, ad::Var tau, double lambda, double margin,
                          ad::Var* total_var);

}  // namespace svil::losses
