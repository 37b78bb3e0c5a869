#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "svil/model.hpp"
#include "svil/synthgen.hpp"
#include "svil/tensor.hpp"

namespace svil::eval {

inline constexpr std::size_t kDefaultMaxRank = 20;

// Identity/camera labels of one side of a retrieval problem.
struct RetrievalMeta {
  std::vector<int> identity;
  std::vector<int> camera;
};

struct EvalResult {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = Rank-k accuracy
  std::vector<double> per_query_ap;
  std::vector<std::size_t> evaluated_queries;  // query index of each AP entry
  std::size_t excluded_queries = 0;            // no valid positive after filtering

  double rank(std::size_t k) const;
};

// Mean precision at each relevant position. Empty when nothing is relevant.
std::optional<double> average_precision(std::span<const bool> ranked_relevance);

// Rows of both matrices are L2-normalized embeddings. Gallery items sharing
// both identity and camera with the query are dropped for that query; ties in
// similarity are broken by gallery index.
EvalResult evaluate(const Tensor& query, const RetrievalMeta& query_meta, const Tensor& gallery,
                    const RetrievalMeta& gallery_meta, std::size_t max_rank = kDefaultMaxRank);

// MMD^2 between every pair of embedding sets; zero diagonal.
Tensor domain_gap(std::span<const Tensor> sets);

// The first image of every (identity, camera) pair becomes a query, the rest
// form the gallery.
struct RetrievalSplit {
  std::vector<synth::Sample> query;
  std::vector<synth::Sample> gallery;
};
RetrievalSplit query_gallery_split(std::span<const synth::Sample> samples);

RetrievalMeta meta_of(std::span<const synth::Sample> samples);

// Extracts, normalizes and evaluates.
EvalResult evaluate_model(const model::EncoderConfig& config, const model::ModelParams& params,
                          const RetrievalSplit& split, std::size_t max_rank = kDefaultMaxRank);

// Mean of the off-diagonal entries of a square table.
double mean_off_diagonal(const Tensor& table);

// Embeddings + per-row metadata as manifest + float64 blob.
void export_embeddings(const std::filesystem::path& stem, const Tensor& embeddings,
                       std::span<const synth::Sample> samples);

}  // namespace svil::eval
