#include "svil/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include "svil/sjm.hpp"
#include "svil/snapshot.hpp"

namespace svil::eval {

double EvalResult::rank(std::size_t k) const {
  if (k == 0 || k > cmc.size()) throw std::out_of_range("EvalResult::rank: k=" + std::to_string(k));
  return cmc[k - 1];
}

namespace {

template <typename Range>
std::optional<double> ap_of(const Range& ranked_relevance) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked_relevance.size(); ++i) {
    if (!ranked_relevance[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

}  // namespace

std::optional<double> average_precision(std::span<const bool> ranked_relevance) { return ap_of(ranked_relevance); }

namespace {

void check_side(const Tensor& emb, const RetrievalMeta& meta, const char* side) {
  if (emb.rank() != 2) throw std::invalid_argument(std::string("evaluate: ") + side + " embeddings must be [n, d]");
  if (meta.identity.size() != emb.dim(0) || meta.camera.size() != emb.dim(0))
    throw std::invalid_argument(std::string("evaluate: ") + side + " metadata does not match embedding rows");
  for (std::size_t i = 0; i < emb.dim(0); ++i) {
    double ss = 0.0;
    for (double v : emb.row(i)) ss += v * v;
    if (std::abs(ss - 1.0) > 1e-6)
      throw std::invalid_argument(std::string("evaluate: ") + side + " row " + std::to_string(i) + " is not unit length");
  }
}

}  // namespace

EvalResult evaluate(const Tensor& query, const RetrievalMeta& query_meta, const Tensor& gallery,
                    const RetrievalMeta& gallery_meta, std::size_t max_rank) {
  check_side(query, query_meta, "query");
  check_side(gallery, gallery_meta, "gallery");
  if (query.dim(1) != gallery.dim(1)) throw std::invalid_argument("evaluate: embedding width mismatch");
  if (max_rank == 0) throw std::invalid_argument("evaluate: max_rank must be positive");

  EvalResult out;
  out.cmc.assign(max_rank, 0.0);
  const std::size_t ng = gallery.dim(0);
  std::vector<double> sim(ng);
  std::vector<std::size_t> order(ng);
  std::vector<bool> relevance;
  for (std::size_t q = 0; q < query.dim(0); ++q) {
    const auto qv = query.row(q);
    for (std::size_t g = 0; g < ng; ++g) {
      const auto gv = gallery.row(g);
      sim[g] = std::inner_product(qv.begin(), qv.end(), gv.begin(), 0.0);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });

    const int qid = query_meta.identity[q];
    const int qcam = query_meta.camera[q];
    relevance.clear();
    for (std::size_t g : order) {
      const bool same_id = gallery_meta.identity[g] == qid;
      if (same_id && gallery_meta.camera[g] == qcam) continue;
      relevance.push_back(same_id);
    }
    const auto ap = ap_of(relevance);
    if (!ap) {
      ++out.excluded_queries;
      continue;
    }
    out.per_query_ap.push_back(*ap);
    out.evaluated_queries.push_back(q);
    const auto first = static_cast<std::size_t>(std::find(relevance.begin(), relevance.end(), true) - relevance.begin());
    for (std::size_t k = first; k < max_rank; ++k) out.cmc[k] += 1.0;
  }
  const auto n = static_cast<double>(out.per_query_ap.size());
  if (n > 0) {
    out.mAP = std::accumulate(out.per_query_ap.begin(), out.per_query_ap.end(), 0.0) / n;
    for (double& c : out.cmc) c /= n;
  }
  return out;
}

Tensor domain_gap(std::span<const Tensor> sets) {
  if (sets.size() < 2) throw std::invalid_argument("domain_gap: need at least two domains");
  const std::size_t k = sets.size();
  Tensor table(Shape{k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      const double d = sjm::mmd2(sets[i], sets[j]);
      table[i * k + j] = d;
      table[j * k + i] = d;
    }
  return table;
}

double mean_off_diagonal(const Tensor& table) {
  if (table.rank() != 2 || table.dim(0) != table.dim(1) || table.dim(0) < 2)
    throw std::invalid_argument("mean_off_diagonal: expected a square table of size >= 2");
  const std::size_t k = table.dim(0);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j) s += table[i * k + j];
  return s / static_cast<double>(k * (k - 1));
}

RetrievalSplit query_gallery_split(std::span<const synth::Sample> samples) {
  RetrievalSplit split;
  std::set<std::pair<int, int>> seen;
  for (const auto& s : samples) {
    if (seen.insert({s.identity_global, s.camera_id}).second) split.query.push_back(s);
    else split.gallery.push_back(s);
  }
  if (split.query.empty() || split.gallery.empty())
    throw std::invalid_argument("query_gallery_split: need at least one query and one gallery image");
  return split;
}

RetrievalMeta meta_of(std::span<const synth::Sample> samples) {
  RetrievalMeta meta;
  for (const auto& s : samples) {
    meta.identity.push_back(s.identity_global);
    meta.camera.push_back(s.camera_id);
  }
  return meta;
}

EvalResult evaluate_model(const model::EncoderConfig& config, const model::ModelParams& params,
                          const RetrievalSplit& split, std::size_t max_rank) {
  const Tensor q = model::normalize_rows(model::extract_features(config, params, split.query));
  const Tensor g = model::normalize_rows(model::extract_features(config, params, split.gallery));
  return evaluate(q, meta_of(split.query), g, meta_of(split.gallery), max_rank);
}

void export_embeddings(const std::filesystem::path& stem, const Tensor& embeddings,
                       std::span<const synth::Sample> samples) {
  if (embeddings.rank() != 2 || embeddings.dim(0) != samples.size())
    throw std::invalid_argument("export_embeddings: one embedding row per sample required");
  io::Json rows = io::Json::array();
  for (const auto& s : samples)
    rows.push_back({{"identity_global", s.identity_global},
                    {"identity_local", s.identity_local},
                    {"domain_id", s.domain_id},
                    {"camera_id", s.camera_id}});
  io::save_tensors(stem, std::vector<io::NamedTensor>{{"embeddings", embeddings}},
                   {{"kind", "embeddings"}, {"rows", rows}});
}

}  // namespace svil::eval
