#include "embed.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace ula::embed {

using nlohmann::json;

std::string metric_name(DistanceMetric m) {
  return m == DistanceMetric::L2 ? "l2" : "cosine";
}

DistanceMetric metric_from_name(const std::string& name) {
  if (name == "l2") return DistanceMetric::L2;
  if (name == "cosine") return DistanceMetric::Cosine;
  throw ConfigError("unknown distance metric '" + name + "'");
}

Vec embed_sentence(const lm::Lm& model, const lm::TokenSeq& ids) {
  const Mat h = model.last_hidden(ids);
  return h.colwise().mean().transpose();
}

double distance(const Vec& a, const Vec& b, DistanceMetric metric) {
  if (a.size() != b.size()) throw ConfigError("distance: dimension mismatch");
  if (metric == DistanceMetric::L2) return (a - b).norm();
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("distance: cosine undefined for a zero vector");
  }
  return 1.0 - a.dot(b) / (na * nb);
}

// ---------------------------------------------------------------------------
// index
// ---------------------------------------------------------------------------

void EmbeddingIndex::validate() const {
  if (static_cast<size_t>(vectors.rows()) != ids.size()) {
    throw ConfigError("embedding index: row/id count mismatch");
  }
  if (!vectors.allFinite()) throw NumericError("embedding index: non-finite entry");
}

std::string EmbeddingIndex::to_csv() const {
  validate();
  std::string out = "sentence_id";
  for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
    out += ",v" + std::to_string(j);
  }
  out += '\n';
  for (size_t i = 0; i < ids.size(); ++i) {
    out += std::to_string(ids[i]);
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
      out += ',';
      out += format_double(vectors(static_cast<Eigen::Index>(i), j));
    }
    out += '\n';
  }
  return out;
}

EmbeddingIndex EmbeddingIndex::from_csv(const std::string& text, DistanceMetric metric,
                                        const std::string& model_tag) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sentence_id", 0) != 0) {
    throw ConfigError("embedding csv: missing header");
  }
  std::vector<int64_t> ids;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    int64_t id = 0;
    while (std::getline(ls, cell, ',')) {
      if (first) {
        id = std::stoll(cell);
        first = false;
      } else {
        row.push_back(std::stod(cell));
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ConfigError("embedding csv: ragged rows");
    }
    ids.push_back(id);
    rows.push_back(std::move(row));
  }
  EmbeddingIndex index;
  index.metric = metric;
  index.model_tag = model_tag;
  index.ids = std::move(ids);
  index.vectors.resize(static_cast<Eigen::Index>(rows.size()),
                       rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (size_t j = 0; j < rows[i].size(); ++j) {
      index.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rows[i][j];
    }
  }
  index.validate();
  return index;
}

EmbeddingIndex build_index(const lm::Lm& model,
                           const std::vector<corpus::Sentence>& sentences,
                           const corpus::Tokenizer& tok, DistanceMetric metric,
                           int threads) {
  EmbeddingIndex index;
  index.metric = metric;
  index.model_tag = model.tag();
  index.ids.resize(sentences.size());
  index.vectors.resize(static_cast<Eigen::Index>(sentences.size()), model.config().d_model);
  parallel_for(sentences.size(), threads, [&](size_t i) {
    index.ids[i] = sentences[i].id;
    const Vec e = embed_sentence(model, tok.encode(sentences[i].text));
    index.vectors.row(static_cast<Eigen::Index>(i)) = e.transpose();
  });
  index.validate();
  return index;
}

std::vector<std::pair<int64_t, double>> knn(const EmbeddingIndex& index,
                                            const Vec& query, int64_t k) {
  const int64_t n = static_cast<int64_t>(index.size());
  if (k < 1) throw ConfigError("knn: k must be >= 1");
  if (k > n) {
    throw ConfigError("knn: k=" + std::to_string(k) + " exceeds index size " +
                      std::to_string(n));
  }
  std::vector<std::pair<int64_t, double>> all(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const Vec row = index.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    all[static_cast<size_t>(i)] = {index.ids[static_cast<size_t>(i)],
                                   distance(query, row, index.metric)};
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  all.resize(static_cast<size_t>(k));
  return all;
}

double mean_knn_distance(const EmbeddingIndex& index, const Vec& query, int64_t k) {
  const auto nn = knn(index, query, k);
  double sum = 0.0;
  for (const auto& [id, d] : nn) sum += d;
  return sum / static_cast<double>(nn.size());
}

// ---------------------------------------------------------------------------
// thresholds
// ---------------------------------------------------------------------------

double quantile_r7(std::vector<double> values, double p) {
  if (values.empty()) throw ConfigError("quantile: empty input");
  if (p < 0.0 || p > 1.0) throw ConfigError("quantile: p outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * p;
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

int64_t clamp_k(int64_t requested, size_t index_size) {
  if (requested < 1) throw ConfigError("k must be >= 1");
  const int64_t limit = static_cast<int64_t>(index_size) - 1;
  if (limit < 1) throw ConfigError("index too small for any neighbor query");
  if (requested > limit) {
    log_warn("k=" + std::to_string(requested) + " clamped to " +
             std::to_string(limit) + " (index holds " + std::to_string(index_size) +
             " points)");
    return limit;
  }
  return requested;
}

double compute_tau_dist(const EmbeddingIndex& index, int64_t k, double coefficient) {
  const int64_t n = static_cast<int64_t>(index.size());
  if (k < 1) throw ConfigError("tau_dist: k must be >= 1");
  if (n <= k) {
    throw ConfigError("tau_dist: index size " + std::to_string(n) +
                      " must exceed k=" + std::to_string(k));
  }
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const Vec q = index.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    // k+1 neighbors, then drop the self-match (distance 0 to its own row)
    auto nn = knn(index, q, k + 1);
    double sum = 0.0;
    int64_t used = 0;
    bool self_dropped = false;
    for (const auto& [id, d] : nn) {
      if (!self_dropped && id == index.ids[static_cast<size_t>(i)]) {
        self_dropped = true;
        continue;
      }
      if (used < k) {
        sum += d;
        ++used;
      }
    }
    total += sum / static_cast<double>(used);
  }
  return coefficient * (total / static_cast<double>(n));
}

double compute_tau_prefer(const lm::Lm& theta, const lm::Lm& theta_f,
                          const std::vector<corpus::Sentence>& d_u,
                          const corpus::Tokenizer& tok, int threads) {
  if (d_u.empty()) throw ConfigError("tau_prefer: empty unlearn set");
  std::vector<double> deltas(d_u.size());
  parallel_for(d_u.size(), threads, [&](size_t i) {
    const auto ids = tok.encode(d_u[i].text);
    deltas[i] = theta_f.mean_logprob(ids) - theta.mean_logprob(ids);
  });
  return quantile_r7(std::move(deltas), 0.25);
}

double compute_tau_likelihood(const lm::Lm& theta,
                              const std::vector<corpus::Sentence>& d_u,
                              const corpus::Tokenizer& tok, int threads) {
  if (d_u.empty()) throw ConfigError("tau_likelihood: empty unlearn set");
  std::vector<double> vals(d_u.size());
  parallel_for(d_u.size(), threads, [&](size_t i) {
    vals[i] = theta.mean_logprob(tok.encode(d_u[i].text));
  });
  return quantile_r7(std::move(vals), 0.25);
}

std::string Thresholds::to_json(const std::string& model_tag,
                                const std::string& finetuned_tag,
                                DistanceMetric metric) const {
  json j;
  j["tau_prefer"] = tau_prefer;
  j["tau_likelihood"] = tau_likelihood;
  j["tau_dist"] = tau_dist;
  j["coefficient"] = coefficient;
  j["k"] = k;
  j["quantile"] = "R-7";
  j["distance_metric"] = metric_name(metric);
  j["base_model"] = model_tag;
  j["finetuned_model"] = finetuned_tag;
  return j.dump(2);
}

Thresholds Thresholds::from_json(const std::string& text) {
  json j = json::parse(text);
  Thresholds t;
  t.tau_prefer = j.at("tau_prefer").get<double>();
  t.tau_likelihood = j.at("tau_likelihood").get<double>();
  t.tau_dist = j.at("tau_dist").get<double>();
  t.coefficient = j.at("coefficient").get<double>();
  t.k = j.at("k").get<int64_t>();
  return t;
}

}  // namespace ula::embed
