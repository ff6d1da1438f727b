#include "pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <utility>

#include "json.hpp"

namespace ula::pipeline {

using metrics::MetricKind;
using metrics::ScoreTable;
using model::ModelCheckpoint;
using nlohmann::json;

// -----------------------------------------------------------------------------
// config sections
// -----------------------------------------------------------------------------

EvalSection::EvalSection() : metric_kinds(metrics::all_metrics()) {}

void EvalSection::validate() const {
  if (sample_size < 2) throw ConfigError("eval.sample_size: must be >= 2");
  if (repeats < 1) throw ConfigError("eval.repeats: must be >= 1");
  if (knn_k < 1) throw ConfigError("eval.knn_k: must be >= 1");
  if (metric_kinds.empty()) throw ConfigError("eval.metrics: at least one required");
}

std::string EvalSection::to_json() const {
  json j;
  j["sample_size"] = sample_size;
  j["repeats"] = repeats;
  j["knn_k"] = knn_k;
  j["seed"] = seed;
  json names = json::array();
  for (MetricKind m : metric_kinds) names.push_back(metrics::metric_name(m));
  j["metrics"] = std::move(names);
  return j.dump(2);
}

EvalSection EvalSection::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("eval section: bad json: ") + e.what());
  }
  try {
    EvalSection s;
    s.sample_size = j.value("sample_size", s.sample_size);
    s.repeats = j.value("repeats", s.repeats);
    s.knn_k = j.value("knn_k", s.knn_k);
    s.seed = j.value("seed", s.seed);
    if (j.contains("metrics")) {
      s.metric_kinds.clear();
      for (const auto& name : j["metrics"]) {
        s.metric_kinds.push_back(metrics::metric_from_name(name.get<std::string>()));
      }
    }
    return s;
  } catch (const json::exception& e) {
    throw IoError(std::string("eval section: mistyped field: ") + e.what());
  }
}

std::string EvalSection::digest() const { return digest_hex(to_json()); }

void UnlearnSection::validate() const {
  if (method == "npo") {
    npo.validate();
  } else if (method == "rmu") {
    rmu.validate();
  } else {
    throw ConfigError("unlearn.method: must be 'npo' or 'rmu', got '" + method + "'");
  }
}

std::string UnlearnSection::to_json() const {
  json j;
  j["method"] = method;
  if (method == "rmu") {
    j["rmu"] = json::parse(rmu.to_json());
  } else {
    j["npo"] = json::parse(npo.to_json());
  }
  return j.dump(2);
}

UnlearnSection UnlearnSection::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("unlearn section: bad json: ") + e.what());
  }
  UnlearnSection s;
  s.method = j.value("method", s.method);
  if (j.contains("npo")) s.npo = unlearn::NpoConfig::from_json(j["npo"].dump());
  if (j.contains("rmu")) s.rmu = unlearn::RmuConfig::from_json(j["rmu"].dump());
  return s;
}

std::string UnlearnSection::digest() const { return digest_hex(to_json()); }

// -----------------------------------------------------------------------------
// RunConfig
// -----------------------------------------------------------------------------

namespace {

uint64_t derive_seed(uint64_t global, const std::string& stage) {
  return Rng::mix(global, fnv1a64(stage));
}

// true when obj[section] exists and carries an explicit key
bool has_key(const json& j, const std::string& section, const std::string& key) {
  return j.contains(section) && j[section].is_object() && j[section].contains(key);
}

}  // namespace

void RunConfig::validate() const {
  if (version != 1) {
    throw ConfigError("version: expected 1, got " + std::to_string(version));
  }
  if (corpus_manifest.empty()) throw ConfigError("corpus_manifest: required");
  if (!file_exists(corpus_manifest)) {
    throw ConfigError("corpus_manifest: path '" + corpus_manifest + "' does not exist");
  }
  if (output_dir.empty()) throw ConfigError("output_dir: required");
  model.validate();
  pretrain.validate();
  finetune.validate();
  unlearn.validate();
  metric_cfg.validate();
  psg.validate();
  eval.validate();
}

std::string RunConfig::to_json() const {
  json j;
  j["version"] = version;
  j["corpus_manifest"] = corpus_manifest;
  j["seed"] = seed;
  j["model"] = json::parse(model.to_json());
  j["pretrain"] = json::parse(pretrain.to_json());
  j["finetune"] = json::parse(finetune.to_json());
  j["unlearn"] = json::parse(unlearn.to_json());
  j["metrics"] = json::parse(metric_cfg.to_json());
  j["psg"] = json::parse(psg.to_json());
  j["eval"] = json::parse(eval.to_json());
  return j.dump(2);
}

void RunConfig::override_seed(uint64_t global) {
  seed = global;
  model.seed = derive_seed(global, "train.init");
  pretrain.seed = derive_seed(global, "pretrain");
  finetune.seed = derive_seed(global, "finetune");
  unlearn.npo.train.seed = derive_seed(global, "unlearn");
  unlearn.rmu.train.seed = derive_seed(global, "unlearn");
  unlearn.rmu.steer_seed = derive_seed(global, "unlearn.steer");
  metric_cfg.seed = derive_seed(global, "score");
  psg.seed = derive_seed(global, "psg");
  eval.seed = derive_seed(global, "evaluate");
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("run config: bad json: ") + e.what());
  }
  RunConfig c;
  try {
    c.version = j.value("version", c.version);
    c.corpus_manifest = j.value("corpus_manifest", c.corpus_manifest);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
      // the model loader treats every field, seed included, as required;
      // supply the derived seed up front so the section may omit it
      json m = j["model"];
      if (!m.contains("seed")) m["seed"] = derive_seed(c.seed, "train.init");
      c.model = model::ModelConfig::from_json(m.dump());
    }
    if (j.contains("pretrain")) {
      c.pretrain = lm::TrainConfig::from_json(j["pretrain"].dump());
    }
    if (j.contains("finetune")) {
      c.finetune = lm::TrainConfig::from_json(j["finetune"].dump());
    }
    if (j.contains("unlearn")) {
      c.unlearn = UnlearnSection::from_json(j["unlearn"].dump());
    }
    if (j.contains("metrics")) {
      c.metric_cfg = metrics::MetricConfig::from_json(j["metrics"].dump());
    }
    if (j.contains("psg")) c.psg = psg::PsgConfig::from_json(j["psg"].dump());
    if (j.contains("eval")) c.eval = EvalSection::from_json(j["eval"].dump());
  } catch (const json::exception& e) {
    throw IoError(std::string("run config: mistyped field: ") + e.what());
  }

  // Sections that omit a seed get a stable per-stage derivation, so one
  // global seed pins the whole run while explicit section seeds still win.
  if (!has_key(j, "model", "seed")) c.model.seed = derive_seed(c.seed, "train.init");
  if (!has_key(j, "pretrain", "seed")) c.pretrain.seed = derive_seed(c.seed, "pretrain");
  if (!has_key(j, "finetune", "seed")) c.finetune.seed = derive_seed(c.seed, "finetune");
  const bool npo_seed = j.contains("unlearn") && j["unlearn"].contains("npo") &&
                        has_key(j["unlearn"], "npo", "train") &&
                        j["unlearn"]["npo"]["train"].contains("seed");
  if (!npo_seed) c.unlearn.npo.train.seed = derive_seed(c.seed, "unlearn");
  const bool rmu_train_seed = j.contains("unlearn") && j["unlearn"].contains("rmu") &&
                              has_key(j["unlearn"], "rmu", "train") &&
                              j["unlearn"]["rmu"]["train"].contains("seed");
  if (!rmu_train_seed) c.unlearn.rmu.train.seed = derive_seed(c.seed, "unlearn");
  if (!has_key(j, "unlearn", "rmu") ||
      !j["unlearn"]["rmu"].contains("steer_seed")) {
    c.unlearn.rmu.steer_seed = derive_seed(c.seed, "unlearn.steer");
  }
  if (!has_key(j, "metrics", "seed")) c.metric_cfg.seed = derive_seed(c.seed, "score");
  if (!has_key(j, "psg", "seed")) c.psg.seed = derive_seed(c.seed, "psg");
  if (!has_key(j, "eval", "seed")) c.eval.seed = derive_seed(c.seed, "evaluate");
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  if (!file_exists(path)) {
    throw ConfigError("config: path '" + path + "' does not exist");
  }
  RunConfig c = from_json(read_text_file(path));
  // A relative corpus manifest is resolved against the config file's
  // directory (the same convention the manifest uses for its documents), so
  // a run can be launched from anywhere.
  const std::filesystem::path manifest(c.corpus_manifest);
  if (!c.corpus_manifest.empty() && manifest.is_relative()) {
    c.corpus_manifest = (std::filesystem::path(path).parent_path() / manifest)
                            .lexically_normal()
                            .string();
  }
  return c;
}

// -----------------------------------------------------------------------------
// manifest
// -----------------------------------------------------------------------------

const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order = {
      "corpus", "train", "finetune", "unlearn", "psg", "score", "evaluate"};
  return order;
}

std::string Manifest::to_json() const {
  json j;
  j["version"] = version;
  json st = json::object();
  for (const auto& [name, rec] : stages) {
    json r;
    r["digest"] = rec.digest;
    r["outputs"] = rec.outputs;
    st[name] = std::move(r);
  }
  j["stages"] = std::move(st);
  return j.dump(2);
}

Manifest Manifest::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: bad json: ") + e.what());
  }
  try {
    Manifest m;
    m.version = j.value("version", int64_t{1});
    if (j.contains("stages")) {
      for (const auto& [name, r] : j["stages"].items()) {
        StageRecord rec;
        rec.digest = r.at("digest").get<std::string>();
        for (const auto& o : r.at("outputs")) {
          rec.outputs.push_back(o.get<std::string>());
        }
        m.stages.emplace(name, std::move(rec));
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: mistyped field: ") + e.what());
  }
}

Manifest Manifest::load_or_empty(const std::string& path) {
  if (!file_exists(path)) return Manifest{};
  return from_json(read_text_file(path));
}

// -----------------------------------------------------------------------------
// artifact layout
// -----------------------------------------------------------------------------

namespace {

constexpr const char* kTokenizer = "corpus/tokenizer.json";
constexpr const char* kBundle = "corpus/bundle.jsonl";
constexpr const char* kTheta = "checkpoints/theta.ulmm";
constexpr const char* kThetaF = "checkpoints/theta_f.ulmm";
constexpr const char* kThetaU = "checkpoints/theta_u.ulmm";
constexpr const char* kUnlearnLog = "logs/unlearn_log.json";
constexpr const char* kIndex = "psg/index.csv";
constexpr const char* kThresholds = "psg/thresholds.json";
constexpr const char* kSurrogates = "psg/surrogates.jsonl";

const std::vector<std::pair<std::string, std::string>>& dataset_keys() {
  // (filename stem, dataset tag)
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"du", "D_u"}, {"dr", "D_r"}, {"su", "D~u"}};
  return keys;
}

std::string score_csv(const std::string& ds, MetricKind m) {
  return "scores/" + ds + "_" + metrics::metric_name(m) + ".csv";
}

std::string score_sidecar(const std::string& ds, MetricKind m) {
  return "scores/" + ds + "_" + metrics::metric_name(m) + ".json";
}

}  // namespace

std::vector<std::string> stage_outputs(const RunConfig& cfg, const std::string& stage) {
  std::vector<std::string> out;
  if (stage == "corpus") {
    out = {kTokenizer, kBundle};
  } else if (stage == "train") {
    out = {kTheta};
  } else if (stage == "finetune") {
    out = {kThetaF};
  } else if (stage == "unlearn") {
    out = {kThetaU, kUnlearnLog};
  } else if (stage == "psg") {
    out = {kIndex, kThresholds, kSurrogates};
  } else if (stage == "score") {
    for (MetricKind m : metrics::all_metrics()) {
      for (const auto& [ds, tag] : dataset_keys()) {
        out.push_back(score_csv(ds, m));
        out.push_back(score_sidecar(ds, m));
      }
    }
  } else if (stage == "evaluate") {
    for (MetricKind m : cfg.eval.metric_kinds) {
      const std::string name = metrics::metric_name(m);
      out.push_back("eval/smd_" + name + ".json");
      out.push_back("eval/normalized_" + name + ".csv");
      out.push_back("eval/nn_" + name + ".json");
      out.push_back("eval/nn_scatter_" + name + ".csv");
    }
    out.push_back("eval/summary.json");
  } else {
    throw ConfigError("pipeline: unknown stage '" + stage + "'");
  }
  return out;
}

namespace {

// upstream artifacts a stage reads (relative paths)
std::vector<std::string> stage_inputs(const RunConfig& cfg, const std::string& stage) {
  if (stage == "corpus") return {};
  if (stage == "train") return {kTokenizer, kBundle};
  if (stage == "finetune") return {kTokenizer, kBundle, kTheta};
  if (stage == "unlearn") return {kTokenizer, kBundle, kTheta};
  if (stage == "psg") return {kTokenizer, kBundle, kTheta, kThetaF};
  if (stage == "score") return {kTokenizer, kBundle, kTheta, kThetaU, kSurrogates};
  if (stage == "evaluate") {
    std::vector<std::string> in = {kTokenizer, kThetaF, kIndex, kSurrogates};
    for (MetricKind m : metrics::all_metrics()) {
      for (const auto& [ds, tag] : dataset_keys()) {
        in.push_back(score_csv(ds, m));
        in.push_back(score_sidecar(ds, m));
      }
    }
    return in;
  }
  throw ConfigError("pipeline: unknown stage '" + stage + "'");
}

// stage-specific configuration strings entering the digest
std::vector<std::string> stage_config_parts(const RunConfig& cfg,
                                            const std::string& stage) {
  if (stage == "corpus") {
    return {std::to_string(cfg.model.vocab_size), std::to_string(cfg.model.max_seq),
            std::to_string(derive_seed(cfg.seed, "corpus"))};
  }
  if (stage == "train") return {cfg.model.to_json(), cfg.pretrain.to_json()};
  if (stage == "finetune") return {cfg.finetune.to_json()};
  if (stage == "unlearn") return {cfg.unlearn.to_json()};
  if (stage == "psg") return {cfg.psg.to_json()};
  if (stage == "score") return {cfg.metric_cfg.to_json()};
  if (stage == "evaluate") return {cfg.eval.to_json()};
  throw ConfigError("pipeline: unknown stage '" + stage + "'");
}

struct Ctx {
  const RunConfig& cfg;
  std::string out;
  int threads = 1;
  Manifest manifest;

  std::string path(const std::string& rel) const { return out + "/" + rel; }
};

std::string file_digest(const std::string& path) {
  return digest_hex(read_text_file(path));
}

// Digest of everything that determines a stage's outputs: the stage name, its
// configuration, and the content of every input artifact. The corpus stage
// additionally folds in the external manifest and document bytes.
std::string stage_digest(const Ctx& ctx, const std::string& stage) {
  std::string acc = stage;
  acc += '\x1f';
  for (const auto& part : stage_config_parts(ctx.cfg, stage)) {
    acc += part;
    acc += '\x1f';
  }
  if (stage == "corpus") {
    acc += read_text_file(ctx.cfg.corpus_manifest);
    acc += '\x1f';
    for (const auto& entry : corpus::parse_manifest(ctx.cfg.corpus_manifest)) {
      acc += read_text_file(entry.path);
      acc += '\x1f';
    }
  }
  for (const auto& rel : stage_inputs(ctx.cfg, stage)) {
    acc += file_digest(ctx.path(rel));
    acc += '\x1f';
  }
  return digest_hex(acc);
}

// the stage that produces a given artifact, for error messages
std::string producer_of(const RunConfig& cfg, const std::string& rel) {
  for (const auto& stage : stage_order()) {
    const auto outs = stage_outputs(cfg, stage);
    if (std::find(outs.begin(), outs.end(), rel) != outs.end()) return stage;
  }
  return "?";
}

void ensure_parent_dirs(const Ctx& ctx) {
  for (const char* d : {"corpus", "checkpoints", "logs", "psg", "scores", "eval"}) {
    make_dirs(ctx.out + "/" + d);
  }
}

// -----------------------------------------------------------------------------
// stage bodies
// -----------------------------------------------------------------------------

corpus::Tokenizer load_tokenizer(const Ctx& ctx) {
  return corpus::Tokenizer::load(ctx.path(kTokenizer));
}

corpus::DatasetBundle load_bundle(const Ctx& ctx) {
  return corpus::bundle_from_jsonl(read_text_file(ctx.path(kBundle)));
}

void run_corpus(Ctx& ctx) {
  const auto entries = corpus::parse_manifest(ctx.cfg.corpus_manifest);
  std::vector<std::string> texts;
  texts.reserve(entries.size());
  for (const auto& e : entries) texts.push_back(read_text_file(e.path));
  const auto tok = corpus::Tokenizer::train_on_text(
      texts, static_cast<size_t>(ctx.cfg.model.vocab_size),
      derive_seed(ctx.cfg.seed, "corpus"));

  // framed sequences add a sentinel at each end
  const size_t budget = static_cast<size_t>(ctx.cfg.model.max_seq - 2);
  auto bundle = corpus::build_bundle(entries, tok, budget);
  bundle.validate();
  if (bundle.unlearn.empty()) {
    throw ConfigError("corpus_manifest: no documents with role 'unlearn'");
  }
  if (bundle.retain.empty()) {
    throw ConfigError("corpus_manifest: no documents with role 'retain'");
  }
  tok.save(ctx.path(kTokenizer));
  write_text_file(ctx.path(kBundle), corpus::bundle_to_jsonl(bundle));
}

void run_train(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  auto fresh = model::init_model(ctx.cfg.model);
  fresh.tokenizer_hash = tok.hash();
  const auto theta =
      lm::train_lm(fresh, bundle.full, tok, ctx.cfg.pretrain, "base");
  theta.save(ctx.path(kTheta));
}

void run_finetune(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  const auto theta = ModelCheckpoint::load(ctx.path(kTheta));
  const auto theta_f =
      lm::train_lm(theta, bundle.unlearn, tok, ctx.cfg.finetune, "finetuned");
  theta_f.save(ctx.path(kThetaF));
}

void run_unlearn(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  const auto theta = ModelCheckpoint::load(ctx.path(kTheta));
  unlearn::TrainingLog log;
  ModelCheckpoint theta_u;
  if (ctx.cfg.unlearn.method == "rmu") {
    theta_u = unlearn::rmu_unlearn(theta, bundle.unlearn, bundle.retain, tok,
                                   ctx.cfg.unlearn.rmu, &log);
  } else {
    theta_u = unlearn::npo_unlearn(theta, bundle.unlearn, bundle.retain, tok,
                                   ctx.cfg.unlearn.npo, &log);
  }
  theta_u.save(ctx.path(kThetaU));
  write_text_file(ctx.path(kUnlearnLog), log.to_json());
}

// Resolves the three filter thresholds from the trained pair, exactly as the
// psg stage persists them. Shared with run_ablation.
psg::PsgConfig resolve_psg_config(const RunConfig& cfg, const lm::Lm& base,
                                  const lm::Lm& finetuned,
                                  const embed::EmbeddingIndex& index,
                                  const std::vector<corpus::Sentence>& d_u,
                                  const corpus::Tokenizer& tok, int threads) {
  psg::PsgConfig pc = cfg.psg;
  const int64_t kk = embed::clamp_k(pc.thresholds.k, index.size());
  pc.thresholds.tau_dist =
      embed::compute_tau_dist(index, kk, pc.thresholds.coefficient);
  pc.thresholds.tau_prefer = embed::compute_tau_prefer(base, finetuned, d_u, tok, threads);
  pc.thresholds.tau_likelihood = embed::compute_tau_likelihood(base, d_u, tok, threads);
  return pc;
}

void run_psg(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  const auto theta = ModelCheckpoint::load(ctx.path(kTheta));
  const auto theta_f = ModelCheckpoint::load(ctx.path(kThetaF));
  const lm::Lm base(theta);
  const lm::Lm finetuned(theta_f);

  const auto index =
      embed::build_index(finetuned, bundle.unlearn, tok, ctx.cfg.psg.metric, ctx.threads);
  const auto pc = resolve_psg_config(ctx.cfg, base, finetuned, index, bundle.unlearn,
                                     tok, ctx.threads);
  write_text_file(ctx.path(kIndex), index.to_csv());
  write_text_file(ctx.path(kThresholds),
                  pc.thresholds.to_json(theta.tag, theta_f.tag, pc.metric));

  const auto ds =
      psg::generate_surrogates(theta, theta_f, bundle.unlearn, tok, pc, ctx.threads);
  write_text_file(ctx.path(kSurrogates), ds.to_jsonl());
}

std::vector<corpus::Sentence> surrogate_sentences(const psg::SurrogateDataset& ds) {
  std::vector<corpus::Sentence> out;
  out.reserve(ds.records.size());
  for (size_t i = 0; i < ds.records.size(); ++i) {
    out.push_back({static_cast<int64_t>(i), ds.records[i].text, std::string("psg")});
  }
  return out;
}

void run_score(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  const auto theta = ModelCheckpoint::load(ctx.path(kTheta));
  const auto theta_u = ModelCheckpoint::load(ctx.path(kThetaU));
  const auto surro =
      psg::SurrogateDataset::from_jsonl(read_text_file(ctx.path(kSurrogates)));
  const auto su = surrogate_sentences(surro);

  const std::vector<std::pair<std::string, const std::vector<corpus::Sentence>*>>
      datasets = {{"du", &bundle.unlearn}, {"dr", &bundle.retain}, {"su", &su}};
  const std::string cfg_digest = ctx.cfg.metric_cfg.digest();
  for (MetricKind m : metrics::all_metrics()) {
    for (size_t d = 0; d < datasets.size(); ++d) {
      metrics::ScoreContext sctx;
      sctx.theta = &theta;
      sctx.relearn_set = &bundle.unlearn;
      sctx.dataset_tag = dataset_keys()[d].second;
      sctx.threads = ctx.threads;
      const auto table = metrics::score_dataset(theta_u, *datasets[d].second, tok, m,
                                                ctx.cfg.metric_cfg, sctx);
      write_text_file(ctx.path(score_csv(datasets[d].first, m)), table.to_csv());
      write_text_file(ctx.path(score_sidecar(datasets[d].first, m)),
                      table.sidecar_json(cfg_digest));
    }
  }
}

ScoreTable load_table(const Ctx& ctx, const std::string& ds, MetricKind m) {
  return ScoreTable::from_csv(read_text_file(ctx.path(score_csv(ds, m))),
                              read_text_file(ctx.path(score_sidecar(ds, m))));
}

void run_evaluate(Ctx& ctx) {
  const auto tok = load_tokenizer(ctx);
  const auto theta_f = ModelCheckpoint::load(ctx.path(kThetaF));
  const lm::Lm finetuned(theta_f);
  const auto surro =
      psg::SurrogateDataset::from_jsonl(read_text_file(ctx.path(kSurrogates)));
  const auto su = surrogate_sentences(surro);
  const auto index = embed::EmbeddingIndex::from_csv(
      read_text_file(ctx.path(kIndex)), ctx.cfg.psg.metric, theta_f.tag);
  const auto queries =
      embed::build_index(finetuned, su, tok, ctx.cfg.psg.metric, ctx.threads);

  json summary;
  summary["sample_size"] = ctx.cfg.eval.sample_size;
  summary["repeats"] = ctx.cfg.eval.repeats;
  summary["knn_k"] = ctx.cfg.eval.knn_k;
  json smd_summary = json::object();
  json degenerate = json::array();

  for (MetricKind m : ctx.cfg.eval.metric_kinds) {
    const std::string name = metrics::metric_name(m);
    const auto t_du = load_table(ctx, "du", m);
    const auto t_dr = load_table(ctx, "dr", m);
    const auto t_su = load_table(ctx, "su", m);

    // effect size: surrogate scores vs bootstrapped unlearn-set scores
    json smd_json;
    try {
      const auto res =
          eval::bootstrap_smd(t_su, t_du, ctx.cfg.eval.sample_size,
                              ctx.cfg.eval.repeats, ctx.cfg.eval.seed, ctx.threads);
      smd_json = json::parse(res.to_json());
    } catch (const NumericError& e) {
      // constant scores on both sides leave the effect size undefined; record
      // the fact instead of failing the run
      smd_json = {{"undefined", true}, {"reason", e.what()}};
    }
    write_text_file(ctx.path("eval/smd_" + name + ".json"), smd_json.dump(2));
    smd_summary[name] = smd_json;

    // joint [0,1] normalization across the three datasets
    std::string norm_csv = "sentence_id,score,dataset_tag\n";
    try {
      norm_csv = eval::normalize_scores({t_du, t_dr, t_su}).to_csv();
    } catch (const ConfigError&) {
      degenerate.push_back(name);  // constant across every dataset
    }
    write_text_file(ctx.path("eval/normalized_" + name + ".csv"), norm_csv);

    // score vs distance-from-the-unlearn-set, over the surrogates
    const auto rep = eval::nn_correlation(t_su, queries, index, ctx.cfg.eval.knn_k);
    write_text_file(ctx.path("eval/nn_" + name + ".json"), rep.to_json());
    write_text_file(ctx.path("eval/nn_scatter_" + name + ".csv"), rep.to_csv());
  }
  summary["smd"] = std::move(smd_summary);
  summary["degenerate_normalization"] = std::move(degenerate);
  write_text_file(ctx.path("eval/summary.json"), summary.dump(2));
}

void run_stage_body(Ctx& ctx, const std::string& stage) {
  if (stage == "corpus") {
    run_corpus(ctx);
  } else if (stage == "train") {
    run_train(ctx);
  } else if (stage == "finetune") {
    run_finetune(ctx);
  } else if (stage == "unlearn") {
    run_unlearn(ctx);
  } else if (stage == "psg") {
    run_psg(ctx);
  } else if (stage == "score") {
    run_score(ctx);
  } else if (stage == "evaluate") {
    run_evaluate(ctx);
  } else {
    throw ConfigError("pipeline: unknown stage '" + stage + "'");
  }
}

// Runs or skips one stage, keeping the manifest current. Returns the status.
StageStatus execute(Ctx& ctx, const std::string& stage) {
  // inputs must exist before the digest (and the stage itself) can be computed
  for (const auto& rel : stage_inputs(ctx.cfg, stage)) {
    if (!file_exists(ctx.path(rel))) {
      throw ConfigError("stage '" + stage + "': missing input '" + rel +
                        "' — run the " + producer_of(ctx.cfg, rel) + " stage first");
    }
  }
  const std::string digest = stage_digest(ctx, stage);
  const auto outputs = stage_outputs(ctx.cfg, stage);

  const auto it = ctx.manifest.stages.find(stage);
  bool current = it != ctx.manifest.stages.end() && it->second.digest == digest;
  if (current) {
    for (const auto& rel : outputs) {
      if (!file_exists(ctx.path(rel))) {
        current = false;
        break;
      }
    }
  }
  if (current) {
    log_info("pipeline: stage '" + stage + "' up to date, skipping");
    return {stage, true};
  }

  log_info("pipeline: running stage '" + stage + "'");
  run_stage_body(ctx, stage);
  ctx.manifest.stages[stage] = StageRecord{digest, outputs};
  write_text_file(ctx.path("manifest.json"), ctx.manifest.to_json());
  return {stage, false};
}

Ctx make_ctx(const RunConfig& cfg, int threads) {
  if (threads < 1) throw ConfigError("threads: must be >= 1");
  cfg.validate();
  Ctx ctx{cfg, cfg.output_dir, threads, {}};
  make_dirs(ctx.out);
  ensure_parent_dirs(ctx);
  ctx.manifest = Manifest::load_or_empty(ctx.path("manifest.json"));
  write_text_file(ctx.path("config.json"), cfg.to_json());
  return ctx;
}

}  // namespace

// -----------------------------------------------------------------------------
// entry points
// -----------------------------------------------------------------------------

RunResult run_pipeline(const RunConfig& cfg, int threads) {
  Ctx ctx = make_ctx(cfg, threads);
  RunResult result;
  result.out_dir = ctx.out;
  for (const auto& stage : stage_order()) {
    result.stages.push_back(execute(ctx, stage));
  }
  return result;
}

RunResult run_stage(const RunConfig& cfg, const std::string& stage, int threads) {
  const auto& order = stage_order();
  if (std::find(order.begin(), order.end(), stage) == order.end()) {
    throw ConfigError("pipeline: unknown stage '" + stage + "'");
  }
  Ctx ctx = make_ctx(cfg, threads);
  RunResult result;
  result.out_dir = ctx.out;
  // corpus prep is cheap and everything depends on it
  if (stage != "corpus") result.stages.push_back(execute(ctx, "corpus"));
  result.stages.push_back(execute(ctx, stage));
  return result;
}

eval::AblationReport run_ablation(const RunConfig& cfg, const eval::AblationAxis& axis,
                                  int threads) {
  Ctx ctx = make_ctx(cfg, threads);
  execute(ctx, "corpus");
  for (const char* rel : {kTheta, kThetaF, kThetaU}) {
    if (!file_exists(ctx.path(rel))) {
      throw ConfigError(std::string("ablate: missing input '") + rel + "' — run the " +
                        producer_of(cfg, rel) + " stage first");
    }
  }
  const auto tok = load_tokenizer(ctx);
  const auto bundle = load_bundle(ctx);
  const auto theta = ModelCheckpoint::load(ctx.path(kTheta));
  const auto theta_f = ModelCheckpoint::load(ctx.path(kThetaF));
  const auto theta_u = ModelCheckpoint::load(ctx.path(kThetaU));
  const lm::Lm base(theta);
  const lm::Lm finetuned(theta_f);
  const auto index =
      embed::build_index(finetuned, bundle.unlearn, tok, cfg.psg.metric, threads);

  eval::AblationContext actx;
  actx.theta = &theta;
  actx.theta_f = &theta_f;
  actx.theta_u_hat = &theta_u;
  actx.d_u = &bundle.unlearn;
  actx.tok = &tok;
  actx.psg =
      resolve_psg_config(cfg, base, finetuned, index, bundle.unlearn, tok, threads);
  actx.metric_cfg = cfg.metric_cfg;
  actx.metric_kinds = cfg.eval.metric_kinds;
  actx.sample_size = cfg.eval.sample_size;
  actx.repeats = cfg.eval.repeats;
  actx.seed = cfg.eval.seed;
  actx.threads = threads;

  const auto report = eval::ablation_sweep(axis, actx);
  write_text_file(
      ctx.path("eval/ablation_" + eval::ablation_kind_name(axis.kind) + ".json"),
      report.to_json());
  return report;
}

}  // namespace ula::pipeline
