#include "model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace ula::model {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers < 0) throw ConfigError("model: n_layers must be >= 0");
  if (d_model < 1) throw ConfigError("model: d_model must be >= 1");
  if (n_heads < 1) throw ConfigError("model: n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model (" + std::to_string(d_model) +
                      ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (d_ff < 1) throw ConfigError("model: d_ff must be >= 1");
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
  if (max_seq < 2) throw ConfigError("model: max_seq must be >= 2");
}

std::string ModelConfig::to_json() const {
  json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["vocab_size"] = vocab_size;
  j["max_seq"] = max_seq;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int64_t>();
  cfg.d_model = j.at("d_model").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.d_ff = j.at("d_ff").get<int64_t>();
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.max_seq = j.at("max_seq").get<int64_t>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// layout
// ---------------------------------------------------------------------------

int64_t TensorSpec::size() const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::vector<TensorSpec> make_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<TensorSpec> out;
  int64_t off = 0;
  auto add = [&](std::string name, std::vector<int64_t> shape) {
    TensorSpec t{std::move(name), off, std::move(shape)};
    off += t.size();
    out.push_back(std::move(t));
  };
  const int64_t d = cfg.d_model;
  add("tok_emb", {cfg.vocab_size, d});
  add("pos_emb", {cfg.max_seq, d});
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    add(p + "ln1.w", {d});
    add(p + "ln1.b", {d});
    add(p + "attn.wq", {d, d});
    add(p + "attn.bq", {d});
    add(p + "attn.wk", {d, d});
    add(p + "attn.bk", {d});
    add(p + "attn.wv", {d, d});
    add(p + "attn.bv", {d});
    add(p + "attn.wo", {d, d});
    add(p + "attn.bo", {d});
    add(p + "ln2.w", {d});
    add(p + "ln2.b", {d});
    add(p + "mlp.w1", {d, cfg.d_ff});
    add(p + "mlp.b1", {cfg.d_ff});
    add(p + "mlp.w2", {cfg.d_ff, d});
    add(p + "mlp.b2", {d});
  }
  add("ln_f.w", {d});
  add("ln_f.b", {d});
  add("head.w", {d, cfg.vocab_size});
  return out;
}

int64_t layout_param_count(const std::vector<TensorSpec>& layout) {
  if (layout.empty()) return 0;
  return layout.back().offset + layout.back().size();
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

bool valid_tag(const std::string& tag) {
  return tag == "base" || tag == "finetuned" || tag == "unlearned" ||
         tag == "relearned" || tag == "modified";
}

const std::vector<TensorSpec>& ModelCheckpoint::layout() const {
  if (layout_.empty()) layout_ = make_layout(config);
  return layout_;
}

const TensorSpec& ModelCheckpoint::tensor(const std::string& name) const {
  for (const auto& t : layout()) {
    if (t.name == name) return t;
  }
  throw ConfigError("checkpoint: no tensor named '" + name + "'");
}

float* ModelCheckpoint::tensor_data(const std::string& name) {
  return params.data() + tensor(name).offset;
}

const float* ModelCheckpoint::tensor_data(const std::string& name) const {
  return params.data() + tensor(name).offset;
}

void ModelCheckpoint::validate() const {
  config.validate();
  if (static_cast<int64_t>(params.size()) != layout_param_count(layout())) {
    throw ConfigError("checkpoint: params length does not match layout");
  }
  for (float v : params) {
    if (!std::isfinite(v)) throw NumericError("checkpoint: non-finite parameter");
  }
  if (!valid_tag(tag)) throw ConfigError("checkpoint: unknown tag '" + tag + "'");
}

namespace {

constexpr char kMagic[4] = {'U', 'L', 'M', 'M'};
constexpr uint32_t kVersion = 1;

}  // namespace

void ModelCheckpoint::save(const std::string& path) const {
  validate();
  json meta;
  meta["config"] = json::parse(config.to_json());
  meta["tag"] = tag;
  meta["tokenizer_hash"] = tokenizer_hash;
  json lay = json::array();
  for (const auto& t : layout()) {
    lay.push_back(json{{"name", t.name}, {"offset", t.offset}, {"shape", t.shape}});
  }
  meta["layout"] = std::move(lay);
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  const uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
  out.write(reinterpret_cast<const char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(float)));
  if (!out) throw IoError("short write on checkpoint: " + path);
}

ModelCheckpoint ModelCheckpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw CompatError("checkpoint: bad magic in " + path);
  }
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kVersion) {
    throw CompatError("checkpoint: unsupported format version " +
                      std::to_string(version));
  }
  uint64_t meta_len = 0;
  in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
  if (!in || meta_len > (1ull << 30)) throw CompatError("checkpoint: bad header");
  std::string meta_str(meta_len, '\0');
  in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw CompatError("checkpoint: truncated metadata");

  json meta = json::parse(meta_str);
  ModelCheckpoint ckpt;
  ckpt.config = ModelConfig::from_json(meta.at("config").dump());
  ckpt.tag = meta.at("tag").get<std::string>();
  ckpt.tokenizer_hash = meta.at("tokenizer_hash").get<std::string>();

  const auto expected = make_layout(ckpt.config);
  const auto& lay = meta.at("layout");
  if (lay.size() != expected.size()) throw CompatError("checkpoint: layout mismatch");
  for (size_t i = 0; i < expected.size(); ++i) {
    if (lay[i].at("name").get<std::string>() != expected[i].name ||
        lay[i].at("offset").get<int64_t>() != expected[i].offset ||
        lay[i].at("shape").get<std::vector<int64_t>>() != expected[i].shape) {
      throw CompatError("checkpoint: layout mismatch at tensor " +
                        std::to_string(i));
    }
  }

  ckpt.params.resize(static_cast<size_t>(layout_param_count(expected)));
  in.read(reinterpret_cast<char*>(ckpt.params.data()),
          static_cast<std::streamsize>(ckpt.params.size() * sizeof(float)));
  if (!in) throw CompatError("checkpoint: truncated parameter block");
  char extra;
  if (in.read(&extra, 1)) throw CompatError("checkpoint: trailing bytes");
  ckpt.validate();
  return ckpt;
}

std::string ModelCheckpoint::hash() const {
  uint64_t h = fnv1a64(config.to_json());
  h = Rng::mix(h, fnv1a64(tag));
  h = Rng::mix(h, fnv1a64(tokenizer_hash));
  h = Rng::mix(h, fnv1a64(params.data(), params.size() * sizeof(float)));
  return hex64(h);
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

ModelCheckpoint init_model(const ModelConfig& cfg) {
  cfg.validate();
  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  ckpt.tag = "base";
  const auto layout = make_layout(cfg);
  ckpt.params.assign(static_cast<size_t>(layout_param_count(layout)), 0.0f);

  Rng rng(cfg.seed);
  auto fill_normal = [&](const TensorSpec& t) {
    float* p = ckpt.params.data() + t.offset;
    for (int64_t i = 0; i < t.size(); ++i) {
      p[i] = static_cast<float>(rng.normal() * 0.02);
    }
  };
  auto fill_ones = [&](const TensorSpec& t) {
    float* p = ckpt.params.data() + t.offset;
    for (int64_t i = 0; i < t.size(); ++i) p[i] = 1.0f;
  };
  for (const auto& t : layout) {
    const bool is_ln_gain = t.name.ends_with("ln1.w") || t.name.ends_with("ln2.w") ||
                            t.name == "ln_f.w";
    const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".bq") ||
                         t.name.ends_with(".bk") || t.name.ends_with(".bv") ||
                         t.name.ends_with(".bo") || t.name.ends_with(".b1") ||
                         t.name.ends_with(".b2");
    if (t.name == "head.w" || is_bias) continue;  // stays zero
    if (is_ln_gain) {
      fill_ones(t);
    } else {
      fill_normal(t);
    }
  }
  return ckpt;
}

}  // namespace ula::model
