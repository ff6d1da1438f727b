#include "doctest.h"

#include <nlohmann/json.hpp>

#include <cmath>

#include "unlearn.hpp"
#include "embed.hpp"
#include "support/grammar.hpp"

using namespace ula;
using namespace ula::unlearn;
using lm::Lm;
using lm::TrainConfig;
using ula::testsupport::Style;

namespace {

struct DeskSetup {
  corpus::Tokenizer tok;
  std::vector<corpus::Sentence> d_u, d_r;
  model::ModelCheckpoint base;
};

const DeskSetup& desk() {
  static const DeskSetup setup = [] {
    DeskSetup s;
    auto wizard = testsupport::make_sentences(Style::Wizards, 60, 21);
    auto sailor = testsupport::make_sentences(Style::Mariners, 60, 22);
    std::string blob;
    for (const auto& t : wizard) blob += t + "\n";
    for (const auto& t : sailor) blob += t + "\n";
    s.tok = corpus::Tokenizer::train_on_text({blob}, 512, 1);
    int64_t id = 0;
    for (const auto& t : wizard) s.d_u.push_back({id++, t, "w"});
    for (const auto& t : sailor) s.d_r.push_back({id++, t, "m"});
    std::vector<corpus::Sentence> all = s.d_u;
    all.insert(all.end(), s.d_r.begin(), s.d_r.end());

    model::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 64;
    cfg.n_heads = 2;
    cfg.d_ff = 128;
    cfg.vocab_size = 512;
    cfg.max_seq = 48;
    cfg.seed = 3;
    auto fresh = model::init_model(cfg);
    fresh.tokenizer_hash = s.tok.hash();
    TrainConfig tc;
    tc.steps = 250;
    tc.batch_size = 8;
    tc.lr = 3e-3;
    tc.seed = 5;
    s.base = lm::train_lm(fresh, all, s.tok, tc, "base");
    return s;
  }();
  return setup;
}

double mean_mean_logprob(const model::ModelCheckpoint& ckpt,
                         const std::vector<corpus::Sentence>& data,
                         const corpus::Tokenizer& tok) {
  Lm m(ckpt);
  double acc = 0.0;
  for (const auto& s : data) acc += m.mean_logprob(tok.encode(s.text));
  return acc / static_cast<double>(data.size());
}

}  // namespace

TEST_CASE("unlearn: input validation") {
  const auto& d = desk();
  NpoConfig npo;
  npo.train.steps = 0;
  NpoConfig bad = npo;
  bad.beta = 0.0;
  CHECK_THROWS_AS(npo_unlearn(d.base, d.d_u, d.d_r, d.tok, bad), ConfigError);
  CHECK_THROWS_AS(npo_unlearn(d.base, {}, d.d_r, d.tok, npo), ConfigError);
  CHECK_THROWS_AS(npo_unlearn(d.base, d.d_u, {}, d.tok, npo), ConfigError);

  auto retagged = d.base;
  retagged.tag = "unlearned";
  CHECK_THROWS_AS(npo_unlearn(retagged, d.d_u, d.d_r, d.tok, npo), ConfigError);

  auto wrong_tok = d.base;
  wrong_tok.tokenizer_hash = "feedfacefeedface";
  CHECK_THROWS_AS(npo_unlearn(wrong_tok, d.d_u, d.d_r, d.tok, npo), CompatError);

  RmuConfig rmu;
  rmu.train.steps = 0;
  rmu.layer = 5;  // model has 2 blocks → valid indices 0..2
  CHECK_THROWS_AS(rmu_unlearn(d.base, d.d_u, d.d_r, d.tok, rmu), ConfigError);
}

TEST_CASE("unlearn: zero steps is the identity apart from the tag") {
  const auto& d = desk();
  NpoConfig npo;
  npo.train.steps = 0;
  TrainingLog log;
  auto out = npo_unlearn(d.base, d.d_u, d.d_r, d.tok, npo, &log);
  CHECK(out.tag == "unlearned");
  CHECK(out.params == d.base.params);
  CHECK(log.method == "npo");
  CHECK(log.entries.empty());

  RmuConfig rmu;
  rmu.train.steps = 0;
  auto out2 = rmu_unlearn(d.base, d.d_u, d.d_r, d.tok, rmu, &log);
  CHECK(out2.tag == "unlearned");
  CHECK(out2.params == d.base.params);
  CHECK(log.method == "rmu");
}

TEST_CASE("npo: ratio term equals (2/beta)*log 2 at step zero") {
  const auto& d = desk();
  NpoConfig cfg;
  cfg.beta = 0.1;
  cfg.train.steps = 1;
  cfg.train.seed = 9;
  TrainingLog log;
  npo_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg, &log);
  REQUIRE(log.entries.size() == 1);
  CHECK(log.entries[0].forget ==
        doctest::Approx((2.0 / cfg.beta) * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("npo: forget set drops, retain set keeps most of its likelihood") {
  const auto& d = desk();
  NpoConfig cfg;
  cfg.train.steps = 60;
  cfg.train.batch_size = 8;
  cfg.train.lr = 1e-3;
  cfg.train.seed = 13;
  TrainingLog log;
  auto out = npo_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg, &log);
  CHECK(out.tag == "unlearned");
  CHECK(log.entries.size() == 60);

  const double u0 = mean_mean_logprob(d.base, d.d_u, d.tok);
  const double r0 = mean_mean_logprob(d.base, d.d_r, d.tok);
  const double u1 = mean_mean_logprob(out, d.d_u, d.tok);
  const double r1 = mean_mean_logprob(out, d.d_r, d.tok);
  CHECK(u1 < u0);
  CHECK(r0 - r1 < 0.5 * (u0 - u1));  // utility guardrail

  auto again = npo_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg);
  CHECK(again.params == out.params);  // per-seed determinism

  // the training log serializes and parses
  auto j = nlohmann::json::parse(log.to_json());
  CHECK(j["method"] == "npo");
  CHECK(j["entries"].size() == 60);
  CHECK(j["resolved"]["beta"].get<double>() == cfg.beta);
}

TEST_CASE("rmu: steering loss decreases without a retain term") {
  const auto& d = desk();
  RmuConfig cfg;
  cfg.retain_weight = 0.0;
  cfg.train.steps = 40;
  cfg.train.lr = 1e-3;
  cfg.train.seed = 17;
  TrainingLog log;
  auto out = rmu_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg, &log);
  REQUIRE(log.entries.size() == 40);
  CHECK(log.entries.back().forget < log.entries.front().forget);

  // direct measurement of the steering objective before and after
  const int64_t layer = d.base.config.n_layers / 2;
  const lm::Vec u = steer_direction(d.base.config.d_model, cfg.steer_seed);
  Lm before(d.base);
  const double c = resolve_steer_scale(before, d.d_r, d.tok, layer, -1.0);
  Lm after(out);
  auto objective = [&](const Lm& m) {
    double acc = 0.0;
    for (const auto& s : d.d_u) {
      auto ids = lm::frame_sentence(d.tok, s.text, m.config().max_seq);
      auto tr = m.forward_trace(ids, false, true);
      lm::Vec mean = tr.hidden.at(static_cast<size_t>(layer)).colwise().mean().transpose();
      acc += (mean - c * u).squaredNorm();
    }
    return acc / static_cast<double>(d.d_u.size());
  };
  CHECK(objective(after) < objective(before));
}

TEST_CASE("rmu: defaults reduce forget likelihood within the utility guardrail") {
  const auto& d = desk();
  RmuConfig cfg;  // default layer / scale / retain weight
  cfg.train.steps = 100;
  cfg.train.lr = 1e-3;
  cfg.train.seed = 19;
  TrainingLog log;
  auto out = rmu_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg, &log);

  const double u0 = mean_mean_logprob(d.base, d.d_u, d.tok);
  const double r0 = mean_mean_logprob(d.base, d.d_r, d.tok);
  const double u1 = mean_mean_logprob(out, d.d_u, d.tok);
  const double r1 = mean_mean_logprob(out, d.d_r, d.tok);
  CHECK(u1 < u0);
  CHECK(r0 - r1 < 0.5 * (u0 - u1));

  // resolved scalars recorded: auto layer = n_layers/2, auto scale > 0
  REQUIRE(log.resolved.size() == 3);
  CHECK(log.resolved[0].second == static_cast<double>(d.base.config.n_layers / 2));
  CHECK(log.resolved[1].second > 0.0);

  auto again = rmu_unlearn(d.base, d.d_u, d.d_r, d.tok, cfg);
  CHECK(again.params == out.params);
}

TEST_CASE("rmu: steering direction and scale resolution") {
  const auto u = steer_direction(32, 123);
  CHECK(u.size() == 32);
  CHECK(u.norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((steer_direction(32, 123) - u).cwiseAbs().maxCoeff() == 0.0);
  CHECK((steer_direction(32, 124) - u).cwiseAbs().maxCoeff() > 0.0);

  const auto& d = desk();
  Lm frozen(d.base);
  CHECK(resolve_steer_scale(frozen, d.d_r, d.tok, 1, 7.5) == 7.5);  // passthrough

  // auto mode: 5 × the median per-position hidden norm, recomputed by hand
  const double got = resolve_steer_scale(frozen, d.d_r, d.tok, 1, -1.0);
  std::vector<double> norms;
  for (const auto& s : d.d_r) {
    auto ids = lm::frame_sentence(d.tok, s.text, frozen.config().max_seq);
    auto tr = frozen.forward_trace(ids, false, true);
    const auto& h = tr.hidden.at(1);
    for (Eigen::Index t = 0; t < h.rows(); ++t) norms.push_back(h.row(t).norm());
  }
  CHECK(got == doctest::Approx(5.0 * embed::quantile_r7(norms, 0.5)).epsilon(1e-12));
}
