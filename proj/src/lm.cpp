#include "lm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ula::lm {

using Eigen::Map;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using model::ModelCheckpoint;
using model::TensorSpec;

namespace {

constexpr double kLnEps = 1e-5;

inline double gelu(double u) {
  const double k = 0.7978845608028654;  // sqrt(2/pi)
  const double s = k * (u + 0.044715 * u * u * u);
  return 0.5 * u * (1.0 + std::tanh(s));
}

inline double gelu_grad(double u) {
  const double k = 0.7978845608028654;
  const double c = 0.044715;
  const double s = k * (u + c * u * u * u);
  const double t = std::tanh(s);
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * c * u * u);
}

// y = gamma ⊙ (x−μ)/√(σ²+ε) + beta per row; xhat and inv cached for backward
void layer_norm(const Mat& x, const double* gamma, const double* beta, Mat& y,
                Mat& xhat, Vec& inv) {
  const Eigen::Index T = x.rows(), d = x.cols();
  y.resize(T, d);
  xhat.resize(T, d);
  inv.resize(T);
  Map<const RowVec> g(gamma, d), b(beta, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mu = x.row(t).mean();
    const double var = (x.row(t).array() - mu).square().mean();
    const double iv = 1.0 / std::sqrt(var + kLnEps);
    inv(t) = iv;
    xhat.row(t) = (x.row(t).array() - mu) * iv;
    y.row(t) = xhat.row(t).cwiseProduct(g) + b;
  }
}

// dx for y = LN(x); accumulates dgamma/dbeta when given
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& inv,
                        const double* gamma, double* dgamma, double* dbeta) {
  const Eigen::Index T = dy.rows(), d = dy.cols();
  Map<const RowVec> g(gamma, d);
  if (dgamma) {
    Map<RowVec> dg(dgamma, d), db(dbeta, d);
    dg += dy.cwiseProduct(xhat).colwise().sum();
    db += dy.colwise().sum();
  }
  Mat dx(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const RowVec dxhat = dy.row(t).cwiseProduct(g);
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(t)).mean();
    dx.row(t) = (dxhat.array() - m1 - xhat.row(t).array() * m2) * inv(t);
  }
  return dx;
}

}  // namespace

TokenSeq frame_sentence(const corpus::Tokenizer& tok, const std::string& text,
                        int64_t max_seq) {
  TokenSeq ids;
  ids.push_back(kEotId);
  for (TokenId t : tok.encode(text)) ids.push_back(t);
  ids.push_back(kEotId);
  if (static_cast<int64_t>(ids.size()) > max_seq) {
    ids.resize(static_cast<size_t>(max_seq));
  }
  return ids;
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train: steps must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("train: adam betas must lie in [0, 1)");
  }
  if (adam_eps <= 0.0) throw ConfigError("train: adam_eps must be > 0");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["grad_clip"] = grad_clip;
  j["seed"] = seed;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("train config: bad json: ") + e.what());
  }
  try {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("train config: mistyped field: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Lm
// ---------------------------------------------------------------------------

struct Lm::Workspace {
  struct LayerCache {
    Mat ln1_xhat;
    Vec ln1_inv;
    Mat q, k, v;            // [T, d]
    std::vector<Mat> att;   // per head [T, T] softmax rows
    Mat att_concat;         // [T, d] pre-projection
    Mat x_mid;              // [T, d] after attention residual
    Mat ln2_xhat;
    Vec ln2_inv;
    Mat u;                  // [T, d_ff] pre-GELU
    Mat g;                  // [T, d_ff] post-GELU
  };
  std::vector<LayerCache> layers;
  Mat x0;        // embedding output
  Mat x_top;     // hidden[n_layers]
  Mat lnf_xhat;
  Vec lnf_inv;
  Mat y;         // final layer-norm output (head input)
  Mat probs;     // [T, V] softmax rows
};

Lm::Lm(const ModelCheckpoint& ckpt) {
  ckpt.validate();
  config_ = ckpt.config;
  tokenizer_hash_ = ckpt.tokenizer_hash;
  tag_ = ckpt.tag;
  layout_ = model::make_layout(config_);
  for (size_t i = 0; i < layout_.size(); ++i) index_[layout_[i].name] = i;
  params_.resize(ckpt.params.size());
  for (size_t i = 0; i < ckpt.params.size(); ++i) {
    params_[i] = static_cast<double>(ckpt.params[i]);
  }
}

ModelCheckpoint Lm::to_checkpoint(const std::string& tag) const {
  ModelCheckpoint out;
  out.config = config_;
  out.tokenizer_hash = tokenizer_hash_;
  out.tag = tag;
  out.params.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    out.params[i] = static_cast<float>(params_[i]);
  }
  out.validate();
  return out;
}

Map<const Mat> Lm::tensor(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("lm: no tensor named '" + name + "'");
  const TensorSpec& t = layout_[it->second];
  const int64_t rows = t.shape.size() == 2 ? t.shape[0] : 1;
  const int64_t cols = t.shape.back();
  return Map<const Mat>(params_.data() + t.offset, rows, cols);
}

void Lm::check_ids(const TokenSeq& ids, size_t min_len) const {
  if (ids.size() < min_len) {
    throw LengthError("lm: sequence of length " + std::to_string(ids.size()) +
                      " is shorter than " + std::to_string(min_len));
  }
  if (static_cast<int64_t>(ids.size()) > config_.max_seq) {
    throw LengthError("lm: sequence of length " + std::to_string(ids.size()) +
                      " exceeds max_seq " + std::to_string(config_.max_seq));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw ConfigError("lm: token id " + std::to_string(id) + " out of range");
    }
  }
}

void Lm::forward_impl(const TokenSeq& ids, bool want_full_rows, bool want_hidden,
                      ForwardTrace& trace, Workspace* ws) const {
  const int64_t T = static_cast<int64_t>(ids.size());
  const int64_t d = config_.d_model;
  const int64_t V = config_.vocab_size;
  const int64_t H = config_.n_heads;
  const int64_t dh = config_.d_head();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto data = [&](const std::string& name) {
    return params_.data() + layout_[index_.at(name)].offset;
  };

  Mat x(T, d);
  {
    Map<const Mat> emb(data("tok_emb"), V, d);
    Map<const Mat> pos(data("pos_emb"), config_.max_seq, d);
    for (int64_t t = 0; t < T; ++t) x.row(t) = emb.row(ids[t]) + pos.row(t);
  }
  if (want_hidden) trace.hidden.push_back(x);
  if (ws) {
    ws->x0 = x;
    ws->layers.resize(static_cast<size_t>(config_.n_layers));
  }

  for (int64_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Map<const Mat> Wq(data(p + "attn.wq"), d, d), Wk(data(p + "attn.wk"), d, d),
        Wv(data(p + "attn.wv"), d, d), Wo(data(p + "attn.wo"), d, d);
    Map<const RowVec> bq(data(p + "attn.bq"), d), bk(data(p + "attn.bk"), d),
        bv(data(p + "attn.bv"), d), bo(data(p + "attn.bo"), d);
    Map<const Mat> W1(data(p + "mlp.w1"), d, config_.d_ff),
        W2(data(p + "mlp.w2"), config_.d_ff, d);
    Map<const RowVec> b1(data(p + "mlp.b1"), config_.d_ff),
        b2(data(p + "mlp.b2"), d);

    Mat a, xhat1;
    Vec inv1;
    layer_norm(x, data(p + "ln1.w"), data(p + "ln1.b"), a, xhat1, inv1);
    Mat q = a * Wq, k = a * Wk, v = a * Wv;
    q.rowwise() += bq;
    k.rowwise() += bk;
    v.rowwise() += bv;

    Mat att_concat(T, d);
    std::vector<Mat> att_cache;
    if (ws) att_cache.reserve(static_cast<size_t>(H));
    for (int64_t h = 0; h < H; ++h) {
      auto Q = q.middleCols(h * dh, dh);
      auto K = k.middleCols(h * dh, dh);
      auto Vh = v.middleCols(h * dh, dh);
      Mat S = (Q * K.transpose()) * att_scale;
      // causal mask + row softmax
      for (int64_t i = 0; i < T; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j <= i; ++j) m = std::max(m, S(i, j));
        double sum = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          S(i, j) = std::exp(S(i, j) - m);
          sum += S(i, j);
        }
        for (int64_t j = 0; j <= i; ++j) S(i, j) /= sum;
        for (int64_t j = i + 1; j < T; ++j) S(i, j) = 0.0;
      }
      att_concat.middleCols(h * dh, dh) = S * Vh;
      if (ws) att_cache.push_back(std::move(S));
    }
    Mat attn_out = att_concat * Wo;
    attn_out.rowwise() += bo;
    Mat x_mid = x + attn_out;

    Mat bn, xhat2;
    Vec inv2;
    layer_norm(x_mid, data(p + "ln2.w"), data(p + "ln2.b"), bn, xhat2, inv2);
    Mat u = bn * W1;
    u.rowwise() += b1;
    Mat g = u.unaryExpr([](double z) { return gelu(z); });
    Mat f = g * W2;
    f.rowwise() += b2;
    x = x_mid + f;

    if (ws) {
      auto& C = ws->layers[static_cast<size_t>(l)];
      C.ln1_xhat = std::move(xhat1);
      C.ln1_inv = std::move(inv1);
      C.q = std::move(q);
      C.k = std::move(k);
      C.v = std::move(v);
      C.att = std::move(att_cache);
      C.att_concat = std::move(att_concat);
      C.x_mid = std::move(x_mid);
      C.ln2_xhat = std::move(xhat2);
      C.ln2_inv = std::move(inv2);
      C.u = std::move(u);
      C.g = std::move(g);
    }
    if (want_hidden) trace.hidden.push_back(x);
  }

  Mat y, xhatf;
  Vec invf;
  layer_norm(x, data("ln_f.w"), data("ln_f.b"), y, xhatf, invf);
  Map<const Mat> Whead(data("head.w"), d, V);
  Mat logits = y * Whead;

  Mat logrows(T, V);
  for (int64_t t = 0; t < T; ++t) {
    const double m = logits.row(t).maxCoeff();
    const double lse = m + std::log((logits.row(t).array() - m).exp().sum());
    logrows.row(t) = logits.row(t).array() - lse;
  }
  trace.token_logprobs.resize(static_cast<size_t>(std::max<int64_t>(T - 1, 0)));
  for (int64_t t = 0; t + 1 < T; ++t) {
    trace.token_logprobs[static_cast<size_t>(t)] = logrows(t, ids[t + 1]);
  }
  if (ws) {
    ws->x_top = std::move(x);
    ws->lnf_xhat = std::move(xhatf);
    ws->lnf_inv = std::move(invf);
    ws->y = std::move(y);
    ws->probs = logrows.array().exp();
  }
  if (want_full_rows) trace.full_rows = std::move(logrows);
}

ForwardTrace Lm::forward_trace(const TokenSeq& ids, bool want_full_rows,
                               bool want_hidden) const {
  check_ids(ids, 2);
  ForwardTrace trace;
  forward_impl(ids, want_full_rows, want_hidden, trace, nullptr);
  return trace;
}

double Lm::mean_logprob(const TokenSeq& ids) const {
  check_ids(ids, 2);
  ForwardTrace trace;
  forward_impl(ids, false, false, trace, nullptr);
  double sum = 0.0;
  for (double lp : trace.token_logprobs) sum += lp;
  return sum / static_cast<double>(trace.token_logprobs.size());
}

double Lm::sum_logprob(const TokenSeq& ids) const {
  check_ids(ids, 2);
  ForwardTrace trace;
  forward_impl(ids, false, false, trace, nullptr);
  double sum = 0.0;
  for (double lp : trace.token_logprobs) sum += lp;
  return sum;
}

Vec Lm::next_logprobs(const TokenSeq& ctx) const {
  check_ids(ctx, 1);
  ForwardTrace trace;
  forward_impl(ctx, true, false, trace, nullptr);
  return trace.full_rows.row(static_cast<Eigen::Index>(ctx.size()) - 1);
}

Mat Lm::last_hidden(const TokenSeq& ids) const {
  check_ids(ids, 1);
  ForwardTrace trace;
  forward_impl(ids, false, true, trace, nullptr);
  return std::move(trace.hidden.back());
}

BackwardResult Lm::backward(const TokenSeq& ids, const LossFn& loss_fn,
                            std::vector<double>* param_grad) const {
  check_ids(ids, 2);
  const int64_t T = static_cast<int64_t>(ids.size());
  const int64_t d = config_.d_model;
  const int64_t V = config_.vocab_size;
  const int64_t H = config_.n_heads;
  const int64_t dh = config_.d_head();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace trace;
  Workspace ws;
  forward_impl(ids, true, true, trace, &ws);
  TraceGrad tg = loss_fn(trace);
  if (!std::isfinite(tg.loss)) throw NumericError("lm: non-finite loss");
  if (tg.d_logprob.size() != 0 && (tg.d_logprob.rows() != T || tg.d_logprob.cols() != V)) {
    throw ConfigError("lm: loss log-prob gradient has wrong shape");
  }
  for (const auto& [layer, m] : tg.d_hidden) {
    if (layer < 0 || layer > config_.n_layers) {
      throw ConfigError("lm: loss hidden gradient layer out of range");
    }
    if (m.rows() != T || m.cols() != d) {
      throw ConfigError("lm: loss hidden gradient has wrong shape");
    }
  }

  if (param_grad && param_grad->size() != params_.size()) {
    throw ConfigError("lm: gradient buffer size mismatch");
  }
  const bool acc = param_grad != nullptr;
  auto data = [&](const std::string& name) {
    return params_.data() + layout_[index_.at(name)].offset;
  };
  auto gdata = [&](const std::string& name) {
    return param_grad->data() + layout_[index_.at(name)].offset;
  };

  // ---- head + final layer norm ----
  Mat dx = Mat::Zero(T, d);
  if (tg.d_logprob.size() != 0) {
    // logprob = logit − lse(row) ⇒ dlogit = dlogprob − p · Σ_v dlogprob
    const Vec rowsum = tg.d_logprob.rowwise().sum();
    Mat dlogits = tg.d_logprob - (ws.probs.array().colwise() * rowsum.array()).matrix();
    Map<const Mat> Whead(data("head.w"), d, V);
    Mat dy = dlogits * Whead.transpose();
    if (acc) {
      Map<Mat> dWhead(gdata("head.w"), d, V);
      dWhead += ws.y.transpose() * dlogits;
    }
    dx = layer_norm_backward(dy, ws.lnf_xhat, ws.lnf_inv, data("ln_f.w"),
                             acc ? gdata("ln_f.w") : nullptr,
                             acc ? gdata("ln_f.b") : nullptr);
  }
  for (const auto& [layer, m] : tg.d_hidden) {
    if (layer == config_.n_layers) dx += m;
  }

  // ---- blocks, top down ----
  for (int64_t l = config_.n_layers - 1; l >= 0; --l) {
    const auto& C = ws.layers[static_cast<size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";
    Map<const Mat> Wq(data(p + "attn.wq"), d, d), Wk(data(p + "attn.wk"), d, d),
        Wv(data(p + "attn.wv"), d, d), Wo(data(p + "attn.wo"), d, d);
    Map<const Mat> W1(data(p + "mlp.w1"), d, config_.d_ff),
        W2(data(p + "mlp.w2"), config_.d_ff, d);

    // x = x_mid + gelu(LN2(x_mid)·W1 + b1)·W2 + b2
    Mat dg = dx * W2.transpose();
    if (acc) {
      Map<Mat> dW2(gdata(p + "mlp.w2"), config_.d_ff, d);
      dW2 += C.g.transpose() * dx;
      Map<RowVec> db2(gdata(p + "mlp.b2"), d);
      db2 += dx.colwise().sum();
    }
    Mat du = dg.cwiseProduct(C.u.unaryExpr([](double z) { return gelu_grad(z); }));
    Mat dbn = du * W1.transpose();
    if (acc) {
      // recompute the LN2 output from its cached normalization
      Map<const RowVec> g2(data(p + "ln2.w"), d), b2v(data(p + "ln2.b"), d);
      Mat bn = C.ln2_xhat.array().rowwise() * g2.array();
      bn.rowwise() += b2v;
      Map<Mat> dW1(gdata(p + "mlp.w1"), d, config_.d_ff);
      dW1 += bn.transpose() * du;
      Map<RowVec> db1(gdata(p + "mlp.b1"), config_.d_ff);
      db1 += du.colwise().sum();
    }
    Mat dx_mid = dx + layer_norm_backward(dbn, C.ln2_xhat, C.ln2_inv,
                                          data(p + "ln2.w"),
                                          acc ? gdata(p + "ln2.w") : nullptr,
                                          acc ? gdata(p + "ln2.b") : nullptr);

    // x_mid = x_in + att_concat·Wo + bo
    Mat dO = dx_mid * Wo.transpose();
    if (acc) {
      Map<Mat> dWo(gdata(p + "attn.wo"), d, d);
      dWo += C.att_concat.transpose() * dx_mid;
      Map<RowVec> dbo(gdata(p + "attn.bo"), d);
      dbo += dx_mid.colwise().sum();
    }
    Mat dq = Mat::Zero(T, d), dk = Mat::Zero(T, d), dv = Mat::Zero(T, d);
    for (int64_t h = 0; h < H; ++h) {
      const Mat& A = C.att[static_cast<size_t>(h)];
      auto dOh = dO.middleCols(h * dh, dh);
      auto Qh = C.q.middleCols(h * dh, dh);
      auto Kh = C.k.middleCols(h * dh, dh);
      auto Vh = C.v.middleCols(h * dh, dh);
      Mat dA = dOh * Vh.transpose();
      dv.middleCols(h * dh, dh) = A.transpose() * dOh;
      Mat dS(T, T);
      for (int64_t i = 0; i < T; ++i) {
        const double s = A.row(i).dot(dA.row(i));
        dS.row(i) = A.row(i).cwiseProduct((dA.row(i).array() - s).matrix());
      }
      dq.middleCols(h * dh, dh) = (dS * Kh) * att_scale;
      dk.middleCols(h * dh, dh) = (dS.transpose() * Qh) * att_scale;
    }
    Mat da = dq * Wq.transpose() + dk * Wk.transpose() + dv * Wv.transpose();
    if (acc) {
      Map<const RowVec> g1(data(p + "ln1.w"), d), b1v(data(p + "ln1.b"), d);
      Mat a = C.ln1_xhat.array().rowwise() * g1.array();
      a.rowwise() += b1v;
      Map<Mat> dWq(gdata(p + "attn.wq"), d, d), dWk(gdata(p + "attn.wk"), d, d),
          dWv(gdata(p + "attn.wv"), d, d);
      dWq += a.transpose() * dq;
      dWk += a.transpose() * dk;
      dWv += a.transpose() * dv;
      Map<RowVec> dbq(gdata(p + "attn.bq"), d), dbk(gdata(p + "attn.bk"), d),
          dbv(gdata(p + "attn.bv"), d);
      dbq += dq.colwise().sum();
      dbk += dk.colwise().sum();
      dbv += dv.colwise().sum();
    }
    dx = dx_mid + layer_norm_backward(da, C.ln1_xhat, C.ln1_inv, data(p + "ln1.w"),
                                      acc ? gdata(p + "ln1.w") : nullptr,
                                      acc ? gdata(p + "ln1.b") : nullptr);
    for (const auto& [layer, m] : tg.d_hidden) {
      if (layer == l) dx += m;
    }
  }

  if (acc) {
    Map<Mat> demb(gdata("tok_emb"), V, d);
    Map<Mat> dpos(gdata("pos_emb"), config_.max_seq, d);
    for (int64_t t = 0; t < T; ++t) {
      demb.row(ids[static_cast<size_t>(t)]) += dx.row(t);
      dpos.row(t) += dx.row(t);
    }
  }
  return BackwardResult{tg.loss, std::move(dx)};
}

Mat Lm::onehot_grad(const TokenSeq& ids, const std::vector<int64_t>& mutable_positions,
                    const LossFn& loss_fn) const {
  for (int64_t p : mutable_positions) {
    if (p < 0 || p >= static_cast<int64_t>(ids.size())) {
      throw ConfigError("lm: mutable position out of range");
    }
  }
  BackwardResult br = backward(ids, loss_fn, nullptr);
  Map<const Mat> emb(params_.data() + layout_[index_.at("tok_emb")].offset,
                     config_.vocab_size, config_.d_model);
  Mat out(static_cast<Eigen::Index>(mutable_positions.size()), config_.vocab_size);
  for (size_t i = 0; i < mutable_positions.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) =
        br.d_emb.row(mutable_positions[i]) * emb.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

void adam_loop(Lm& model, const TrainConfig& cfg,
               const std::function<double(int64_t, std::vector<double>&)>& batch_grad,
               std::vector<double>* loss_log) {
  cfg.validate();
  auto& w = model.params();
  const size_t n = w.size();
  std::vector<double> grad(n), m(n, 0.0), v(n, 0.0);
  for (int64_t step = 0; step < cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double loss = batch_grad(step, grad);
    if (!std::isfinite(loss)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step));
    }
    if (cfg.grad_clip > 0.0) {
      double sq = 0.0;
      for (double gi : grad) sq += gi * gi;
      if (!std::isfinite(sq)) {
        throw NumericError("train: non-finite gradient at step " + std::to_string(step));
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const double scale = cfg.grad_clip / norm;
        for (double& gi : grad) gi *= scale;
      }
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
    for (size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      w[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }
    if (loss_log) loss_log->push_back(loss);
    if ((step + 1) % 100 == 0) {
      log_debug("train step " + std::to_string(step + 1) + "/" +
                std::to_string(cfg.steps) + " loss " + std::to_string(loss));
    }
  }
}

ModelCheckpoint train_lm(const ModelCheckpoint& ckpt,
                         const std::vector<corpus::Sentence>& data,
                         const corpus::Tokenizer& tok, const TrainConfig& cfg,
                         const std::string& tag, std::vector<double>* loss_log) {
  cfg.validate();
  if (cfg.steps == 0) {
    ModelCheckpoint out = ckpt;
    out.tag = tag;
    out.validate();
    return out;
  }
  if (data.empty()) throw ConfigError("train: empty dataset with steps > 0");

  std::vector<TokenSeq> seqs;
  seqs.reserve(data.size());
  for (const auto& s : data) seqs.push_back(frame_sentence(tok, s.text, ckpt.config.max_seq));

  Lm model(ckpt);
  Rng rng(cfg.seed);
  adam_loop(
      model, cfg,
      [&](int64_t, std::vector<double>& grad) {
        std::vector<size_t> batch(static_cast<size_t>(cfg.batch_size));
        int64_t total_positions = 0;
        for (auto& b : batch) {
          b = rng.uniform_int(seqs.size());
          total_positions += static_cast<int64_t>(seqs[b].size()) - 1;
        }
        const double coeff = 1.0 / static_cast<double>(total_positions);
        double loss = 0.0;
        for (size_t b : batch) {
          const TokenSeq& seq = seqs[b];
          auto ce = [&](const ForwardTrace& tr) {
            TraceGrad tg;
            tg.d_logprob = Mat::Zero(static_cast<Eigen::Index>(seq.size()),
                                     model.config().vocab_size);
            for (size_t t = 0; t + 1 < seq.size(); ++t) {
              tg.loss -= coeff * tr.token_logprobs[t];
              tg.d_logprob(static_cast<Eigen::Index>(t), seq[t + 1]) = -coeff;
            }
            return tg;
          };
          loss += model.backward(seq, ce, &grad).loss;
        }
        return loss;
      },
      loss_log);
  return model.to_checkpoint(tag);
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

namespace {

Vec softmax_temp(const Vec& logprobs, double temp) {
  Vec z = logprobs / temp;
  const double m = z.maxCoeff();
  Vec p = (z.array() - m).exp();
  return p / p.sum();
}

void check_mix_weights(double w_prefer, double w_likelihood) {
  if (w_prefer < 0.0 || w_likelihood < 0.0 ||
      std::abs(w_prefer + w_likelihood - 1.0) > 1e-9) {
    throw ConfigError("sample: mixture weights must be nonnegative and sum to 1");
  }
  if (!(w_prefer > w_likelihood)) {
    throw ConfigError("sample: w_prefer must exceed w_likelihood");
  }
}

}  // namespace

Vec mixed_next_dist(const Lm& theta, const Lm& theta_f, const TokenSeq& ctx,
                    double w_prefer, double w_likelihood, double temp,
                    int64_t top_k) {
  check_mix_weights(w_prefer, w_likelihood);
  if (temp <= 0.0) throw ConfigError("sample: temp must be > 0");
  const Vec pf = softmax_temp(theta_f.next_logprobs(ctx), temp);
  const Vec pb = softmax_temp(theta.next_logprobs(ctx), temp);
  Vec s = w_prefer * pf + w_likelihood * pb;
  const int64_t V = s.size();
  if (top_k > 0 && top_k < V) {
    std::vector<int64_t> order(static_cast<size_t>(V));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      if (s(a) != s(b)) return s(a) > s(b);
      return a < b;
    });
    Vec trunc = Vec::Zero(V);
    for (int64_t i = 0; i < top_k; ++i) trunc(order[static_cast<size_t>(i)]) = s(order[static_cast<size_t>(i)]);
    s = trunc / trunc.sum();
  }
  return s;
}

TokenId sample_from_dist(const Vec& probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  TokenId last_positive = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs(i) <= 0.0) continue;
    last_positive = static_cast<TokenId>(i);
    cum += probs(i);
    if (u < cum) return static_cast<TokenId>(i);
  }
  return last_positive;  // u landed in the rounding tail
}

TokenSeq sample_mixed(const Lm& theta, const Lm& theta_f, const TokenSeq& prompt,
                      double w_prefer, double w_likelihood, double temp,
                      int64_t top_k, int64_t max_new, uint64_t seed) {
  check_mix_weights(w_prefer, w_likelihood);
  if (theta.tokenizer_hash() != theta_f.tokenizer_hash() ||
      theta.config().vocab_size != theta_f.config().vocab_size) {
    throw CompatError("sample: models do not share a tokenizer");
  }
  if (prompt.empty()) throw ConfigError("sample: prompt must be non-empty");
  const int64_t window = std::min(theta.config().max_seq, theta_f.config().max_seq);

  TokenSeq ctx = prompt;
  TokenSeq out;
  Rng rng(seed);
  for (int64_t i = 0; i < max_new; ++i) {
    if (static_cast<int64_t>(ctx.size()) >= window) break;
    const Vec s = mixed_next_dist(theta, theta_f, ctx, w_prefer, w_likelihood, temp,
                                  top_k);
    const TokenId t = sample_from_dist(s, rng);
    if (t == kEotId) break;
    ctx.push_back(t);
    out.push_back(t);
  }
  return out;
}

TokenSeq greedy_decode(const Lm& model, const TokenSeq& prompt, int64_t n) {
  if (prompt.empty()) throw ConfigError("decode: prompt must be non-empty");
  TokenSeq ctx = prompt;
  TokenSeq out;
  for (int64_t i = 0; i < n; ++i) {
    if (static_cast<int64_t>(ctx.size()) >= model.config().max_seq) break;
    const Vec lp = model.next_logprobs(ctx);
    TokenId best = 0;
    for (Eigen::Index v = 1; v < lp.size(); ++v) {
      if (lp(v) > lp(best)) best = static_cast<TokenId>(v);
    }
    ctx.push_back(best);
    out.push_back(best);
  }
  return out;
}

}  // namespace ula::lm
