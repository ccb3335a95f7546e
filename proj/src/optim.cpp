#include "duplex/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "duplex/errors.hpp"
#include "duplex/hashing.hpp"

namespace duplex::optim {

using pairs::PreferencePair;
using stream::kAudioVocab;
using stream::kLevels;
using stream::kTextVocab;

namespace {

constexpr Eigen::Index kBlock = 128;  // frames per logits block

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

double norm_by(double x, long long n) {
  return x / static_cast<double>(std::max<long long>(1, n));
}

double inv_count(long long n) {
  return 1.0 / static_cast<double>(std::max<long long>(1, n));
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

void fill_uniform(Eigen::MatrixXd& m, std::uint64_t seed, double scale) {
  std::uint64_t state = splitmix64(seed);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      state = splitmix64(state + 0x9e3779b97f4a7c15ull);
      m(r, c) = scale * unit_double(state);
    }
}

}  // namespace

PolicyParams make_policy(const PolicyDims& dims, std::uint64_t seed,
                         double init_scale) {
  if (dims.embed_dim <= 0 || dims.audio_feat_dim <= 0)
    throw ConfigError("policy dimensions must be positive");
  PolicyParams p;
  p.embed_dim = dims.embed_dim;
  p.audio_feat_dim = dims.audio_feat_dim;
  const int feat_width = 2 * kLevels * dims.audio_feat_dim;
  p.text_embed.resize(kTextVocab, dims.embed_dim);
  p.audio_proj.resize(dims.embed_dim, feat_width);
  p.text_out.resize(kTextVocab, dims.embed_dim);
  p.audio_out.resize(static_cast<Eigen::Index>(kLevels) * kAudioVocab,
                     dims.embed_dim);
  fill_uniform(p.text_embed, derive_seed(seed, "text_embed"), init_scale);
  fill_uniform(p.audio_proj, derive_seed(seed, "audio_proj"), init_scale);
  fill_uniform(p.text_out, derive_seed(seed, "text_out"), init_scale);
  fill_uniform(p.audio_out, derive_seed(seed, "audio_out"), init_scale);
  return p;
}

bool same_shape(const PolicyParams& a, const PolicyParams& b) {
  return a.embed_dim == b.embed_dim && a.audio_feat_dim == b.audio_feat_dim;
}

PolicyGrad PolicyGrad::zeros_like(const PolicyParams& p) {
  PolicyGrad g;
  g.text_embed = Eigen::MatrixXd::Zero(p.text_embed.rows(), p.text_embed.cols());
  g.audio_proj = Eigen::MatrixXd::Zero(p.audio_proj.rows(), p.audio_proj.cols());
  g.text_out = Eigen::MatrixXd::Zero(p.text_out.rows(), p.text_out.cols());
  g.audio_out = Eigen::MatrixXd::Zero(p.audio_out.rows(), p.audio_out.cols());
  return g;
}

void PolicyGrad::scale(double s) {
  text_embed *= s;
  audio_proj *= s;
  text_out *= s;
  audio_out *= s;
}

void add_scaled(PolicyParams& params, const PolicyGrad& grad, double scale) {
  params.text_embed.noalias() += scale * grad.text_embed;
  params.audio_proj.noalias() += scale * grad.audio_proj;
  params.text_out.noalias() += scale * grad.text_out;
  params.audio_out.noalias() += scale * grad.audio_out;
}

Eigen::MatrixXd& tensor_of(PolicyParams& p, int tensor) {
  switch (tensor) {
    case 0: return p.text_embed;
    case 1: return p.audio_proj;
    case 2: return p.text_out;
    case 3: return p.audio_out;
  }
  throw Error("unknown tensor index");
}

const Eigen::MatrixXd& tensor_of(const PolicyGrad& g, int tensor) {
  switch (tensor) {
    case 0: return g.text_embed;
    case 1: return g.audio_proj;
    case 2: return g.text_out;
    case 3: return g.audio_out;
  }
  throw Error("unknown tensor index");
}

namespace {

constexpr std::uint64_t kParamsMagic = 0x44505850594c3031ull;  // "DPXPYL01"

void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) *
                                         static_cast<std::size_t>(m.size())));
}

void read_matrix(std::ifstream& in, Eigen::MatrixXd& m) {
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) *
                                       static_cast<std::size_t>(m.size())));
}

}  // namespace

void save_params(const std::string& path, const PolicyParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write params file " + path);
  const std::uint64_t magic = kParamsMagic;
  const std::int32_t dims[4] = {p.embed_dim, p.audio_feat_dim, kTextVocab,
                                kAudioVocab};
  out.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  write_matrix(out, p.text_embed);
  write_matrix(out, p.audio_proj);
  write_matrix(out, p.text_out);
  write_matrix(out, p.audio_out);
}

PolicyParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open params file " + path);
  std::uint64_t magic = 0;
  std::int32_t dims[4] = {0, 0, 0, 0};
  in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (magic != kParamsMagic || dims[2] != kTextVocab || dims[3] != kAudioVocab)
    throw Error("unrecognized params file " + path);
  PolicyParams p = make_policy({dims[0], dims[1]}, 0, 0.0);
  read_matrix(in, p.text_embed);
  read_matrix(in, p.audio_proj);
  read_matrix(in, p.text_out);
  read_matrix(in, p.audio_out);
  if (!in) throw Error("truncated params file " + path);
  return p;
}

// ---------------------------------------------------------------------------
// Loss configuration names
// ---------------------------------------------------------------------------

Algorithm algorithm_from_name(const std::string& name) {
  if (name == "dpo") return Algorithm::Dpo;
  if (name == "dpo-ln") return Algorithm::DpoLn;
  if (name == "simpo") return Algorithm::SimPo;
  if (name == "apo-zero") return Algorithm::ApoZero;
  throw ConfigError("unknown algorithm '" + name + "'");
}

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Dpo: return "dpo";
    case Algorithm::DpoLn: return "dpo-ln";
    case Algorithm::SimPo: return "simpo";
    case Algorithm::ApoZero: return "apo-zero";
  }
  throw Error("unknown algorithm");
}

StreamStrategy strategy_from_name(const std::string& name) {
  if (name == "t") return StreamStrategy::TextOnly;
  if (name == "t+a") return StreamStrategy::TextPlusAudio;
  if (name == "t,a") return StreamStrategy::TextCommaAudio;
  if (name == "t,ce") return StreamStrategy::TextCeOnAudio;
  throw ConfigError("unknown stream strategy '" + name + "'");
}

std::string strategy_name(StreamStrategy s) {
  switch (s) {
    case StreamStrategy::TextOnly: return "t";
    case StreamStrategy::TextPlusAudio: return "t+a";
    case StreamStrategy::TextCommaAudio: return "t,a";
    case StreamStrategy::TextCeOnAudio: return "t,ce";
  }
  throw Error("unknown strategy");
}

bool need_audio_head(const LossConfig& cfg) {
  return cfg.strategy != StreamStrategy::TextOnly;
}

// ---------------------------------------------------------------------------
// Sequence features and head evaluation
// ---------------------------------------------------------------------------

namespace {

double feature_component(int tag, int level, std::int32_t token, int e) {
  std::uint64_t h = fnv1a64(static_cast<std::uint64_t>(tag));
  h = fnv1a64(static_cast<std::uint64_t>(level), h);
  h = fnv1a64(static_cast<std::uint64_t>(token), h);
  h = fnv1a64(static_cast<std::uint64_t>(e), h);
  return unit_double(splitmix64(h));
}

struct SeqFeatures {
  Eigen::VectorXi targets;          // text token per frame
  Eigen::VectorXi prev;             // previous text token (pad at frame 0)
  stream::TokenGrid audio_targets;  // [F x levels]
  Eigen::MatrixXd cur_feats;        // [2*levels*E x F], text-head inputs
  Eigen::MatrixXd lag_feats;        // [2*levels*E x F], audio-head inputs
  Mask mask;
  long long scored = 0;
};

SeqFeatures build_seq_features(const stream::Multistream& s, const Mask& mask,
                               int feat_dim, bool need_audio) {
  const Eigen::Index frames = s.frames();
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != frames)
    throw Error("mask outside sequence");

  SeqFeatures f;
  f.targets = s.text;
  f.prev.resize(frames);
  for (Eigen::Index t = 0; t < frames; ++t)
    f.prev(t) = t == 0 ? s.pad_id : s.text(t - 1);
  f.audio_targets = s.model_audio;
  f.mask = mask.empty() ? Mask(static_cast<std::size_t>(frames), 0) : mask;
  for (auto m : f.mask) f.scored += m ? 1 : 0;

  const int width = 2 * kLevels * feat_dim;
  f.cur_feats.resize(width, frames);
  if (need_audio) f.lag_feats.resize(width, frames);
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int q = 0; q < kLevels; ++q) {
      const std::int32_t model_cur = s.model_audio(t, q);
      const std::int32_t model_prev =
          t == 0 ? s.silence_audio_id : s.model_audio(t - 1, q);
      const std::int32_t user_cur = s.user_audio(t, q);
      for (int e = 0; e < feat_dim; ++e) {
        const Eigen::Index mrow = static_cast<Eigen::Index>(q) * feat_dim + e;
        const Eigen::Index urow =
            static_cast<Eigen::Index>(kLevels + q) * feat_dim + e;
        f.cur_feats(mrow, t) = feature_component(0, q, model_cur, e);
        f.cur_feats(urow, t) = feature_component(1, q, user_cur, e);
        if (need_audio) {
          f.lag_feats(mrow, t) = feature_component(0, q, model_prev, e);
          f.lag_feats(urow, t) = feature_component(1, q, user_cur, e);
        }
      }
    }
  }
  return f;
}

Eigen::MatrixXd hidden_states(const PolicyParams& p,
                              const Eigen::VectorXi& embed_tokens,
                              const Eigen::MatrixXd& feats) {
  const Eigen::Index frames = embed_tokens.size();
  Eigen::MatrixXd h(p.embed_dim, frames);
  for (Eigen::Index t = 0; t < frames; ++t)
    h.col(t) = p.text_embed.row(embed_tokens(t)).transpose();
  h.noalias() += p.audio_proj * feats;
  return h;
}

struct HeadForward {
  double total = 0;
  std::vector<double> per_frame;
};

HeadForward text_head_forward(const PolicyParams& p, const SeqFeatures& f,
                              const Eigen::MatrixXd& h, bool want_per_frame) {
  HeadForward out;
  const Eigen::Index frames = f.targets.size();
  Eigen::MatrixXd logits;
  for (Eigen::Index b0 = 0; b0 < frames; b0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, frames - b0);
    logits.noalias() = p.text_out * h.middleCols(b0, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index t = b0 + j;
      if (!f.mask[static_cast<std::size_t>(t)]) continue;
      const auto col = logits.col(j);
      const double mx = col.maxCoeff();
      const double log_z = mx + std::log((col.array() - mx).exp().sum());
      const double lp = col(f.targets(t)) - log_z;
      out.total += lp;
      if (want_per_frame) out.per_frame.push_back(lp);
    }
  }
  return out;
}

void text_head_backward(const PolicyParams& p, const SeqFeatures& f,
                        const Eigen::MatrixXd& h, double coeff,
                        PolicyGrad& grad) {
  if (coeff == 0 || f.scored == 0) return;
  const Eigen::Index frames = f.targets.size();
  Eigen::MatrixXd h_grad = Eigen::MatrixXd::Zero(p.embed_dim, frames);
  Eigen::MatrixXd logits, g;
  for (Eigen::Index b0 = 0; b0 < frames; b0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, frames - b0);
    bool any = false;
    for (Eigen::Index j = 0; j < n && !any; ++j)
      any = f.mask[static_cast<std::size_t>(b0 + j)] != 0;
    if (!any) continue;
    logits.noalias() = p.text_out * h.middleCols(b0, n);
    g = Eigen::MatrixXd::Zero(kTextVocab, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index t = b0 + j;
      if (!f.mask[static_cast<std::size_t>(t)]) continue;
      const auto col = logits.col(j);
      const double mx = col.maxCoeff();
      Eigen::VectorXd probs = (col.array() - mx).exp();
      probs /= probs.sum();
      g.col(j) = -coeff * probs;
      g(f.targets(t), j) += coeff;
    }
    grad.text_out.noalias() += g * h.middleCols(b0, n).transpose();
    h_grad.middleCols(b0, n).noalias() = p.text_out.transpose() * g;
  }
  grad.audio_proj.noalias() += h_grad * f.cur_feats.transpose();
  for (Eigen::Index t = 0; t < frames; ++t)
    if (f.mask[static_cast<std::size_t>(t)])
      grad.text_embed.row(f.prev(t)) += h_grad.col(t).transpose();
}

HeadForward audio_head_forward(const PolicyParams& p, const SeqFeatures& f,
                               const Eigen::MatrixXd& h, bool want_per_frame) {
  HeadForward out;
  const Eigen::Index frames = f.targets.size();
  Eigen::MatrixXd logits;
  for (Eigen::Index b0 = 0; b0 < frames; b0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, frames - b0);
    logits.noalias() = p.audio_out * h.middleCols(b0, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index t = b0 + j;
      if (!f.mask[static_cast<std::size_t>(t)]) continue;
      double lp = 0;
      for (int q = 0; q < kLevels; ++q) {
        const auto seg =
            logits.col(j).segment(static_cast<Eigen::Index>(q) * kAudioVocab,
                                  kAudioVocab);
        const double mx = seg.maxCoeff();
        const double log_z = mx + std::log((seg.array() - mx).exp().sum());
        lp += seg(f.audio_targets(t, q)) - log_z;
      }
      out.total += lp;
      if (want_per_frame) out.per_frame.push_back(lp);
    }
  }
  return out;
}

void audio_head_backward(const PolicyParams& p, const SeqFeatures& f,
                         const Eigen::MatrixXd& h, double coeff,
                         PolicyGrad& grad) {
  if (coeff == 0 || f.scored == 0) return;
  const Eigen::Index frames = f.targets.size();
  Eigen::MatrixXd h_grad = Eigen::MatrixXd::Zero(p.embed_dim, frames);
  Eigen::MatrixXd logits, g;
  for (Eigen::Index b0 = 0; b0 < frames; b0 += kBlock) {
    const Eigen::Index n = std::min(kBlock, frames - b0);
    bool any = false;
    for (Eigen::Index j = 0; j < n && !any; ++j)
      any = f.mask[static_cast<std::size_t>(b0 + j)] != 0;
    if (!any) continue;
    logits.noalias() = p.audio_out * h.middleCols(b0, n);
    g = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(kLevels) * kAudioVocab,
                              n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const Eigen::Index t = b0 + j;
      if (!f.mask[static_cast<std::size_t>(t)]) continue;
      for (int q = 0; q < kLevels; ++q) {
        const Eigen::Index base = static_cast<Eigen::Index>(q) * kAudioVocab;
        const auto seg = logits.col(j).segment(base, kAudioVocab);
        const double mx = seg.maxCoeff();
        Eigen::VectorXd probs = (seg.array() - mx).exp();
        probs /= probs.sum();
        g.col(j).segment(base, kAudioVocab) = -coeff * probs;
        g(base + f.audio_targets(t, q), j) += coeff;
      }
    }
    grad.audio_out.noalias() += g * h.middleCols(b0, n).transpose();
    h_grad.middleCols(b0, n).noalias() = p.audio_out.transpose() * g;
  }
  grad.audio_proj.noalias() += h_grad * f.lag_feats.transpose();
  for (Eigen::Index t = 0; t < frames; ++t)
    if (f.mask[static_cast<std::size_t>(t)])
      grad.text_embed.row(f.targets(t)) += h_grad.col(t).transpose();
}

// Per-pair tensors shared by every evaluation of the same pair.
struct PairTensors {
  std::string id;
  SeqFeatures winner, loser;
  long long len_w = 0, len_l = 0;
};

PairTensors build_pair_tensors(const PreferencePair& pair, int feat_dim,
                               bool need_audio) {
  PairTensors t;
  t.id = pair.id;
  const auto ctx = static_cast<std::size_t>(pair.context.frames());

  Mask mask_w(ctx, 0);
  mask_w.insert(mask_w.end(), pair.winner_mask.begin(), pair.winner_mask.end());
  t.winner = build_seq_features(stream::concat(pair.context, pair.winner),
                                mask_w, feat_dim, need_audio);

  Mask mask_l(ctx, 0);
  mask_l.insert(mask_l.end(), pair.loser_mask.begin(), pair.loser_mask.end());
  t.loser = build_seq_features(stream::concat(pair.context, pair.loser),
                               mask_l, feat_dim, need_audio);

  t.len_w = t.winner.scored;
  t.len_l = t.loser.scored;
  return t;
}

PairScores score_pair(const PolicyParams& p, const PairTensors& t,
                      bool need_audio) {
  PairScores s;
  s.len_w = t.len_w;
  s.len_l = t.len_l;
  s.alen_w = t.len_w * kLevels;
  s.alen_l = t.len_l * kLevels;
  {
    const Eigen::MatrixXd h = hidden_states(p, t.winner.prev, t.winner.cur_feats);
    s.text_w = text_head_forward(p, t.winner, h, false).total;
  }
  {
    const Eigen::MatrixXd h = hidden_states(p, t.loser.prev, t.loser.cur_feats);
    s.text_l = text_head_forward(p, t.loser, h, false).total;
  }
  if (need_audio) {
    {
      const Eigen::MatrixXd h =
          hidden_states(p, t.winner.targets, t.winner.lag_feats);
      s.audio_w = audio_head_forward(p, t.winner, h, false).total;
    }
    {
      const Eigen::MatrixXd h =
          hidden_states(p, t.loser.targets, t.loser.lag_feats);
      s.audio_l = audio_head_forward(p, t.loser, h, false).total;
    }
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public sequence scoring
// ---------------------------------------------------------------------------

SeqLogProb seq_log_prob(const PolicyParams& p, const stream::Multistream& s,
                        const Mask& mask, Head head) {
  const bool audio = head == Head::Audio;
  const SeqFeatures f = build_seq_features(s, mask, p.audio_feat_dim, audio);
  const Eigen::MatrixXd h = audio
                                ? hidden_states(p, f.targets, f.lag_feats)
                                : hidden_states(p, f.prev, f.cur_feats);
  const HeadForward fwd = audio ? audio_head_forward(p, f, h, true)
                                : text_head_forward(p, f, h, true);
  return {fwd.total, fwd.per_frame};
}

PolicyGrad seq_log_prob_grad(const PolicyParams& p,
                             const stream::Multistream& s, const Mask& mask,
                             Head head) {
  const bool audio = head == Head::Audio;
  const SeqFeatures f = build_seq_features(s, mask, p.audio_feat_dim, audio);
  PolicyGrad grad = PolicyGrad::zeros_like(p);
  if (audio) {
    const Eigen::MatrixXd h = hidden_states(p, f.targets, f.lag_feats);
    audio_head_backward(p, f, h, 1.0, grad);
  } else {
    const Eigen::MatrixXd h = hidden_states(p, f.prev, f.cur_feats);
    text_head_backward(p, f, h, 1.0, grad);
  }
  return grad;
}

PairScores policy_scores(const PolicyParams& p, const PreferencePair& pair,
                         bool need_audio) {
  return score_pair(p, build_pair_tensors(pair, p.audio_feat_dim, need_audio),
                    need_audio);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

PairLoss pair_loss_from_scores(const PairScores& theta, const PairScores& ref,
                               const LossConfig& cfg) {
  const double beta = cfg.beta;
  PairLoss out;

  const double rho_tw = theta.text_w - ref.text_w;
  const double rho_tl = theta.text_l - ref.text_l;
  const double rho_aw = theta.audio_w - ref.audio_w;
  const double rho_al = theta.audio_l - ref.audio_l;

  const bool plus = cfg.strategy == StreamStrategy::TextPlusAudio;
  const bool comma = cfg.strategy == StreamStrategy::TextCommaAudio;
  const bool aux_ce = cfg.strategy == StreamStrategy::TextCeOnAudio;

  switch (cfg.algorithm) {
    case Algorithm::Dpo:
    case Algorithm::DpoLn: {
      const bool ln = cfg.algorithm == Algorithm::DpoLn;
      const double tw = ln ? norm_by(rho_tw, theta.len_w) : rho_tw;
      const double tl = ln ? norm_by(rho_tl, theta.len_l) : rho_tl;
      const double aw = ln ? norm_by(rho_aw, theta.alen_w) : rho_aw;
      const double al = ln ? norm_by(rho_al, theta.alen_l) : rho_al;
      const double dtw = ln ? beta * inv_count(theta.len_w) : beta;
      const double dtl = ln ? beta * inv_count(theta.len_l) : beta;
      const double daw = ln ? beta * inv_count(theta.alen_w) : beta;
      const double dal = ln ? beta * inv_count(theta.alen_l) : beta;

      const double m_text = beta * (tw - tl);
      if (plus) {
        const double m = m_text + beta * (aw - al);
        const double slope = stable_sigmoid(m) - 1.0;
        out.loss = -log_sigmoid(m);
        out.margin = m;
        out.c_text_w = slope * dtw;
        out.c_text_l = -slope * dtl;
        out.c_audio_w = slope * daw;
        out.c_audio_l = -slope * dal;
      } else if (comma) {
        const double m_audio = beta * (aw - al);
        const double st = stable_sigmoid(m_text) - 1.0;
        const double sa = stable_sigmoid(m_audio) - 1.0;
        out.loss = -log_sigmoid(m_text) - log_sigmoid(m_audio);
        out.margin = m_text + m_audio;
        out.c_text_w = st * dtw;
        out.c_text_l = -st * dtl;
        out.c_audio_w = sa * daw;
        out.c_audio_l = -sa * dal;
      } else {
        const double st = stable_sigmoid(m_text) - 1.0;
        out.loss = -log_sigmoid(m_text);
        out.margin = m_text;
        out.c_text_w = st * dtw;
        out.c_text_l = -st * dtl;
        if (aux_ce) {
          out.loss += -norm_by(theta.audio_w, theta.alen_w);
          out.c_audio_w = -inv_count(theta.alen_w);
        }
      }
      break;
    }

    case Algorithm::SimPo: {
      const double tw = norm_by(theta.text_w, theta.len_w);
      const double tl = norm_by(theta.text_l, theta.len_l);
      const double aw = norm_by(theta.audio_w, theta.alen_w);
      const double al = norm_by(theta.audio_l, theta.alen_l);
      const double dtw = beta * inv_count(theta.len_w);
      const double dtl = beta * inv_count(theta.len_l);
      const double daw = beta * inv_count(theta.alen_w);
      const double dal = beta * inv_count(theta.alen_l);

      if (plus) {
        const double m = beta * ((tw + aw) - (tl + al)) - cfg.gamma;
        const double slope = stable_sigmoid(m) - 1.0;
        out.loss = -log_sigmoid(m);
        out.margin = m;
        out.c_text_w = slope * dtw;
        out.c_text_l = -slope * dtl;
        out.c_audio_w = slope * daw;
        out.c_audio_l = -slope * dal;
      } else if (comma) {
        const double m_text = beta * (tw - tl) - cfg.gamma;
        const double m_audio = beta * (aw - al) - cfg.gamma;
        const double st = stable_sigmoid(m_text) - 1.0;
        const double sa = stable_sigmoid(m_audio) - 1.0;
        out.loss = -log_sigmoid(m_text) - log_sigmoid(m_audio);
        out.margin = m_text + m_audio;
        out.c_text_w = st * dtw;
        out.c_text_l = -st * dtl;
        out.c_audio_w = sa * daw;
        out.c_audio_l = -sa * dal;
      } else {
        const double m_text = beta * (tw - tl) - cfg.gamma;
        const double st = stable_sigmoid(m_text) - 1.0;
        out.loss = -log_sigmoid(m_text);
        out.margin = m_text;
        out.c_text_w = st * dtw;
        out.c_text_l = -st * dtl;
        if (aux_ce) {
          out.loss += -norm_by(theta.audio_w, theta.alen_w);
          out.c_audio_w = -inv_count(theta.alen_w);
        }
      }
      break;
    }

    case Algorithm::ApoZero: {
      // Length-controlled anchored objective: push the winner's normalized
      // reward up and the loser's down, each through its own sigmoid.
      const double tw = norm_by(rho_tw, theta.len_w);
      const double tl = norm_by(rho_tl, theta.len_l);
      const double aw = norm_by(rho_aw, theta.alen_w);
      const double al = norm_by(rho_al, theta.alen_l);
      const double dtw = beta * inv_count(theta.len_w);
      const double dtl = beta * inv_count(theta.len_l);
      const double daw = beta * inv_count(theta.alen_w);
      const double dal = beta * inv_count(theta.alen_l);

      auto sig_prime = [](double x) {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s);
      };

      if (plus) {
        const double qw = beta * (tw + aw);
        const double ql = beta * (tl + al);
        out.loss = stable_sigmoid(ql) - stable_sigmoid(qw);
        out.margin = qw - ql;
        out.c_text_w = -sig_prime(qw) * dtw;
        out.c_audio_w = -sig_prime(qw) * daw;
        out.c_text_l = sig_prime(ql) * dtl;
        out.c_audio_l = sig_prime(ql) * dal;
      } else if (comma) {
        const double qwt = beta * tw, qlt = beta * tl;
        const double qwa = beta * aw, qla = beta * al;
        out.loss = (stable_sigmoid(qlt) - stable_sigmoid(qwt)) +
                   (stable_sigmoid(qla) - stable_sigmoid(qwa));
        out.margin = (qwt - qlt) + (qwa - qla);
        out.c_text_w = -sig_prime(qwt) * dtw;
        out.c_text_l = sig_prime(qlt) * dtl;
        out.c_audio_w = -sig_prime(qwa) * daw;
        out.c_audio_l = sig_prime(qla) * dal;
      } else {
        const double qw = beta * tw, ql = beta * tl;
        out.loss = stable_sigmoid(ql) - stable_sigmoid(qw);
        out.margin = qw - ql;
        out.c_text_w = -sig_prime(qw) * dtw;
        out.c_text_l = sig_prime(ql) * dtl;
        if (aux_ce) {
          out.loss += -norm_by(theta.audio_w, theta.alen_w);
          out.c_audio_w = -inv_count(theta.alen_w);
        }
      }
      break;
    }
  }
  return out;
}

namespace {

struct BatchEvalInput {
  const std::vector<PairTensors>* tensors = nullptr;
  const std::vector<PairScores>* ref_scores = nullptr;
};

BatchResult eval_batch(const PolicyParams& theta, const BatchEvalInput& in,
                       const std::vector<std::size_t>& indices,
                       const LossConfig& cfg, bool want_grad) {
  const bool audio = need_audio_head(cfg);
  BatchResult out;
  if (want_grad) out.grad = PolicyGrad::zeros_like(theta);
  const double inv_batch = 1.0 / static_cast<double>(indices.size());

  for (const std::size_t i : indices) {
    const PairTensors& t = (*in.tensors)[i];
    const PairScores ref = (*in.ref_scores)[i];
    const PairScores scores = score_pair(theta, t, audio);
    const PairLoss pl = pair_loss_from_scores(scores, ref, cfg);
    if (!std::isfinite(pl.loss))
      throw Error("non-finite loss for pair " + t.id);
    out.loss += pl.loss * inv_batch;
    out.mean_margin += pl.margin * inv_batch;
    out.pref_acc +=
        (pl.margin > 0 ? 1.0 : pl.margin == 0 ? 0.5 : 0.0) * inv_batch;

    if (!want_grad) continue;
    {
      const Eigen::MatrixXd h =
          hidden_states(theta, t.winner.prev, t.winner.cur_feats);
      text_head_backward(theta, t.winner, h, pl.c_text_w * inv_batch, out.grad);
    }
    {
      const Eigen::MatrixXd h =
          hidden_states(theta, t.loser.prev, t.loser.cur_feats);
      text_head_backward(theta, t.loser, h, pl.c_text_l * inv_batch, out.grad);
    }
    if (audio) {
      {
        const Eigen::MatrixXd h =
            hidden_states(theta, t.winner.targets, t.winner.lag_feats);
        audio_head_backward(theta, t.winner, h, pl.c_audio_w * inv_batch,
                            out.grad);
      }
      {
        const Eigen::MatrixXd h =
            hidden_states(theta, t.loser.targets, t.loser.lag_feats);
        audio_head_backward(theta, t.loser, h, pl.c_audio_l * inv_batch,
                            out.grad);
      }
    }
  }
  return out;
}

struct DatasetTensors {
  std::vector<PairTensors> tensors;
  std::vector<PairScores> ref_scores;
  std::vector<std::size_t> all;
};

DatasetTensors prepare(const PolicyParams& ref,
                       const std::vector<PreferencePair>& pairs,
                       const LossConfig& cfg) {
  const bool audio = need_audio_head(cfg);
  DatasetTensors dt;
  dt.tensors.reserve(pairs.size());
  dt.ref_scores.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    dt.tensors.push_back(
        build_pair_tensors(pairs[i], ref.audio_feat_dim, audio));
    dt.ref_scores.push_back(score_pair(ref, dt.tensors.back(), audio));
    dt.all.push_back(i);
  }
  return dt;
}

}  // namespace

BatchResult offline_loss(const PolicyParams& theta, const PolicyParams& ref,
                         const std::vector<PreferencePair>& batch,
                         const LossConfig& cfg) {
  if (batch.empty()) throw Error("offline_loss: empty batch");
  if (!same_shape(theta, ref))
    throw Error("offline_loss: policy and reference shapes differ");
  const DatasetTensors dt = prepare(ref, batch, cfg);
  return eval_batch(theta, {&dt.tensors, &dt.ref_scores}, dt.all, cfg, true);
}

double offline_loss_value(const PolicyParams& theta, const PolicyParams& ref,
                          const std::vector<PreferencePair>& batch,
                          const LossConfig& cfg) {
  if (batch.empty()) throw Error("offline_loss: empty batch");
  const DatasetTensors dt = prepare(ref, batch, cfg);
  return eval_batch(theta, {&dt.tensors, &dt.ref_scores}, dt.all, cfg, false)
      .loss;
}

DatasetEval evaluate_dataset(const PolicyParams& theta,
                             const PolicyParams& ref,
                             const pairs::PreferenceDataset& ds,
                             const LossConfig& cfg) {
  if (ds.pairs.empty()) throw Error("evaluate_dataset: empty dataset");
  const DatasetTensors dt = prepare(ref, ds.pairs, cfg);
  const BatchResult r =
      eval_batch(theta, {&dt.tensors, &dt.ref_scores}, dt.all, cfg, false);
  return {r.loss, r.mean_margin, r.pref_acc};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

double lr_at_step(const TrainConfig& cfg, int step) {
  if (cfg.steps <= 0) return 0.0;
  const int warmup = static_cast<int>(cfg.warmup_fraction * cfg.steps);
  if (step < warmup)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const int tail = std::max(1, cfg.steps - warmup);
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(tail);
  return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

TrainResult train(const pairs::PreferenceDataset& ds,
                  const PolicyParams& initial, const LossConfig& lcfg,
                  const TrainConfig& tcfg) {
  if (ds.pairs.empty()) throw Error("train: empty dataset");
  if (tcfg.batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (tcfg.warmup_fraction < 0 || tcfg.warmup_fraction >= 1)
    throw ConfigError("train: warmup fraction must be in [0, 1)");

  TrainResult result;
  result.params = initial;
  const PolicyParams& ref = initial;  // frozen reference

  const DatasetTensors dt = prepare(ref, ds.pairs, lcfg);

  std::mt19937_64 rng(splitmix64(tcfg.seed));
  std::vector<std::size_t> order(ds.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // forces a shuffle on first use

  const std::size_t batch_size =
      std::min<std::size_t>(static_cast<std::size_t>(tcfg.batch_size),
                            order.size());

  for (int step = 0; step < tcfg.steps; ++step) {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    while (batch.size() < batch_size) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    const double lr = lr_at_step(tcfg, step);
    BatchResult r;
    try {
      r = eval_batch(result.params, {&dt.tensors, &dt.ref_scores}, batch, lcfg,
                     true);
    } catch (const Error& e) {
      throw NumericError(step, e.what());
    }
    if (!std::isfinite(r.loss)) throw NumericError(step, "loss diverged");

    result.log.push_back({step, lr, r.loss, r.mean_margin, r.pref_acc});
    add_scaled(result.params, r.grad, -lr);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

std::vector<ParamCoord> sample_param_coords(const PolicyParams& p,
                                            const PreferencePair& pair,
                                            int count, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedc0de));

  // Rows the pair actually exercises, so half the sample has non-trivial
  // gradients: embedding rows of context/response tokens and output rows of
  // target tokens.
  std::vector<Eigen::Index> text_rows, audio_rows;
  auto collect = [&](const stream::Multistream& s) {
    for (Eigen::Index t = 0; t < s.frames(); ++t) {
      text_rows.push_back(s.text(t));
      for (int q = 0; q < kLevels; ++q)
        audio_rows.push_back(static_cast<Eigen::Index>(q) * kAudioVocab +
                             s.model_audio(t, q));
    }
  };
  collect(pair.context);
  collect(pair.winner);
  collect(pair.loser);
  text_rows.push_back(pair.context.pad_id);

  auto pick = [&](Eigen::Index n) {
    return std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
  };

  std::vector<ParamCoord> coords;
  coords.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    ParamCoord c;
    c.tensor = i % 4;
    const Eigen::MatrixXd& m = tensor_of(const_cast<PolicyParams&>(p), c.tensor);
    const bool active = (i / 4) % 2 == 0;
    if (active && c.tensor == 0 && !text_rows.empty())
      c.row = text_rows[static_cast<std::size_t>(
          pick(static_cast<Eigen::Index>(text_rows.size())))];
    else if (active && c.tensor == 2 && !text_rows.empty())
      c.row = text_rows[static_cast<std::size_t>(
          pick(static_cast<Eigen::Index>(text_rows.size())))];
    else if (active && c.tensor == 3 && !audio_rows.empty())
      c.row = audio_rows[static_cast<std::size_t>(
          pick(static_cast<Eigen::Index>(audio_rows.size())))];
    else
      c.row = pick(m.rows());
    c.col = pick(m.cols());
    coords.push_back(c);
  }
  return coords;
}

GradCheckResult compare_gradient(const PolicyParams& theta,
                                 const PolicyParams& ref,
                                 const PreferencePair& pair,
                                 const LossConfig& cfg, double eps,
                                 const std::vector<ParamCoord>& coords,
                                 const PolicyGrad& analytic) {
  if (eps <= 0) throw ConfigError("grad_check: eps must be positive");
  const bool audio = need_audio_head(cfg);
  const std::vector<PairTensors> tensors = {
      build_pair_tensors(pair, theta.audio_feat_dim, audio)};
  const std::vector<PairScores> ref_scores = {
      score_pair(ref, tensors.front(), audio)};
  const std::vector<std::size_t> one = {0};

  PolicyParams probe = theta;
  auto loss_at = [&]() {
    return eval_batch(probe, {&tensors, &ref_scores}, one, cfg, false).loss;
  };

  GradCheckResult result;
  for (const ParamCoord& c : coords) {
    Eigen::MatrixXd& m = tensor_of(probe, c.tensor);
    const double saved = m(c.row, c.col);
    m(c.row, c.col) = saved + eps;
    const double up = loss_at();
    m(c.row, c.col) = saved - eps;
    const double down = loss_at();
    m(c.row, c.col) = saved;

    const double numeric = (up - down) / (2 * eps);
    const double a = tensor_of(analytic, c.tensor)(c.row, c.col);
    const double rel =
        std::abs(a - numeric) / std::max(1e-12, std::abs(numeric));
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = c;
    }
    ++result.checked;
  }
  return result;
}

GradCheckResult grad_check(const PolicyParams& theta, const PolicyParams& ref,
                           const PreferencePair& pair, const LossConfig& cfg,
                           double eps, int count, std::uint64_t seed) {
  if (count <= 0) return {};
  const auto coords = sample_param_coords(theta, pair, count, seed);
  const BatchResult exact = offline_loss(theta, ref, {pair}, cfg);
  return compare_gradient(theta, ref, pair, cfg, eps, coords, exact.grad);
}

}  // namespace duplex::optim
