#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "duplex/multistream.hpp"
#include "duplex/pairs.hpp"

namespace duplex::optim {

// A small differentiable multistream policy: next text token and next audio
// tokens predicted from the previous text token plus fixed audio features of
// both streams. Losses and gradients are exact and single-threaded so runs
// reproduce bit for bit.

struct PolicyDims {
  int embed_dim = 32;       // hidden width D
  int audio_feat_dim = 8;   // fixed feature width E per audio level
};

struct PolicyParams {
  int embed_dim = 32;
  int audio_feat_dim = 8;
  Eigen::MatrixXd text_embed;  // [text_vocab x D]
  Eigen::MatrixXd audio_proj;  // [D x 2 * levels * E]
  Eigen::MatrixXd text_out;    // [text_vocab x D]
  Eigen::MatrixXd audio_out;   // [levels * audio_vocab x D]
};

/// Uniformly random parameters in [-init_scale, init_scale), deterministic
/// in the seed.
PolicyParams make_policy(const PolicyDims& dims, std::uint64_t seed,
                         double init_scale = 0.1);

bool same_shape(const PolicyParams& a, const PolicyParams& b);

struct PolicyGrad {
  Eigen::MatrixXd text_embed, audio_proj, text_out, audio_out;

  static PolicyGrad zeros_like(const PolicyParams& p);
  void scale(double s);
};

/// In-place SGD update: params += scale * grad.
void add_scaled(PolicyParams& params, const PolicyGrad& grad, double scale);

void save_params(const std::string& path, const PolicyParams& p);
PolicyParams load_params(const std::string& path);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class Algorithm { Dpo, DpoLn, SimPo, ApoZero };
enum class StreamStrategy {
  TextOnly,        // "t"
  TextPlusAudio,   // "t+a"  : audio ratios merged into the margin
  TextCommaAudio,  // "t,a"  : separate sigmoid losses, summed
  TextCeOnAudio,   // "t,ce" : text loss plus NLL on winner audio tokens
};

Algorithm algorithm_from_name(const std::string& name);
std::string algorithm_name(Algorithm a);
StreamStrategy strategy_from_name(const std::string& name);
std::string strategy_name(StreamStrategy s);

struct LossConfig {
  Algorithm algorithm = Algorithm::DpoLn;
  double beta = 0.3;
  double gamma = 0.5;  // SimPo target margin
  StreamStrategy strategy = StreamStrategy::TextOnly;
};

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 16;
  int steps = 0;
  double warmup_fraction = 0.16;
  std::uint64_t seed = 0;
};

enum class Head { Text, Audio };
using Mask = std::vector<std::uint8_t>;

struct SeqLogProb {
  double total = 0;
  std::vector<double> per_frame;  // one entry per scored frame
};

/// Log-probability of the masked frames of a sequence under the policy.
/// Text head: log softmax over the text vocabulary per frame. Audio head:
/// log softmax over the audio vocabulary, summed over all levels per frame.
/// The mask must either be empty or match the sequence length.
SeqLogProb seq_log_prob(const PolicyParams& p, const stream::Multistream& s,
                        const Mask& mask, Head head);

/// Exact parameter gradient of seq_log_prob's total.
PolicyGrad seq_log_prob_grad(const PolicyParams& p,
                             const stream::Multistream& s, const Mask& mask,
                             Head head);

/// Sequence-level scores of one preference pair under one policy: text and
/// audio log-probabilities of winner and loser responses given the shared
/// context, plus the scored token counts used for length normalization.
struct PairScores {
  double text_w = 0, text_l = 0;
  double audio_w = 0, audio_l = 0;
  long long len_w = 0, len_l = 0;    // scored text tokens
  long long alen_w = 0, alen_l = 0;  // scored audio tokens (len * levels)
};

PairScores policy_scores(const PolicyParams& p,
                         const pairs::PreferencePair& pair, bool need_audio);

/// Per-pair loss, reported margin, and the scalar coefficients dL/dscore
/// that the gradient accumulation applies to each sequence score.
struct PairLoss {
  double loss = 0;
  double margin = 0;
  double c_text_w = 0, c_text_l = 0;
  double c_audio_w = 0, c_audio_l = 0;
};

PairLoss pair_loss_from_scores(const PairScores& theta, const PairScores& ref,
                               const LossConfig& cfg);

bool need_audio_head(const LossConfig& cfg);

struct BatchResult {
  double loss = 0;
  double mean_margin = 0;
  double pref_acc = 0;  // fraction of pairs with margin > 0, ties count 1/2
  PolicyGrad grad;
};

/// Mean loss over the batch with its exact analytic gradient.
/// Throws Error (with the pair id) when a pair's loss is not finite.
BatchResult offline_loss(const PolicyParams& theta, const PolicyParams& ref,
                         const std::vector<pairs::PreferencePair>& batch,
                         const LossConfig& cfg);

double offline_loss_value(const PolicyParams& theta, const PolicyParams& ref,
                          const std::vector<pairs::PreferencePair>& batch,
                          const LossConfig& cfg);

struct DatasetEval {
  double mean_loss = 0;
  double mean_margin = 0;
  double pref_acc = 0;
};

DatasetEval evaluate_dataset(const PolicyParams& theta,
                             const PolicyParams& ref,
                             const pairs::PreferenceDataset& ds,
                             const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepRecord {
  int step = 0;
  double lr = 0;
  double loss = 0;
  double mean_margin = 0;
  double pref_acc = 0;
};

struct TrainResult {
  PolicyParams params;
  std::vector<StepRecord> log;
};

/// Linear warmup into a cosine decay.
double lr_at_step(const TrainConfig& cfg, int step);

/// Plain SGD over seeded batches; the reference policy is a frozen copy of
/// the initial parameters. Throws NumericError with the step index when the
/// loss diverges.
TrainResult train(const pairs::PreferenceDataset& ds,
                  const PolicyParams& initial, const LossConfig& lcfg,
                  const TrainConfig& tcfg);

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct ParamCoord {
  int tensor = 0;  // 0 text_embed, 1 audio_proj, 2 text_out, 3 audio_out
  Eigen::Index row = 0;
  Eigen::Index col = 0;
};

Eigen::MatrixXd& tensor_of(PolicyParams& p, int tensor);
const Eigen::MatrixXd& tensor_of(const PolicyGrad& g, int tensor);

/// Seeded parameter sample biased towards coordinates the pair actually
/// touches (embedding and output rows of its tokens).
std::vector<ParamCoord> sample_param_coords(const PolicyParams& p,
                                            const pairs::PreferencePair& pair,
                                            int count, std::uint64_t seed);

struct GradCheckResult {
  double max_rel_error = 0;
  ParamCoord worst;
  int checked = 0;
};

/// Central finite differences of the pair loss over a sampled parameter
/// subset, compared against the analytic gradient. Returns the maximum
/// relative error |analytic - numeric| / max(1e-12, |numeric|).
GradCheckResult grad_check(const PolicyParams& theta, const PolicyParams& ref,
                           const pairs::PreferencePair& pair,
                           const LossConfig& cfg, double eps, int count = 200,
                           std::uint64_t seed = 0);

/// grad_check against a caller-supplied gradient (for fault injection).
GradCheckResult compare_gradient(const PolicyParams& theta,
                                 const PolicyParams& ref,
                                 const pairs::PreferencePair& pair,
                                 const LossConfig& cfg, double eps,
                                 const std::vector<ParamCoord>& coords,
                                 const PolicyGrad& analytic);

}  // namespace duplex::optim
