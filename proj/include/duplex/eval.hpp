#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "duplex/optim.hpp"
#include "duplex/pairs.hpp"

namespace duplex::eval {

/// Fraction of pairs the policy prefers correctly (margin > 0, ties 1/2).
double preference_accuracy(const optim::PolicyParams& theta,
                           const optim::PolicyParams& ref,
                           const pairs::PreferenceDataset& ds,
                           const optim::LossConfig& cfg);

/// Word-level Levenshtein distance divided by the reference word count.
/// Throws Error when the reference contains no words.
double wer(const std::string& reference, const std::string& hypothesis);

// ---------------------------------------------------------------------------
// Human-rating aggregation
// ---------------------------------------------------------------------------

enum class RatingAxis { Coherence, Engagement, Relevance };
enum class DurationBucket { S30, S90, S120 };

std::string rating_axis_name(RatingAxis a);
RatingAxis rating_axis_from_name(const std::string& name);
std::string bucket_name(DurationBucket b);
DurationBucket bucket_from_name(const std::string& name);

/// Nearest of the 30s / 90s / 120s buckets.
DurationBucket bucket_of_duration(double seconds);

struct RatingRecord {
  std::string annotator;
  std::string conversation;
  std::string model;
  RatingAxis axis = RatingAxis::Coherence;
  int score = 0;  // 0 (worst) .. 4 (best)
  DurationBucket bucket = DurationBucket::S30;
};

/// Tab- or comma-separated file with a header line:
/// annotator,conversation,model,axis,score,bucket
std::vector<RatingRecord> load_ratings(const std::string& path);
std::vector<RatingRecord> parse_ratings(const std::string& text);

/// Standardizes scores per annotator per axis to zero mean and unit
/// population variance; annotators with constant scores map to zero.
/// The result is index-aligned with the input.
std::vector<double> znormalize(const std::vector<RatingRecord>& ratings);

struct CellStat {
  double mean = 0;      // across seeds, of per-seed mean scores
  double variance = 0;  // population variance across seeds
  long long count = 0;  // rating records behind the cell (all seeds)
};

struct EvalReport {
  // (model, bucket, axis) -> statistics
  std::map<std::tuple<std::string, DurationBucket, RatingAxis>, CellStat> cells;
  std::vector<std::string> models;

  std::string to_text() const;
  std::string to_json() const;
};

/// For every seed, subsamples `per_model_count` conversations per model and
/// averages z-normalized scores per (model, bucket, axis); reports the mean
/// and population variance across seeds. Throws when a model has fewer
/// conversations than requested.
EvalReport aggregate_human_eval(const std::vector<RatingRecord>& ratings,
                                int per_model_count,
                                const std::vector<std::uint64_t>& seeds);

// ---------------------------------------------------------------------------
// Refusal classification
// ---------------------------------------------------------------------------

enum class RefusalLabel { Refusal, Compliance };

class RefusalClassifier {
 public:
  virtual ~RefusalClassifier() = default;
  virtual RefusalLabel classify(const std::string& prompt,
                                const std::string& response) = 0;
};

/// Built-in heuristic: refusal iff the response contains a phrase from the
/// lexicon (case-insensitive). A coarse stand-in for an external classifier.
class KeywordRefusalClassifier : public RefusalClassifier {
 public:
  KeywordRefusalClassifier();  // default lexicon
  explicit KeywordRefusalClassifier(std::vector<std::string> lexicon);
  RefusalLabel classify(const std::string& prompt,
                        const std::string& response) override;

 private:
  std::vector<std::string> lexicon_;
};

/// POSTs {"prompt", "response"} to a remote classifier returning
/// "refusal" or "compliance".
class HttpRefusalClassifier : public RefusalClassifier {
 public:
  explicit HttpRefusalClassifier(std::string base_url,
                                 std::string path = "/classify");
  RefusalLabel classify(const std::string& prompt,
                        const std::string& response) override;

 private:
  std::string base_url_;
  std::string path_;
};

RefusalLabel classify_refusal(const std::string& prompt,
                              const std::string& response,
                              RefusalClassifier& classifier);

}  // namespace duplex::eval
