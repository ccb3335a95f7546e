#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "duplex/judge.hpp"
#include "duplex/multistream.hpp"
#include "duplex/transcript.hpp"

namespace duplex::pairs {

using judge::FlaggedTurn;
using judge::IssueCategory;
using stream::Multistream;
using transcript::Dialogue;

struct PairConfig {
  double delay_gap_s = 0.2;        // latency of delayed winners after user end
  double synth_words_per_sec = 3.0;  // cadence for synthesized replies
  int tail_pad_frames = 20;        // padding tail closing every response
  double buffer_slack_s = 30.0;    // how far a winner may extend the recording
  bool overlapping_contexts = false;  // build more than one pair per dialogue
};

/// One alignment example: a shared context plus two alternative response
/// regions. Winner and loser start at the same frame; the scored masks cover
/// the text tokens of each response region.
struct PreferencePair {
  std::string id;
  std::set<IssueCategory> categories;
  bool unique_context = true;
  Multistream context;
  Multistream winner;
  Multistream loser;
  std::vector<std::uint8_t> winner_mask;  // one entry per winner frame
  std::vector<std::uint8_t> loser_mask;

  long long winner_len() const;
  long long loser_len() const;
};

/// Keeps the first flagged turn plus at most one more, sampled uniformly
/// from the remainder with the given seed.
std::vector<FlaggedTurn> select_flagged_turns(const Dialogue& d,
                                              std::vector<FlaggedTurn> flags,
                                              std::uint64_t seed);

/// Builds the preference pair for one flagged turn.
///
/// Content: loser is the original reply; winner carries the rewrite at the
/// reply's onset over a silent user stream. Cut: winner is the reply (or its
/// rewrite) delayed until after the interrupted user turn ends. NonAnswer:
/// winner is the rewrite placed after the unanswered turn; loser is silence
/// spanning the same frames. The context always ends just after the user's
/// last turn before the reply (never past the reply's own onset).
///
/// Throws BuildError when a required rewrite is absent or the winner would
/// exceed the dialogue buffer.
PreferencePair build_preference_pair(const Dialogue& d, const FlaggedTurn& f,
                                     const stream::TokenizerConfig& tcfg,
                                     const PairConfig& cfg, std::uint64_t seed);

struct BuildStats {
  int built = 0;
  int skipped = 0;
  std::vector<std::string> errors;
};

/// Selection plus construction for one dialogue; build failures are skipped
/// and recorded. The pair from the first flag is marked unique_context.
std::vector<PreferencePair> build_dialogue_pairs(
    const Dialogue& d, std::vector<FlaggedTurn> flags,
    const stream::TokenizerConfig& tcfg, const PairConfig& cfg,
    std::uint64_t seed, BuildStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Mix composition
// ---------------------------------------------------------------------------

struct MixSpec {
  long long target_total = 0;
  // Pattern -> fraction, in declaration order; fractions sum to 1.
  std::vector<std::pair<std::string, double>> fractions;
  std::uint64_t seed = 0;
};

MixSpec parse_mix_spec(const std::string& text);
MixSpec load_mix_spec(const std::string& path);

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  std::string split = "pool";  // "pool", "train" or "val"

  long long size() const { return static_cast<long long>(pairs.size()); }
};

/// Category patterns: "content" (has a content issue), "content-only",
/// "timing-only" (no content issue), "cut-only", "nonanswer-only", "any",
/// or an exact canonical label such as "content+cut".
bool pattern_matches(const std::string& pattern,
                     const std::set<IssueCategory>& categories);

/// Assigns each pair to the first matching pattern; unmatched pairs are
/// left out.
std::map<std::string, std::vector<PreferencePair>> partition_by_pattern(
    const std::vector<PreferencePair>& pairs,
    const std::vector<std::string>& patterns);

/// Rounds fractions * total to integers with largest-remainder rounding;
/// the result sums to total and each count is within 1 of its target.
std::vector<long long> largest_remainder_counts(
    const std::vector<double>& fractions, long long total);

/// Seeded sampling without replacement from each pool, sized by the spec's
/// fractions. Throws when a pool cannot supply its count.
PreferenceDataset compose_mix(
    const std::map<std::string, std::vector<PreferencePair>>& pools,
    const MixSpec& spec);

/// Seeded disjoint partition with exactly `val_count` validation pairs.
std::pair<PreferenceDataset, PreferenceDataset> split_dataset(
    const PreferenceDataset& ds, long long val_count, std::uint64_t seed);

}  // namespace duplex::pairs
