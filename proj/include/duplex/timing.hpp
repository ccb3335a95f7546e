#pragma once

#include <optional>
#include <vector>

#include "duplex/transcript.hpp"

namespace duplex::timing {

using transcript::Dialogue;
using transcript::Millis;

enum class IssueKind { Interruption, Unresponsive };

struct TimingIssue {
  IssueKind kind = IssueKind::Interruption;
  std::optional<int> model_turn;  // interrupting turn / late reply (if any)
  int user_turn = 0;              // interrupted or unanswered turn
  Millis onset = 0;  // interruption start, or end of the unanswered turn
  Millis gap = 0;    // overlap depth, or silence until the next model word
};

struct TimingConfig {
  double cut_min_overhang = 0.5;  // seconds of user speech left when cut
  double cut_guard = 0.2;         // seconds after user onset before a cut counts
  double response_deadline = 2.0; // seconds the model has to start replying
  bool backchannel_exemption = true;
  int backchannel_max_words = 2;
};

/// Model turns that start strictly inside (user_start + guard,
/// user_end - overhang). Short model turns fully contained in the user turn
/// are treated as backchannels and skipped when the exemption is on.
std::vector<TimingIssue> detect_interruptions(const Dialogue& d,
                                              const TimingConfig& cfg);

/// User turns followed by neither a model word nor another user turn within
/// the response deadline. The gap measures silence until the next model word,
/// or the remaining dialogue duration when the model never speaks again.
std::vector<TimingIssue> detect_unresponsiveness(const Dialogue& d,
                                                 const TimingConfig& cfg);

/// Both detectors, merged and sorted by onset.
std::vector<TimingIssue> detect_all(const Dialogue& d, const TimingConfig& cfg);

}  // namespace duplex::timing
