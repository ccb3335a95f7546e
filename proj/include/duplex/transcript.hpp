#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duplex/errors.hpp"

namespace duplex::transcript {

/// All timestamps are integer milliseconds; parsing and rendering are exact.
using Millis = std::int64_t;

inline Millis ms_from_seconds(double s) {
  return static_cast<Millis>(s * 1000.0 + (s >= 0 ? 0.5 : -0.5));
}
inline double seconds_from_ms(Millis ms) { return static_cast<double>(ms) / 1000.0; }

enum class Speaker { User, Model };

struct TimedWord {
  std::string text;
  Millis start = 0;
  Millis end = 0;
};

struct Turn {
  Speaker speaker = Speaker::User;
  Millis start = 0;
  Millis end = 0;
  std::vector<TimedWord> words;

  /// Space-joined word text.
  std::string text() const;
  int word_count() const { return static_cast<int>(words.size()); }
};

struct Dialogue {
  std::string id;
  std::vector<Turn> turns;
  Millis duration = 0;

  bool empty() const { return turns.empty(); }
};

/// Spreads whitespace-separated tokens of `text` uniformly over [start, end].
std::vector<TimedWord> make_uniform_words(const std::string& text, Millis start,
                                          Millis end);

/// Builds a turn whose word timestamps divide [start, end] uniformly.
Turn make_turn(Speaker speaker, Millis start, Millis end,
               const std::string& text);

/// Parses the line-oriented `[S:E] Speaker: text` transcript grammar.
/// Accepted speaker labels: "User"/"O" and "Bot"/"Model"/"M". Blank lines are
/// skipped. Throws ParseError with the offending 1-based line number.
Dialogue parse_transcript(const std::string& text, const std::string& id = "");

enum class RenderStyle {
  Canonical,  // "User" / "Bot" labels, one turn per line
  Judge,      // "O" / "M" labels as expected by judge prompts
};

/// Renders a dialogue back to transcript text. Canonical rendering is the
/// exact inverse of parse_transcript for canonically formatted input.
std::string render_transcript(const Dialogue& d,
                              RenderStyle style = RenderStyle::Canonical);

/// Formats milliseconds as decimal seconds with two digits (three when the
/// value does not fall on a centisecond).
std::string format_timestamp(Millis ms);

/// Merges consecutive same-speaker turns separated by at most `max_gap`.
/// Word lists are concatenated; cross-speaker ordering is unchanged.
Dialogue segment_turns(const Dialogue& d, Millis max_gap);

struct FilterConfig {
  int max_letter_run = 5;             // consecutive identical single letters
  double letter_ratio_threshold = 0.5;  // single-letter tokens / all tokens
};

struct FilterDecision {
  bool keep = true;
  std::string reason;
};

/// Flags dialogues dominated by meaningless letter repetitions, a recurring
/// transcription failure mode. Deterministic.
FilterDecision filter_asr_noise(const Dialogue& d, const FilterConfig& rules);

/// Validates ordering and overlap invariants; throws ParseError on violation.
void validate_dialogue(const Dialogue& d);

int total_word_count(const Dialogue& d);

}  // namespace duplex::transcript
