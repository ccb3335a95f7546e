#include "duplex/transcript.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace duplex::transcript {

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool is_blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c); });
}

// Parses "S.mmm" decimal seconds into milliseconds. At most three fractional
// digits are accepted so that rendering stays lossless.
Millis parse_timestamp(const std::string& tok, int line) {
  if (tok.empty()) throw ParseError(line, "empty timestamp");
  std::size_t i = 0;
  Millis secs = 0;
  if (i >= tok.size() || !std::isdigit(static_cast<unsigned char>(tok[i])))
    throw ParseError(line, "malformed timestamp '" + tok + "'");
  for (; i < tok.size() && std::isdigit(static_cast<unsigned char>(tok[i])); ++i)
    secs = secs * 10 + (tok[i] - '0');
  Millis frac = 0;
  if (i < tok.size()) {
    if (tok[i] != '.') throw ParseError(line, "malformed timestamp '" + tok + "'");
    ++i;
    int digits = 0;
    for (; i < tok.size(); ++i, ++digits) {
      if (!std::isdigit(static_cast<unsigned char>(tok[i])))
        throw ParseError(line, "malformed timestamp '" + tok + "'");
      if (digits >= 3)
        throw ParseError(line, "timestamp precision beyond milliseconds");
      frac = frac * 10 + (tok[i] - '0');
    }
    if (digits == 0) throw ParseError(line, "malformed timestamp '" + tok + "'");
    for (; digits < 3; ++digits) frac *= 10;
  }
  return secs * 1000 + frac;
}

Speaker parse_speaker(const std::string& label, int line) {
  if (label == "User" || label == "O") return Speaker::User;
  if (label == "Bot" || label == "Model" || label == "M") return Speaker::Model;
  throw ParseError(line, "unknown speaker label '" + label + "'");
}

std::string speaker_label(Speaker s, RenderStyle style) {
  if (style == RenderStyle::Judge) return s == Speaker::User ? "O" : "M";
  return s == Speaker::User ? "User" : "Bot";
}

}  // namespace

std::string Turn::text() const {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w.text;
  }
  return out;
}

std::vector<TimedWord> make_uniform_words(const std::string& text, Millis start,
                                          Millis end) {
  std::vector<std::string> toks = split_words(text);
  std::vector<TimedWord> words;
  words.reserve(toks.size());
  const auto n = static_cast<Millis>(toks.size());
  const Millis span = end - start;
  for (Millis i = 0; i < n; ++i) {
    words.push_back({toks[static_cast<std::size_t>(i)], start + span * i / n,
                     start + span * (i + 1) / n});
  }
  return words;
}

Turn make_turn(Speaker speaker, Millis start, Millis end,
               const std::string& text) {
  Turn t;
  t.speaker = speaker;
  t.start = start;
  t.end = end;
  t.words = make_uniform_words(text, start, end);
  return t;
}

Dialogue parse_transcript(const std::string& text, const std::string& id) {
  Dialogue d;
  d.id = id;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;

    if (line[0] != '[') throw ParseError(line_no, "expected '[' at line start");
    const auto colon = line.find(':', 1);
    const auto bracket = line.find(']', 1);
    if (colon == std::string::npos || bracket == std::string::npos ||
        colon > bracket)
      throw ParseError(line_no, "malformed timestamp span");
    const Millis start = parse_timestamp(line.substr(1, colon - 1), line_no);
    const Millis end =
        parse_timestamp(line.substr(colon + 1, bracket - colon - 1), line_no);
    if (end < start) throw ParseError(line_no, "end before start");

    std::size_t pos = bracket + 1;
    while (pos < line.size() && line[pos] == ' ') ++pos;
    const auto label_end = line.find(':', pos);
    if (label_end == std::string::npos)
      throw ParseError(line_no, "missing speaker label");
    const Speaker speaker =
        parse_speaker(line.substr(pos, label_end - pos), line_no);

    std::size_t text_pos = label_end + 1;
    if (text_pos < line.size() && line[text_pos] == ' ') ++text_pos;
    const std::string turn_text = line.substr(text_pos);
    if (split_words(turn_text).empty())
      throw ParseError(line_no, "empty turn text");

    d.turns.push_back(make_turn(speaker, start, end, turn_text));
    d.duration = std::max(d.duration, end);
  }
  validate_dialogue(d);
  return d;
}

std::string format_timestamp(Millis ms) {
  const Millis secs = ms / 1000;
  const Millis frac = ms % 1000;
  char buf[32];
  if (frac % 10 == 0)
    std::snprintf(buf, sizeof(buf), "%lld.%02lld", static_cast<long long>(secs),
                  static_cast<long long>(frac / 10));
  else
    std::snprintf(buf, sizeof(buf), "%lld.%03lld", static_cast<long long>(secs),
                  static_cast<long long>(frac));
  return buf;
}

std::string render_transcript(const Dialogue& d, RenderStyle style) {
  std::string out;
  for (const auto& t : d.turns) {
    out += '[';
    out += format_timestamp(t.start);
    out += ':';
    out += format_timestamp(t.end);
    out += "] ";
    out += speaker_label(t.speaker, style);
    out += ": ";
    out += t.text();
    out += '\n';
  }
  return out;
}

Dialogue segment_turns(const Dialogue& d, Millis max_gap) {
  Dialogue out;
  out.id = d.id;
  out.duration = d.duration;
  for (const auto& t : d.turns) {
    if (!out.turns.empty() && out.turns.back().speaker == t.speaker &&
        t.start - out.turns.back().end <= max_gap) {
      Turn& prev = out.turns.back();
      prev.end = std::max(prev.end, t.end);
      prev.words.insert(prev.words.end(), t.words.begin(), t.words.end());
    } else {
      out.turns.push_back(t);
    }
  }
  return out;
}

FilterDecision filter_asr_noise(const Dialogue& d, const FilterConfig& rules) {
  auto lower = [](const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  auto is_letter_token = [](const std::string& s) {
    return s.size() == 1 && std::isalpha(static_cast<unsigned char>(s[0]));
  };

  long long letter_tokens = 0;
  long long all_tokens = 0;
  for (const auto& t : d.turns) {
    int run = 0;
    std::string prev;
    for (const auto& w : t.words) {
      ++all_tokens;
      if (is_letter_token(w.text)) {
        ++letter_tokens;
        const std::string cur = lower(w.text);
        run = (cur == prev) ? run + 1 : 1;
        prev = cur;
        if (run >= rules.max_letter_run)
          return {false, "repeated meaningless letters"};
      } else {
        run = 0;
        prev.clear();
      }
    }
  }
  if (all_tokens > 0) {
    const double ratio =
        static_cast<double>(letter_tokens) / static_cast<double>(all_tokens);
    if (ratio > rules.letter_ratio_threshold)
      return {false, "single-letter token ratio " + std::to_string(ratio)};
  }
  return {true, ""};
}

void validate_dialogue(const Dialogue& d) {
  Millis last_start = 0;
  Millis last_end_by_speaker[2] = {0, 0};
  int line = 0;
  for (const auto& t : d.turns) {
    ++line;
    if (t.start < last_start)
      throw ParseError(line, "turns out of chronological order");
    const int s = t.speaker == Speaker::User ? 0 : 1;
    if (line > 1 && t.start < last_end_by_speaker[s] && t.start > 0 &&
        last_end_by_speaker[s] > 0)
      throw ParseError(line, "overlapping turns for the same speaker");
    last_start = t.start;
    last_end_by_speaker[s] = std::max(last_end_by_speaker[s], t.end);
    if (!t.words.empty()) {
      Millis prev = t.words.front().start;
      for (const auto& w : t.words) {
        if (w.start < prev) throw ParseError(line, "word order regression");
        prev = w.start;
      }
    }
  }
  for (const auto& t : d.turns)
    if (t.end > d.duration)
      throw ParseError(0, "turn extends past dialogue duration");
}

int total_word_count(const Dialogue& d) {
  int n = 0;
  for (const auto& t : d.turns) n += t.word_count();
  return n;
}

}  // namespace duplex::transcript
