#include "duplex/multistream.hpp"

#include <algorithm>
#include <cctype>

#include "duplex/errors.hpp"
#include "duplex/hashing.hpp"

namespace duplex::stream {

using transcript::Speaker;

bool operator==(const Multistream& a, const Multistream& b) {
  return a.pad_id == b.pad_id && a.silence_audio_id == b.silence_audio_id &&
         a.text.size() == b.text.size() && a.text == b.text &&
         a.model_audio == b.model_audio && a.user_audio == b.user_audio;
}

Multistream make_silence(Eigen::Index frames, const TokenizerConfig& tcfg) {
  Multistream s;
  s.pad_id = tcfg.pad_id;
  s.silence_audio_id = tcfg.silence_audio_id;
  s.text = TokenVector::Constant(frames, tcfg.pad_id);
  s.model_audio = TokenGrid::Constant(frames, kLevels, tcfg.silence_audio_id);
  s.user_audio = TokenGrid::Constant(frames, kLevels, tcfg.silence_audio_id);
  return s;
}

std::int32_t text_token_of_word(const std::string& word,
                                const TokenizerConfig& tcfg) {
  std::string lowered;
  for (char c : word)
    if (!std::isspace(static_cast<unsigned char>(c)))
      lowered += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lowered.empty()) throw Error("text_token_of_word: empty word");
  const std::uint64_t h = fnv1a64(lowered, fnv1a64(tcfg.word_hash_salt));
  auto id = static_cast<std::int32_t>(h % (kTextVocab - 1));
  if (id >= tcfg.pad_id) ++id;
  return id;
}

std::int32_t audio_token(int speaker_tag, Eigen::Index frame, int level,
                         std::uint64_t seed, std::int32_t silence_audio_id) {
  std::uint64_t h = fnv1a64(seed);
  h = fnv1a64(static_cast<std::uint64_t>(speaker_tag), h);
  h = fnv1a64(static_cast<std::uint64_t>(frame), h);
  h = fnv1a64(static_cast<std::uint64_t>(level), h);
  auto id = static_cast<std::int32_t>(splitmix64(h) % (kAudioVocab - 1));
  if (id >= silence_audio_id) ++id;
  return id;
}

namespace {

void fill_speech_audio(TokenGrid& grid, int speaker_tag, Eigen::Index from,
                       Eigen::Index to, std::uint64_t seed,
                       std::int32_t silence_audio_id) {
  for (Eigen::Index f = from; f <= to; ++f)
    for (int q = 0; q < kLevels; ++q)
      grid(f, q) = audio_token(speaker_tag, f, q, seed, silence_audio_id);
}

}  // namespace

std::vector<WordPlacement> model_word_placements(const transcript::Dialogue& d,
                                                 const TokenizerConfig& tcfg) {
  const Eigen::Index frames = frame_of(d.duration);
  std::vector<WordPlacement> placements;
  Eigen::Index next_free = 0;
  for (const auto& turn : d.turns) {
    if (turn.speaker != Speaker::Model) continue;
    for (const auto& w : turn.words) {
      const Eigen::Index f = std::max(frame_of(w.start), next_free);
      if (f >= frames)
        throw Error("word at " + transcript::format_timestamp(w.start) +
                    "s falls beyond the dialogue duration");
      placements.push_back({f, text_token_of_word(w.text, tcfg)});
      next_free = f + 1;
    }
  }
  return placements;
}

Multistream assemble_streams(const transcript::Dialogue& d,
                             const TokenizerConfig& tcfg, std::uint64_t seed) {
  if (d.duration <= 0) throw Error("assemble_streams: non-positive duration");
  const Eigen::Index frames = frame_of(d.duration);
  Multistream s = make_silence(frames, tcfg);

  for (const auto& p : model_word_placements(d, tcfg)) s.text(p.frame) = p.token;

  for (const auto& turn : d.turns) {
    const Eigen::Index from = frame_of(turn.start);
    const Eigen::Index to = std::min(frame_of(turn.end), frames - 1);
    if (from > to) continue;
    if (turn.speaker == Speaker::Model)
      fill_speech_audio(s.model_audio, 0, from, to, seed,
                        tcfg.silence_audio_id);
    else
      fill_speech_audio(s.user_audio, 1, from, to, seed,
                        tcfg.silence_audio_id);
  }
  return s;
}

Multistream slice(const Multistream& s, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end < begin || end > s.frames())
    throw Error("slice: range outside sequence");
  Multistream out;
  out.pad_id = s.pad_id;
  out.silence_audio_id = s.silence_audio_id;
  out.text = s.text.segment(begin, end - begin);
  out.model_audio = s.model_audio.middleRows(begin, end - begin);
  out.user_audio = s.user_audio.middleRows(begin, end - begin);
  return out;
}

Multistream concat(const Multistream& a, const Multistream& b) {
  if (a.pad_id != b.pad_id || a.silence_audio_id != b.silence_audio_id)
    throw Error("concat: mismatched reserved token ids");
  Multistream out;
  out.pad_id = a.pad_id;
  out.silence_audio_id = a.silence_audio_id;
  out.text.resize(a.frames() + b.frames());
  out.text << a.text, b.text;
  out.model_audio.resize(a.frames() + b.frames(), kLevels);
  out.model_audio << a.model_audio, b.model_audio;
  out.user_audio.resize(a.frames() + b.frames(), kLevels);
  out.user_audio << a.user_audio, b.user_audio;
  return out;
}

long long replay_length(const TokenVector& text, std::int32_t pad_id,
                        int run) {
  long long words = 0;
  int pads = 0;
  for (Eigen::Index i = 0; i < text.size(); ++i) {
    if (text(i) == pad_id) {
      if (++pads >= run) return words;
    } else {
      pads = 0;
      ++words;
    }
  }
  return words;
}

}  // namespace duplex::stream
