#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>

#include "duplex/transcript.hpp"

namespace duplex::stream {

// Frame-synchronous token representation: one text stream plus two
// residual-quantized audio streams (model and user) at a fixed frame rate.
inline constexpr int kLevels = 8;            // RVQ levels per audio frame
inline constexpr int kAudioVocab = 2048;     // audio codebook size
inline constexpr int kTextVocab = 32000;     // text vocabulary size
inline constexpr double kFrameRate = 12.5;   // frames per second
inline constexpr transcript::Millis kFrameMs = 80;

using TokenVector = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 1>;
using TokenGrid = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;

struct TokenizerConfig {
  std::uint64_t word_hash_salt = 0;
  std::int32_t pad_id = 3;
  std::int32_t silence_audio_id = 0;
};

struct Multistream {
  TokenVector text;       // [frames]
  TokenGrid model_audio;  // [frames x kLevels]
  TokenGrid user_audio;   // [frames x kLevels]
  std::int32_t pad_id = 3;
  std::int32_t silence_audio_id = 0;

  Eigen::Index frames() const { return text.size(); }
};

bool operator==(const Multistream& a, const Multistream& b);

inline Eigen::Index frame_of(transcript::Millis ms) { return ms / kFrameMs; }

/// Empty sequence of `frames` frames: padding text, silent audio.
Multistream make_silence(Eigen::Index frames, const TokenizerConfig& tcfg);

/// Deterministic hash of the lowercased word into [0, kTextVocab) minus the
/// padding id.
std::int32_t text_token_of_word(const std::string& word,
                                const TokenizerConfig& tcfg);

/// Stand-in codec token for (speaker, frame, level); never the silence id.
std::int32_t audio_token(int speaker_tag, Eigen::Index frame, int level,
                         std::uint64_t seed, std::int32_t silence_audio_id);

struct WordPlacement {
  Eigen::Index frame = 0;
  std::int32_t token = 0;
};

/// Frame assignment for every model word of the dialogue, in speaking order:
/// floor(start * frame_rate), shifted to the next free frame on collision.
/// Throws when a word falls beyond the dialogue duration.
std::vector<WordPlacement> model_word_placements(const transcript::Dialogue& d,
                                                 const TokenizerConfig& tcfg);

/// Builds the aligned streams for a whole dialogue. Each model word occupies
/// the frame floor(start * frame_rate); colliding words shift to the next
/// free frame in order. Audio frames inside a turn's span carry pseudo-codec
/// tokens for that speaker, silence tokens elsewhere.
Multistream assemble_streams(const transcript::Dialogue& d,
                             const TokenizerConfig& tcfg, std::uint64_t seed);

Multistream slice(const Multistream& s, Eigen::Index begin, Eigen::Index end);
Multistream concat(const Multistream& a, const Multistream& b);

/// Number of non-padding text tokens emitted strictly before the first run
/// of `run` consecutive padding tokens (all non-padding tokens if no such
/// run exists).
long long replay_length(const TokenVector& text, std::int32_t pad_id,
                        int run = 20);

}  // namespace duplex::stream
