#include "duplex/simulate.hpp"

#include <random>

#include "duplex/hashing.hpp"

namespace duplex::sim {

using transcript::Millis;
using transcript::Speaker;

namespace {

const char* kVocab[] = {
    "well",  "right",  "today",  "maybe",   "about", "there", "think",
    "could", "should", "really", "morning", "plans", "music", "books",
    "where", "going",  "sounds", "great",   "tell",  "more",  "weather",
    "trip",  "ideas",  "sure"};
constexpr int kVocabSize = static_cast<int>(sizeof(kVocab) / sizeof(kVocab[0]));

std::string make_text(std::mt19937_64& rng, int n_words) {
  std::string out;
  for (int i = 0; i < n_words; ++i) {
    if (i) out += ' ';
    out += kVocab[std::uniform_int_distribution<int>(0, kVocabSize - 1)(rng)];
  }
  return out;
}

Millis rand_ms(std::mt19937_64& rng, Millis lo, Millis hi) {
  return std::uniform_int_distribution<Millis>(lo, hi)(rng);
}

}  // namespace

SimResult simulate_dialogue(const std::string& id, const SimConfig& cfg,
                            std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  SimResult result;
  result.dialogue.id = id;

  const Millis guard = transcript::ms_from_seconds(cfg.timing.cut_guard);
  const Millis overhang =
      transcript::ms_from_seconds(cfg.timing.cut_min_overhang);
  const Millis deadline =
      transcript::ms_from_seconds(cfg.timing.response_deadline);
  // Safety margin keeping every planted event clear of its threshold.
  const Millis margin = 300;

  const int rounds = std::uniform_int_distribution<int>(cfg.min_rounds,
                                                        cfg.max_rounds)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Millis t = rand_ms(rng, 200, 600);
  Millis last_end = t;
  auto& turns = result.dialogue.turns;

  for (int r = 0; r < rounds; ++r) {
    const double dice = unit(rng);
    const bool plant_cut = dice < cfg.interruption_rate;
    const bool plant_silence =
        !plant_cut && dice < cfg.interruption_rate + cfg.unresponsive_rate;

    const Millis u_start = t;
    const Millis min_dur = plant_cut ? guard + overhang + 2 * margin + 200
                                     : Millis{1500};
    const Millis u_dur = rand_ms(rng, min_dur, min_dur + 1800);
    const Millis u_end = u_start + u_dur;
    const int user_words =
        std::max<int>(2, static_cast<int>(u_dur * 5 / 2000));  // ~2.5 words/s
    const int user_index = static_cast<int>(turns.size());
    turns.push_back(transcript::make_turn(Speaker::User, u_start, u_end,
                                          make_text(rng, user_words)));

    Millis m_start = 0;
    Millis m_end = 0;
    if (plant_cut) {
      m_start = rand_ms(rng, u_start + guard + margin, u_end - overhang - margin);
      m_end = u_end + rand_ms(rng, 1000, 2000);
    } else if (plant_silence) {
      m_start = u_end + deadline + rand_ms(rng, 500, 1500);
      m_end = m_start + rand_ms(rng, 1000, 2500);
    } else {
      m_start = u_end + rand_ms(rng, margin, deadline - margin);
      m_end = m_start + rand_ms(rng, 1000, 3000);
    }
    // Word spacing stays well under the response deadline so an ongoing
    // reply always counts as responsive.
    const Millis spacing = std::min<Millis>(300, deadline / 2);
    const int model_words =
        std::max<int>(4, static_cast<int>((m_end - m_start) / spacing));
    const int model_index = static_cast<int>(turns.size());
    turns.push_back(transcript::make_turn(Speaker::Model, m_start, m_end,
                                          make_text(rng, model_words)));

    if (plant_cut) {
      result.planted.push_back({timing::IssueKind::Interruption, model_index,
                                user_index, m_start, u_end - m_start});
    } else if (plant_silence) {
      result.planted.push_back({timing::IssueKind::Unresponsive, model_index,
                                user_index, u_end, m_start - u_end});
    }

    last_end = std::max(u_end, m_end);
    t = last_end + rand_ms(rng, 600, 1200);
  }

  result.dialogue.duration = last_end + 500;
  return result;
}

}  // namespace duplex::sim
