#include "duplex/pairs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "duplex/errors.hpp"
#include "duplex/hashing.hpp"
#include "duplex/kvconfig.hpp"

namespace duplex::pairs {

using stream::frame_of;
using stream::WordPlacement;
using timing::IssueKind;
using transcript::Millis;
using transcript::Speaker;
using transcript::Turn;

namespace {

long long mask_count(const std::vector<std::uint8_t>& mask) {
  return std::count_if(mask.begin(), mask.end(),
                       [](std::uint8_t m) { return m != 0; });
}

}  // namespace

long long PreferencePair::winner_len() const { return mask_count(winner_mask); }
long long PreferencePair::loser_len() const { return mask_count(loser_mask); }

std::vector<FlaggedTurn> select_flagged_turns(const Dialogue&,
                                              std::vector<FlaggedTurn> flags,
                                              std::uint64_t seed) {
  if (flags.size() <= 1) return flags;
  std::mt19937_64 rng(splitmix64(seed));
  const auto extra = 1 + std::uniform_int_distribution<std::size_t>(
                             0, flags.size() - 2)(rng);
  std::vector<FlaggedTurn> out;
  out.push_back(std::move(flags.front()));
  out.push_back(std::move(flags[extra]));
  return out;
}

namespace {

// Placement of synthesized reply words at a fixed cadence.
std::vector<WordPlacement> cadence_placements(
    const std::string& text, Eigen::Index start_frame, Eigen::Index period,
    const stream::TokenizerConfig& tcfg) {
  std::vector<WordPlacement> out;
  std::istringstream in(text);
  std::string word;
  Eigen::Index f = start_frame;
  while (in >> word) {
    out.push_back({f, stream::text_token_of_word(word, tcfg)});
    f += period;
  }
  return out;
}

struct SpeechSpan {
  Eigen::Index from = 0;
  Eigen::Index to = -1;  // inclusive
};

// Assembles one response region over absolute frames [begin, end).
// `user_audio_until` bounds (exclusively) the absolute frames copied from the
// original user stream; later frames are silent.
stream::Multistream build_response(Eigen::Index begin, Eigen::Index end,
                                   const std::vector<WordPlacement>& words,
                                   const SpeechSpan& model_speech,
                                   const stream::Multistream& full,
                                   Eigen::Index user_audio_until,
                                   const stream::TokenizerConfig& tcfg,
                                   std::uint64_t seed) {
  stream::Multistream out = stream::make_silence(end - begin, tcfg);
  const Eigen::Index user_copy =
      std::min({end, full.frames(), user_audio_until});
  for (Eigen::Index f = begin; f < user_copy; ++f)
    out.user_audio.row(f - begin) = full.user_audio.row(f);

  const Eigen::Index from = std::max(begin, model_speech.from);
  const Eigen::Index to = std::min(end - 1, model_speech.to);
  for (Eigen::Index f = from; f <= to; ++f)
    for (int q = 0; q < stream::kLevels; ++q)
      out.model_audio(f - begin, q) =
          stream::audio_token(0, f, q, seed, tcfg.silence_audio_id);

  for (const auto& w : words) {
    if (w.frame < begin || w.frame >= end)
      throw BuildError("response word placed outside its region");
    out.text(w.frame - begin) = w.token;
  }
  return out;
}

const timing::TimingIssue* find_issue(const FlaggedTurn& f, IssueKind kind) {
  for (const auto& issue : f.timing)
    if (issue.kind == kind) return &issue;
  return nullptr;
}

std::string require_rewrite(const FlaggedTurn& f, const char* recipe) {
  if (!f.rewrite || f.rewrite->improved_response.empty())
    throw BuildError(std::string(recipe) + " pair requires a rewrite for " +
                     f.dialogue_id + " turn " + std::to_string(f.turn));
  return f.rewrite->improved_response;
}

}  // namespace

PreferencePair build_preference_pair(const Dialogue& d, const FlaggedTurn& f,
                                     const stream::TokenizerConfig& tcfg,
                                     const PairConfig& cfg,
                                     std::uint64_t seed) {
  if (f.turn < 0 || f.turn >= static_cast<int>(d.turns.size()))
    throw BuildError("flagged turn index out of range");
  if (f.categories.empty()) throw BuildError("flag carries no category");

  const stream::Multistream full = stream::assemble_streams(d, tcfg, seed);
  const Eigen::Index total_frames = full.frames();
  const Eigen::Index buffer_frames =
      frame_of(d.duration + transcript::ms_from_seconds(cfg.buffer_slack_s));
  const Millis gap_ms = transcript::ms_from_seconds(cfg.delay_gap_s);
  const auto period = std::max<Eigen::Index>(
      1, std::llround(stream::kFrameRate / cfg.synth_words_per_sec));
  const Eigen::Index tail = cfg.tail_pad_frames;

  // Original word placement of the flagged reply (when it is a model turn).
  const Turn& flagged = d.turns[static_cast<std::size_t>(f.turn)];
  std::vector<WordPlacement> reply_words;
  if (flagged.speaker == Speaker::Model) {
    const auto all = stream::model_word_placements(d, tcfg);
    std::size_t offset = 0;
    for (int i = 0; i < f.turn; ++i) {
      const auto& t = d.turns[static_cast<std::size_t>(i)];
      if (t.speaker == Speaker::Model)
        offset += static_cast<std::size_t>(t.word_count());
    }
    reply_words.assign(all.begin() + static_cast<std::ptrdiff_t>(offset),
                       all.begin() + static_cast<std::ptrdiff_t>(
                                         offset + flagged.words.size()));
  }

  // Recipe priority: an interruption outranks a missing answer, which
  // outranks a pure content fix.
  const timing::TimingIssue* cut = find_issue(f, IssueKind::Interruption);
  const timing::TimingIssue* silence = find_issue(f, IssueKind::Unresponsive);
  IssueCategory recipe;
  if (f.categories.count(IssueCategory::Cut) && cut)
    recipe = IssueCategory::Cut;
  else if (f.categories.count(IssueCategory::NonAnswer) && silence)
    recipe = IssueCategory::NonAnswer;
  else if (f.categories.count(IssueCategory::Content))
    recipe = IssueCategory::Content;
  else
    throw BuildError("timing category without a matching timing issue");

  PreferencePair pair;
  pair.id = f.dialogue_id + "#" + std::to_string(f.turn);
  pair.categories = f.categories;

  Eigen::Index ce = 0;          // context end (exclusive)
  Eigen::Index winner_end = 0;  // absolute, exclusive
  Eigen::Index loser_end = 0;
  std::vector<WordPlacement> winner_words;
  SpeechSpan winner_speech, loser_speech;
  Eigen::Index winner_user_until = 0;
  Eigen::Index loser_user_until = total_frames;
  std::vector<WordPlacement> loser_words;

  auto region_end = [&](const std::vector<WordPlacement>& words) {
    return words.empty() ? ce + tail : words.back().frame + 1 + tail;
  };

  if (recipe == IssueCategory::Content || recipe == IssueCategory::Cut) {
    if (flagged.speaker != Speaker::Model)
      throw BuildError("flagged turn is not a model reply");

    // Context ends just after the user's last turn before the reply, but
    // never past the reply onset (full-duplex replies may overlap it).
    const Turn* last_user = nullptr;
    for (const auto& t : d.turns)
      if (t.speaker == Speaker::User && t.start < flagged.start &&
          (!last_user || t.start > last_user->start))
        last_user = &t;
    ce = frame_of(flagged.start);
    if (last_user)
      ce = std::min(ce, frame_of(last_user->end) + 1);
    else
      ce = std::min(ce, total_frames);

    loser_words = reply_words;
    loser_speech = {frame_of(flagged.start),
                    std::min(frame_of(flagged.end), total_frames - 1)};
    loser_end = region_end(loser_words);

    if (recipe == IssueCategory::Content) {
      const std::string rewrite = require_rewrite(f, "content");
      const Eigen::Index w_start = std::max(ce, frame_of(flagged.start));
      winner_words = cadence_placements(rewrite, w_start, period, tcfg);
      winner_user_until = ce;  // synthesized reply: silent user stream
    } else {
      const Turn& user = d.turns[static_cast<std::size_t>(cut->user_turn)];
      const Eigen::Index w_start = frame_of(user.end + gap_ms);
      if (f.rewrite && !f.rewrite->improved_response.empty()) {
        winner_words = cadence_placements(f.rewrite->improved_response,
                                          w_start, period, tcfg);
      } else {
        winner_words = reply_words;  // same reply, delayed
        const Eigen::Index delta =
            winner_words.empty() ? 0 : w_start - winner_words.front().frame;
        for (auto& w : winner_words) w.frame += delta;
      }
      winner_user_until = frame_of(user.end) + 1;  // user finishes speaking
    }
    if (winner_words.empty()) throw BuildError("winner has no words");
    winner_speech = {winner_words.front().frame, winner_words.back().frame};
    winner_end = region_end(winner_words);
  } else {  // NonAnswer
    const Turn& user = d.turns[static_cast<std::size_t>(silence->user_turn)];
    ce = std::min(frame_of(user.end) + 1, total_frames);
    const std::string rewrite = require_rewrite(f, "nonanswer");
    const Eigen::Index w_start =
        std::max(ce, frame_of(user.end + gap_ms));
    winner_words = cadence_placements(rewrite, w_start, period, tcfg);
    if (winner_words.empty()) throw BuildError("winner has no words");
    winner_speech = {winner_words.front().frame, winner_words.back().frame};
    winner_end = region_end(winner_words);
    winner_user_until = ce;

    // Silence loser spanning exactly the winner's frames.
    loser_end = winner_end;
    loser_speech = {0, -1};
  }

  if (winner_end > buffer_frames)
    throw BuildError("winner exceeds the dialogue buffer for " + pair.id);

  pair.context = stream::slice(full, 0, ce);
  pair.winner = build_response(ce, winner_end, winner_words, winner_speech,
                               full, winner_user_until, tcfg, seed);
  pair.loser = build_response(ce, loser_end, loser_words, loser_speech, full,
                              loser_user_until, tcfg, seed);
  pair.winner_mask.assign(static_cast<std::size_t>(winner_end - ce), 1);
  pair.loser_mask.assign(static_cast<std::size_t>(loser_end - ce), 1);
  return pair;
}

std::vector<PreferencePair> build_dialogue_pairs(
    const Dialogue& d, std::vector<FlaggedTurn> flags,
    const stream::TokenizerConfig& tcfg, const PairConfig& cfg,
    std::uint64_t seed, BuildStats* stats) {
  std::sort(flags.begin(), flags.end(),
            [](const FlaggedTurn& a, const FlaggedTurn& b) {
              return a.turn < b.turn;
            });
  std::vector<FlaggedTurn> selected;
  if (cfg.overlapping_contexts) {
    selected = select_flagged_turns(d, std::move(flags),
                                    derive_seed(seed, "select:" + d.id));
  } else if (!flags.empty()) {
    selected.push_back(std::move(flags.front()));
  }

  std::vector<PreferencePair> out;
  bool first = true;
  for (const auto& f : selected) {
    try {
      PreferencePair pair = build_preference_pair(d, f, tcfg, cfg, seed);
      pair.unique_context = first;
      out.push_back(std::move(pair));
      if (stats) ++stats->built;
    } catch (const BuildError& e) {
      if (stats) {
        ++stats->skipped;
        stats->errors.push_back(e.what());
      }
    }
    first = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mix composition
// ---------------------------------------------------------------------------

MixSpec parse_mix_spec(const std::string& text) {
  const auto kv = parse_kv_text(text);
  MixSpec spec;
  for (const auto& [key, value] : kv) {
    if (key == "total") {
      spec.target_total = std::stoll(value);
    } else if (key == "seed") {
      spec.seed = std::stoull(value);
    } else if (key.rfind("frac.", 0) == 0) {
      spec.fractions.emplace_back(key.substr(5), std::stod(value));
    } else {
      throw ConfigError("mix spec: unknown key '" + key + "'");
    }
  }
  if (spec.target_total < 0) throw ConfigError("mix spec: total must be >= 0");
  double sum = 0;
  for (const auto& [pattern, frac] : spec.fractions) {
    if (frac < 0) throw ConfigError("mix spec: negative fraction");
    sum += frac;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("mix spec: fractions sum to " + std::to_string(sum) +
                      ", expected 1");
  return spec;
}

MixSpec load_mix_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("mix spec: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_mix_spec(buf.str());
}

bool pattern_matches(const std::string& pattern,
                     const std::set<IssueCategory>& categories) {
  const bool has_content = categories.count(IssueCategory::Content) > 0;
  const bool has_cut = categories.count(IssueCategory::Cut) > 0;
  const bool has_nonanswer = categories.count(IssueCategory::NonAnswer) > 0;
  if (pattern == "any") return !categories.empty();
  if (pattern == "content") return has_content;
  if (pattern == "content-only") return has_content && !has_cut && !has_nonanswer;
  if (pattern == "timing-only") return !has_content && (has_cut || has_nonanswer);
  if (pattern == "cut-only") return !has_content && has_cut && !has_nonanswer;
  if (pattern == "nonanswer-only")
    return !has_content && !has_cut && has_nonanswer;

  std::string canonical;
  for (IssueCategory c : categories) {
    if (!canonical.empty()) canonical += '+';
    canonical += judge::category_name(c);
  }
  return pattern == canonical;
}

std::map<std::string, std::vector<PreferencePair>> partition_by_pattern(
    const std::vector<PreferencePair>& all,
    const std::vector<std::string>& patterns) {
  std::map<std::string, std::vector<PreferencePair>> pools;
  for (const auto& pattern : patterns) pools[pattern];
  for (const auto& pair : all) {
    for (const auto& pattern : patterns) {
      if (pattern_matches(pattern, pair.categories)) {
        pools[pattern].push_back(pair);
        break;
      }
    }
  }
  return pools;
}

std::vector<long long> largest_remainder_counts(
    const std::vector<double>& fractions, long long total) {
  const std::size_t n = fractions.size();
  std::vector<long long> counts(n, 0);
  std::vector<double> remainders(n, 0.0);
  long long assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = fractions[i] * static_cast<double>(total);
    counts[i] = static_cast<long long>(std::floor(target));
    remainders[i] = target - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return remainders[a] > remainders[b];
  });
  for (std::size_t i = 0; assigned < total && i < n; ++i, ++assigned)
    ++counts[order[i]];
  return counts;
}

PreferenceDataset compose_mix(
    const std::map<std::string, std::vector<PreferencePair>>& pools,
    const MixSpec& spec) {
  std::vector<double> fractions;
  fractions.reserve(spec.fractions.size());
  double sum = 0;
  for (const auto& [pattern, frac] : spec.fractions) {
    fractions.push_back(frac);
    sum += frac;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("compose_mix: fractions must sum to 1");

  const auto counts = largest_remainder_counts(fractions, spec.target_total);

  PreferenceDataset out;
  for (std::size_t i = 0; i < spec.fractions.size(); ++i) {
    const std::string& pattern = spec.fractions[i].first;
    const auto it = pools.find(pattern);
    const long long available =
        it == pools.end() ? 0 : static_cast<long long>(it->second.size());
    if (counts[i] > available)
      throw Error("compose_mix: category '" + pattern + "' has " +
                  std::to_string(available) + " pairs, need " +
                  std::to_string(counts[i]));
    // Partial Fisher-Yates: the first counts[i] slots are the sample.
    std::vector<std::size_t> idx(static_cast<std::size_t>(available));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(spec.seed, pattern));
    for (long long k = 0; k < counts[i]; ++k) {
      const auto j = std::uniform_int_distribution<std::size_t>(
          static_cast<std::size_t>(k), idx.size() - 1)(rng);
      std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
      out.pairs.push_back(it->second[idx[static_cast<std::size_t>(k)]]);
    }
  }
  return out;
}

std::pair<PreferenceDataset, PreferenceDataset> split_dataset(
    const PreferenceDataset& ds, long long val_count, std::uint64_t seed) {
  if (val_count > ds.size())
    throw Error("split: validation count " + std::to_string(val_count) +
                " exceeds dataset size " + std::to_string(ds.size()));
  std::vector<std::size_t> idx(ds.pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(splitmix64(seed));
  std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<bool> in_val(ds.pairs.size(), false);
  for (long long i = 0; i < val_count; ++i)
    in_val[idx[static_cast<std::size_t>(i)]] = true;

  PreferenceDataset train, val;
  train.split = "train";
  val.split = "val";
  for (std::size_t i = 0; i < ds.pairs.size(); ++i)
    (in_val[i] ? val : train).pairs.push_back(ds.pairs[i]);
  return {std::move(train), std::move(val)};
}

}  // namespace duplex::pairs
