#include "duplex/timing.hpp"

#include <algorithm>

#include "duplex/errors.hpp"

namespace duplex::timing {

using transcript::Speaker;

namespace {

void check_config(const TimingConfig& cfg) {
  if (cfg.cut_min_overhang <= 0 || cfg.cut_guard <= 0 ||
      cfg.response_deadline <= 0)
    throw ConfigError("timing thresholds must be positive");
}

}  // namespace

std::vector<TimingIssue> detect_interruptions(const Dialogue& d,
                                              const TimingConfig& cfg) {
  check_config(cfg);
  const Millis overhang = transcript::ms_from_seconds(cfg.cut_min_overhang);
  const Millis guard = transcript::ms_from_seconds(cfg.cut_guard);

  std::vector<TimingIssue> issues;
  for (int m = 0; m < static_cast<int>(d.turns.size()); ++m) {
    const auto& model = d.turns[static_cast<std::size_t>(m)];
    if (model.speaker != Speaker::Model) continue;
    for (int u = 0; u < static_cast<int>(d.turns.size()); ++u) {
      const auto& user = d.turns[static_cast<std::size_t>(u)];
      if (user.speaker != Speaker::User) continue;
      if (!(user.start + guard < model.start &&
            model.start < user.end - overhang))
        continue;
      if (cfg.backchannel_exemption &&
          model.word_count() <= cfg.backchannel_max_words &&
          model.start >= user.start && model.end <= user.end)
        continue;
      issues.push_back({IssueKind::Interruption, m, u, model.start,
                        user.end - model.start});
    }
  }
  std::sort(issues.begin(), issues.end(),
            [](const TimingIssue& a, const TimingIssue& b) {
              return a.onset < b.onset;
            });
  return issues;
}

std::vector<TimingIssue> detect_unresponsiveness(const Dialogue& d,
                                                 const TimingConfig& cfg) {
  check_config(cfg);
  const Millis deadline = transcript::ms_from_seconds(cfg.response_deadline);

  std::vector<TimingIssue> issues;
  for (int u = 0; u < static_cast<int>(d.turns.size()); ++u) {
    const auto& user = d.turns[static_cast<std::size_t>(u)];
    if (user.speaker != Speaker::User) continue;
    const Millis u_end = user.end;

    bool user_follows = false;
    for (const auto& t : d.turns) {
      if (t.speaker == Speaker::User && t.start > u_end &&
          t.start <= u_end + deadline) {
        user_follows = true;
        break;
      }
    }
    if (user_follows) continue;

    // Next model word start after the user turn end, across all model turns.
    Millis next_word = -1;
    int next_turn = -1;
    for (int m = 0; m < static_cast<int>(d.turns.size()); ++m) {
      const auto& t = d.turns[static_cast<std::size_t>(m)];
      if (t.speaker != Speaker::Model) continue;
      for (const auto& w : t.words) {
        if (w.start > u_end && (next_word < 0 || w.start < next_word)) {
          next_word = w.start;
          next_turn = m;
        }
      }
    }
    if (next_word >= 0 && next_word <= u_end + deadline) continue;

    TimingIssue issue;
    issue.kind = IssueKind::Unresponsive;
    issue.user_turn = u;
    issue.onset = u_end;
    if (next_word >= 0) {
      issue.model_turn = next_turn;
      issue.gap = next_word - u_end;
    } else {
      issue.gap = d.duration - u_end;
    }
    issues.push_back(issue);
  }
  return issues;
}

std::vector<TimingIssue> detect_all(const Dialogue& d,
                                    const TimingConfig& cfg) {
  std::vector<TimingIssue> all = detect_interruptions(d, cfg);
  std::vector<TimingIssue> silent = detect_unresponsiveness(d, cfg);
  all.insert(all.end(), silent.begin(), silent.end());
  std::sort(all.begin(), all.end(),
            [](const TimingIssue& a, const TimingIssue& b) {
              if (a.onset != b.onset) return a.onset < b.onset;
              return a.kind < b.kind;
            });
  return all;
}

}  // namespace duplex::timing
