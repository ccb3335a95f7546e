#pragma once

#include <cstdint>
#include <vector>

#include "duplex/timing.hpp"
#include "duplex/transcript.hpp"

namespace duplex::sim {

/// Synthetic-conversation generator with planted timing issues. Events are
/// planted with wide margins around the detection thresholds, so the planted
/// list is the exact ground truth for the detectors (precision = recall = 1).
struct SimConfig {
  int min_rounds = 3;
  int max_rounds = 6;
  double interruption_rate = 0.2;
  double unresponsive_rate = 0.2;
  timing::TimingConfig timing;
};

struct SimResult {
  transcript::Dialogue dialogue;
  std::vector<timing::TimingIssue> planted;
};

SimResult simulate_dialogue(const std::string& id, const SimConfig& cfg,
                            std::uint64_t seed);

}  // namespace duplex::sim
