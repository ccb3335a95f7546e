#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "duplex/timing.hpp"
#include "duplex/transcript.hpp"

namespace duplex::judge {

using transcript::Dialogue;

// ---------------------------------------------------------------------------
// Assessment axes
// ---------------------------------------------------------------------------

enum class Axis {
  Helpfulness,
  Safety,
  FactualAccuracy,
  InstructionAdherence,
  Tone,
  Interruption,
  Unresponsiveness,
};

inline constexpr int kAxisCount = 7;

/// All seven axes in canonical order.
const std::vector<Axis>& all_axes();

/// Wire name, e.g. "factual_accuracy".
std::string axis_name(Axis a);
/// Human-readable name used inside prompts, e.g. "factual accuracy".
std::string axis_display_name(Axis a);
/// One-line rubric description used inside prompts.
std::string axis_description(Axis a);
Axis axis_from_name(const std::string& name);

struct AxisAssessment {
  int turn = 0;  // 1-based turn number within the rendered dialogue
  Axis axis = Axis::Helpfulness;
  std::string evaluation;
  int score = -1;  // -1 = axis irrelevant, else 0 (worst) .. 4 (best)
  bool problematic = false;
};

struct RewriteResult {
  std::string original_response;  // empty when the model never answered
  std::string improved_response;
  std::string explanation;
  int how_much_better = 0;  // 0 .. 3
};

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

enum class JudgeMode { Assess, Rewrite };

struct EvalTurn {
  int number = 0;       // 1-based turn number
  std::string text;     // the model utterance under evaluation
  std::string context;  // rendered turns preceding it
};

struct JudgeRequest {
  std::string dialogue_id;
  JudgeMode mode = JudgeMode::Assess;
  Axis axis = Axis::Helpfulness;  // Assess only
  std::string prompt;             // full request text (the wire payload)
  std::vector<EvalTurn> eval_turns;  // structured view for the mock judge
  std::string flagged_text;          // Rewrite: the problematic answer
  std::string issues_text;           // Rewrite: identified issues
};

/// Builds an assessment request covering every model turn of the dialogue
/// for one axis.
JudgeRequest build_assess_request(const Dialogue& d, Axis axis);

/// Builds a rewrite request for the flagged model turn. The embedded context
/// stops just after the user's last turn preceding the flagged reply. Pass an
/// empty `issues` list for silence flags with no original answer.
/// Throws Error if `flagged_turn` does not reference a model turn.
JudgeRequest build_rewrite_request(const Dialogue& d, int flagged_turn,
                                   const std::vector<std::string>& issues);

// ---------------------------------------------------------------------------
// Reply parsing
// ---------------------------------------------------------------------------

/// Strict parse of an assessment reply (JSON list). Unknown fields are
/// ignored; missing fields, wrong types and out-of-range scores throw
/// SchemaError with a distinct code.
std::vector<AxisAssessment> parse_assessments(const std::string& raw, Axis axis);

/// Strict parse of a rewrite reply (JSON object).
RewriteResult parse_rewrite(const std::string& raw);

/// Renders assessments in the reply schema; inverse of parse_assessments.
std::string render_assessments(const std::vector<AxisAssessment>& list);
std::string render_rewrite(const RewriteResult& r);

/// Rewrites must be plain speakable English: no bracketed or parenthesised
/// content, ASCII text only. Returns a reason when the text violates that.
std::optional<std::string> lint_rewrite(const std::string& text);

// ---------------------------------------------------------------------------
// Flagging
// ---------------------------------------------------------------------------

struct JudgeFlag {
  int turn = 0;  // 0-based index into Dialogue::turns
  std::set<Axis> axes;
};

/// A turn is flagged when any axis is marked problematic or scored in
/// [0, threshold]. Score -1 (irrelevant) never flags. Assessment turn
/// numbers are 1-based and converted to dialogue indices here.
std::vector<JudgeFlag> flag_problematic(
    const std::vector<AxisAssessment>& assessments, int threshold = 2);

enum class IssueCategory { Content, Cut, NonAnswer };

std::string category_name(IssueCategory c);
IssueCategory category_from_name(const std::string& name);

/// A problematic reply plus everything needed to build its preference pair.
struct FlaggedTurn {
  std::string dialogue_id;
  int turn = 0;  // 0-based index into Dialogue::turns
  std::set<IssueCategory> categories;
  std::set<Axis> axes;
  std::vector<timing::TimingIssue> timing;  // required for Cut / NonAnswer
  std::optional<RewriteResult> rewrite;
};

/// Merges judge flags with rule-based timing detections. Rule detection is
/// authoritative for the Cut / NonAnswer categories: a judge-only timing
/// axis never creates a timing category, and a flag with no surviving
/// category is dropped.
std::vector<FlaggedTurn> merge_flags(
    const Dialogue& d, const std::vector<JudgeFlag>& judge_flags,
    const std::vector<timing::TimingIssue>& issues);

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  /// Returns the raw reply text. Throws TransportError on transient failure.
  virtual std::string query(const JudgeRequest& req) = 0;
};

struct MockRule {
  std::string keyword;  // case-insensitive substring, matched against the
                        // evaluated turn and its context
  Axis axis = Axis::Safety;
  int score = 0;
  bool problematic = true;
  std::string rewrite;  // preferred response suggested for matching turns
};

/// Deterministic in-process judge: a pure function of (request, seed).
class MockJudge : public JudgeClient {
 public:
  MockJudge(std::vector<MockRule> rules, std::uint64_t seed)
      : rules_(std::move(rules)), seed_(seed) {}

  std::string query(const JudgeRequest& req) override;

  static std::vector<MockRule> load_rules(const std::string& path);
  static std::vector<MockRule> parse_rules(const std::string& json_text);

 private:
  std::vector<MockRule> rules_;
  std::uint64_t seed_;
};

/// POSTs the prompt to `<base_url><path>` and returns the reply body.
/// The bearer token is read from the environment variable named by
/// `token_env` when set.
class HttpJudge : public JudgeClient {
 public:
  explicit HttpJudge(std::string base_url, std::string path = "/judge",
                     std::string token_env = "DUPLEX_JUDGE_TOKEN");
  std::string query(const JudgeRequest& req) override;

 private:
  std::string base_url_;
  std::string path_;
  std::string token_env_;
};

struct RetryPolicy {
  int max_retries = 2;      // total attempts = max_retries + 1
  int backoff_ms = 100;     // first delay; doubles per retry
  std::function<void(int)> sleeper;  // injectable for tests
};

/// Issues one request with retries and exponential backoff on
/// TransportError. When `audit` is given, appends one JSON record per call.
std::string query_judge(JudgeClient& client, const JudgeRequest& req,
                        const RetryPolicy& retry, std::ostream* audit = nullptr);

/// Runs many requests with a bounded number of worker threads; results come
/// back in input order regardless of scheduling.
std::vector<std::string> query_all(JudgeClient& client,
                                   const std::vector<JudgeRequest>& reqs,
                                   const RetryPolicy& retry, int concurrency,
                                   std::ostream* audit = nullptr);

}  // namespace duplex::judge
