#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "duplex/errors.hpp"
#include "duplex/hashing.hpp"
#include "duplex/judge.hpp"

namespace duplex::judge {

using json = nlohmann::json;

namespace {

std::string to_lower(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool contains_keyword(const std::string& haystack, const std::string& needle) {
  return !needle.empty() &&
         to_lower(haystack).find(to_lower(needle)) != std::string::npos;
}

constexpr const char* kDefaultRevision =
    "Happy to help with that. Let me give you a better answer this time.";
constexpr const char* kDefaultFreshReply =
    "Sorry for the pause. I'm with you, go ahead and tell me more.";

}  // namespace

std::string MockJudge::query(const JudgeRequest& req) {
  if (req.mode == JudgeMode::Assess) {
    json out = json::array();
    for (const auto& turn : req.eval_turns) {
      const MockRule* hit = nullptr;
      for (const auto& rule : rules_) {
        if (rule.axis != req.axis) continue;
        if (contains_keyword(turn.text, rule.keyword) ||
            contains_keyword(turn.context, rule.keyword)) {
          hit = &rule;
          break;
        }
      }
      if (hit) {
        out.push_back({{"turn", turn.number},
                       {"evaluation", "the reply relates to \"" + hit->keyword +
                                          "\" which this axis disallows"},
                       {"score", hit->score},
                       {"problematic", hit->problematic}});
      } else {
        out.push_back({{"turn", turn.number},
                       {"evaluation", "no issues found for this axis"},
                       {"score", 3},
                       {"problematic", false}});
      }
    }
    return out.dump();
  }

  // Rewrite: reuse the first rule whose keyword matches the flagged reply or
  // its context and that carries a suggested response.
  const MockRule* hit = nullptr;
  for (const auto& rule : rules_) {
    if (rule.rewrite.empty()) continue;
    const bool matches =
        contains_keyword(req.flagged_text, rule.keyword) ||
        (!req.eval_turns.empty() &&
         contains_keyword(req.eval_turns.front().context, rule.keyword));
    if (matches) {
      hit = &rule;
      break;
    }
  }
  std::string improved = hit                      ? hit->rewrite
                         : req.flagged_text.empty() ? kDefaultFreshReply
                                                    : kDefaultRevision;
  std::string explanation =
      req.issues_text.empty()
          ? "generated a reply where the assistant stayed silent"
          : "revised the reply to address the identified issues";
  const std::uint64_t h = splitmix64(fnv1a64(req.prompt) ^ seed_);
  return json{{"original_response", req.flagged_text},
              {"improved_response", improved},
              {"explanation", explanation},
              {"how_much_better", 1 + static_cast<int>(h % 3)}}
      .dump();
}

std::vector<MockRule> MockJudge::parse_rules(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("mock rules: ") + e.what());
  }
  if (!root.is_array()) throw ConfigError("mock rules: expected a JSON list");
  std::vector<MockRule> rules;
  for (const json& item : root) {
    MockRule r;
    if (!item.contains("keyword") || !item.contains("axis"))
      throw ConfigError("mock rules: each rule needs 'keyword' and 'axis'");
    r.keyword = item.at("keyword").get<std::string>();
    r.axis = axis_from_name(item.at("axis").get<std::string>());
    r.score = item.value("score", 0);
    r.problematic = item.value("problematic", true);
    r.rewrite = item.value("rewrite", std::string{});
    rules.push_back(std::move(r));
  }
  return rules;
}

std::vector<MockRule> MockJudge::load_rules(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("mock rules: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_rules(buf.str());
}

HttpJudge::HttpJudge(std::string base_url, std::string path,
                     std::string token_env)
    : base_url_(std::move(base_url)),
      path_(std::move(path)),
      token_env_(std::move(token_env)) {}

std::string HttpJudge::query(const JudgeRequest& req) {
  httplib::Client client(base_url_);
  httplib::Headers headers;
  if (const char* token = std::getenv(token_env_.c_str()))
    headers.emplace("Authorization", std::string("Bearer ") + token);
  auto res = client.Post(path_, headers, req.prompt, "text/plain");
  if (!res)
    throw TransportError("judge endpoint unreachable: " + base_url_);
  if (res->status >= 500)
    throw TransportError("judge endpoint returned " +
                         std::to_string(res->status));
  if (res->status != 200)
    throw ProtocolError("judge endpoint returned " +
                        std::to_string(res->status));
  if (res->body.empty()) throw ProtocolError("judge reply was empty");
  return res->body;
}

std::string query_judge(JudgeClient& client, const JudgeRequest& req,
                        const RetryPolicy& retry, std::ostream* audit) {
  static std::mutex audit_mutex;
  const auto started = std::chrono::steady_clock::now();
  auto emit_audit = [&](int attempts, bool ok, const std::string& error) {
    if (!audit) return;
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - started)
                             .count();
    json record{{"request_hash", fnv1a64(req.prompt)},
                {"attempts", attempts},
                {"latency_ms", elapsed},
                {"ok", ok}};
    if (!ok) record["error"] = error;
    std::lock_guard<std::mutex> lock(audit_mutex);
    (*audit) << record.dump() << '\n';
  };

  std::string last_error;
  for (int attempt = 0; attempt <= retry.max_retries; ++attempt) {
    if (attempt > 0) {
      const int delay = retry.backoff_ms * (1 << (attempt - 1));
      if (retry.sleeper)
        retry.sleeper(delay);
      else
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
    }
    try {
      std::string reply = client.query(req);
      emit_audit(attempt + 1, true, "");
      return reply;
    } catch (const TransportError& e) {
      last_error = e.what();
    }
  }
  emit_audit(retry.max_retries + 1, false, last_error);
  throw TransportError("judge unreachable after " +
                       std::to_string(retry.max_retries + 1) +
                       " attempts: " + last_error);
}

std::vector<std::string> query_all(JudgeClient& client,
                                   const std::vector<JudgeRequest>& reqs,
                                   const RetryPolicy& retry, int concurrency,
                                   std::ostream* audit) {
  std::vector<std::string> results(reqs.size());
  if (reqs.empty()) return results;
  const int workers =
      std::max(1, std::min<int>(concurrency, static_cast<int>(reqs.size())));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto run = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= reqs.size()) return;
      try {
        results[i] = query_judge(client, reqs[i], retry, audit);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int i = 0; i < workers; ++i) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace duplex::judge
