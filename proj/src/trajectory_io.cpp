#include "actfocus/trajectory_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "actfocus/errors.hpp"

namespace actfocus {

using nlohmann::json;

namespace {

json env_to_json(const EpisodeMeta& m) {
  const auto& s = m.spec;
  return json{{"kind", std::string(to_string(s.kind))},
              {"size", s.size},
              {"slippery", s.slippery},
              {"max_turns", s.max_turns},
              {"max_actions_per_turn", s.max_actions_per_turn},
              {"max_actions_per_episode", s.max_actions_per_episode},
              {"step_penalty", s.step_penalty},
              {"success_reward", s.success_reward},
              {"slip_intended", s.slip_intended},
              {"holes", s.holes},
              {"boxes", s.boxes},
              {"reverse_steps", s.reverse_steps},
              {"givens", s.givens},
              {"valid_place_reward", s.valid_place_reward},
              {"invalid_place_reward", s.invalid_place_reward},
              {"seed", m.env_seed},
              {"episode", m.episode_key},
              {"format_penalty", m.format_penalty}};
}

EpisodeMeta env_from_json(const json& j) {
  EpisodeMeta m;
  m.spec = EnvSpec::defaults(parse_env_kind(j.at("kind").get<std::string>()));
  auto& s = m.spec;
  s.size = j.at("size").get<int>();
  s.slippery = j.at("slippery").get<bool>();
  s.max_turns = j.at("max_turns").get<int>();
  s.max_actions_per_turn = j.at("max_actions_per_turn").get<int>();
  s.max_actions_per_episode = j.at("max_actions_per_episode").get<int>();
  s.step_penalty = j.at("step_penalty").get<double>();
  s.success_reward = j.at("success_reward").get<double>();
  s.slip_intended = j.value("slip_intended", s.slip_intended);
  s.holes = j.value("holes", s.holes);
  s.boxes = j.value("boxes", s.boxes);
  s.reverse_steps = j.value("reverse_steps", s.reverse_steps);
  s.givens = j.value("givens", s.givens);
  s.valid_place_reward = j.value("valid_place_reward", s.valid_place_reward);
  s.invalid_place_reward = j.value("invalid_place_reward", s.invalid_place_reward);
  m.env_seed = j.at("seed").get<std::uint64_t>();
  m.episode_key = j.at("episode").get<std::uint64_t>();
  m.format_penalty = j.value("format_penalty", m.format_penalty);
  return m;
}

std::vector<double> doubles(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  std::vector<double> out;
  for (const auto& x : j.at(key)) {
    if (!x.is_number()) throw FormatError(std::string(key) + " holds a non-numeric entry");
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace

std::string to_jsonl_line(const Trajectory& traj) {
  json turns = json::array();
  for (const auto& t : traj.turns) {
    json labels = json::array();
    for (auto l : t.response.labels) labels.push_back(static_cast<int>(l));
    turns.push_back(json{{"state", t.state_text}, {"tokens", t.response.tokens}, {"labels", labels}});
  }
  json j{{"prompt_id", traj.prompt_id},
         {"group_id", traj.group_id},
         {"reward", traj.reward},
         {"turns", turns},
         {"logp_old", traj.logp_old},
         {"logp_ref", traj.logp_ref},
         {"ref_lse", traj.ref_lse},
         {"success", traj.success},
         {"format_violations", traj.format_violations}};
  if (!traj.ref_entropy.empty()) j["ref_entropy"] = traj.ref_entropy;
  if (traj.meta) j["env"] = env_to_json(*traj.meta);
  return j.dump();
}

Trajectory from_jsonl_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
  try {
    Trajectory t;
    t.prompt_id = j.at("prompt_id").get<std::int64_t>();
    t.group_id = j.value("group_id", t.prompt_id);
    t.reward = j.at("reward").get<double>();
    const int vsize = vocab().size();
    for (const auto& jt : j.at("turns")) {
      Turn turn;
      turn.state_text = jt.value("state", std::string{});
      TokenSeq tokens = jt.at("tokens").get<TokenSeq>();
      for (Token x : tokens)
        if (x < 0 || x >= vsize) throw FormatError("token id " + std::to_string(x) + " outside the vocabulary");
      turn.response = parse_response(tokens);
      const auto labels = jt.at("labels").get<std::vector<int>>();
      if (labels.size() != tokens.size()) throw FormatError("labels and tokens differ in length");
      for (std::size_t k = 0; k < labels.size(); ++k) {
        if (labels[k] < 0 || labels[k] > 2) throw FormatError("label outside {0,1,2}");
        turn.response.labels[k] = static_cast<SpanLabel>(labels[k]);
      }
      t.turns.push_back(std::move(turn));
    }
    t.logp_old = doubles(j, "logp_old");
    t.logp_ref = doubles(j, "logp_ref");
    t.ref_lse = doubles(j, "ref_lse");
    t.ref_entropy = doubles(j, "ref_entropy");
    t.success = j.value("success", false);
    t.format_violations = j.value("format_violations", 0);
    if (j.contains("env")) {
      t.meta = env_from_json(j.at("env"));
      t.env = t.meta->spec.kind;
    }
    t.validate();
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("schema violation: ") + e.what());
  } catch (const AlignmentError& e) {
    throw FormatError(e.what());
  }
}

void write_jsonl(std::ostream& out, const std::vector<Trajectory>& trajs) {
  for (const auto& t : trajs) out << to_jsonl_line(t) << '\n';
}

JsonlReadResult read_jsonl(std::istream& in) {
  JsonlReadResult r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++r.lines;
    try {
      r.trajectories.push_back(from_jsonl_line(line));
    } catch (const FormatError& e) {
      r.warnings.push_back("line " + std::to_string(r.lines) + ": " + e.what());
    }
  }
  return r;
}

JsonlReadResult read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trajectory log '" + path + "'");
  return read_jsonl(in);
}

}  // namespace actfocus
