#include "actfocus/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "actfocus/errors.hpp"
#include "actfocus/rng.hpp"

namespace actfocus {

std::string_view to_string(Weighting w) { return w == Weighting::Uniform ? "uniform" : "actfocus"; }

Weighting parse_weighting(std::string_view name) {
  if (name == "uniform") return Weighting::Uniform;
  if (name == "actfocus") return Weighting::ActFocus;
  throw ConfigError("unknown weighting '" + std::string(name) + "'");
}

double TrainConfig::effective_filter_ratio() const {
  if (filter_ratio > 0.0) return filter_ratio;
  return (algo == Algorithm::GRPO && env.kind == EnvKind::FrozenLake) ? 1.0 : 0.25;
}

void TrainConfig::validate() const {
  env.validate();
  arch.validate();
  if (arch.vocab_size != vocab().size()) throw ConfigError("policy.vocab_size must equal the vocabulary size");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0, 1]");
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be positive");
  if (rollouts_per_prompt < 2) throw ConfigError("rollouts_per_prompt must be at least 2");
  if (filter_ratio != -1.0 && (filter_ratio <= 0.0 || filter_ratio > 1.0))
    throw ConfigError("filter_ratio must lie in (0, 1] or be -1");
  if (mini_batch < 1 || ppo_epochs < 1) throw ConfigError("mini_batch and ppo_epochs must be positive");
  if (total_steps < 0 || eval_every < 1) throw ConfigError("total_steps must be >= 0 and eval_every positive");
  if (eval_prompts < 1 || eval_rollouts < 1) throw ConfigError("evaluation set must be non-empty");
  if (eval_temperature < 0.0 || rollout_temperature <= 0.0) throw ConfigError("temperatures must be positive");
  if (max_response_tokens < 4) throw ConfigError("max_response_tokens must be at least 4");
  if (trajectory_log_every < 0) throw ConfigError("trajectory_log_every must be non-negative");
  if (warmup.max_steps < 0 || warmup.batch < 1 || warmup.check_every < 1 || warmup.check_prompts < 1)
    throw ConfigError("invalid warmup block");
  if (warmup.think_min < 0 || warmup.think_max < warmup.think_min) throw ConfigError("invalid warmup think range");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("invalid value '" + std::string(s) + "' for " + std::string(key));
  return v;
}

bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("invalid boolean '" + std::string(s) + "' for " + std::string(key));
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
};

template <class T, class Proj>
Field num(std::string section, std::string key, Proj proj) {
  const std::string full = section + "." + key;
  return {section, key,
          [proj](const TrainConfig& c) {
            const T v = proj(const_cast<TrainConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return fmt_double(v);
            else return std::to_string(v);
          },
          [proj, full](TrainConfig& c, std::string_view s) { proj(c) = parse_number<T>(full, s); }};
}

template <class Proj>
Field flag(std::string section, std::string key, Proj proj) {
  const std::string full = section + "." + key;
  return {section, key, [proj](const TrainConfig& c) { return std::string(proj(const_cast<TrainConfig&>(c)) ? "true" : "false"); },
          [proj, full](TrainConfig& c, std::string_view s) { proj(c) = parse_bool(full, s); }};
}

const std::vector<Field>& fields() {
  using C = TrainConfig;
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"run", "algo", [](const C& c) { return std::string(to_string(c.algo)); },
                 [](C& c, std::string_view s) { c.algo = parse_algorithm(s); }});
    v.push_back({"run", "weighting", [](const C& c) { return std::string(to_string(c.weighting)); },
                 [](C& c, std::string_view s) { c.weighting = parse_weighting(s); }});
    v.push_back({"run", "signal", [](const C& c) { return std::string(to_string(c.signal)); },
                 [](C& c, std::string_view s) { c.signal = parse_signal_kind(s); }});
    v.push_back(num<double>("run", "alpha", [](C& c) -> double& { return c.alpha; }));
    v.push_back(num<double>("run", "beta", [](C& c) -> double& { return c.beta; }));
    v.push_back(num<std::uint64_t>("run", "seed", [](C& c) -> std::uint64_t& { return c.seed; }));
    v.push_back(num<int>("run", "prompts_per_step", [](C& c) -> int& { return c.prompts_per_step; }));
    v.push_back(num<int>("run", "rollouts_per_prompt", [](C& c) -> int& { return c.rollouts_per_prompt; }));
    v.push_back(num<double>("run", "filter_ratio", [](C& c) -> double& { return c.filter_ratio; }));
    v.push_back(num<int>("run", "mini_batch", [](C& c) -> int& { return c.mini_batch; }));
    v.push_back(num<int>("run", "ppo_epochs", [](C& c) -> int& { return c.ppo_epochs; }));
    v.push_back(num<int>("run", "total_steps", [](C& c) -> int& { return c.total_steps; }));
    v.push_back(num<int>("run", "eval_every", [](C& c) -> int& { return c.eval_every; }));
    v.push_back(num<int>("run", "eval_prompts", [](C& c) -> int& { return c.eval_prompts; }));
    v.push_back(num<int>("run", "eval_rollouts", [](C& c) -> int& { return c.eval_rollouts; }));
    v.push_back(num<double>("run", "eval_temperature", [](C& c) -> double& { return c.eval_temperature; }));
    v.push_back(num<double>("run", "rollout_temperature", [](C& c) -> double& { return c.rollout_temperature; }));
    v.push_back(num<double>("run", "stop_at_success", [](C& c) -> double& { return c.stop_at_success; }));
    v.push_back(num<int>("run", "max_response_tokens", [](C& c) -> int& { return c.max_response_tokens; }));
    v.push_back(num<double>("run", "gamma", [](C& c) -> double& { return c.gamma; }));
    v.push_back(num<double>("run", "lambda", [](C& c) -> double& { return c.lambda; }));
    v.push_back(num<double>("run", "format_penalty", [](C& c) -> double& { return c.format_penalty; }));
    v.push_back(num<int>("run", "trajectory_log_every", [](C& c) -> int& { return c.trajectory_log_every; }));
    v.push_back(flag("run", "credit_dump", [](C& c) -> bool& { return c.credit_dump; }));
    v.push_back(flag("run", "whiten_advantages", [](C& c) -> bool& { return c.whiten_advantages; }));

    v.push_back({"env", "kind", [](const C& c) { return std::string(to_string(c.env.kind)); },
                 [](C& c, std::string_view s) { c.env = EnvSpec::defaults(parse_env_kind(s)); }});
    v.push_back(num<int>("env", "size", [](C& c) -> int& { return c.env.size; }));
    v.push_back(flag("env", "slippery", [](C& c) -> bool& { return c.env.slippery; }));
    v.push_back(num<int>("env", "max_turns", [](C& c) -> int& { return c.env.max_turns; }));
    v.push_back(num<int>("env", "max_actions_per_turn", [](C& c) -> int& { return c.env.max_actions_per_turn; }));
    v.push_back(num<int>("env", "max_actions_per_episode", [](C& c) -> int& { return c.env.max_actions_per_episode; }));
    v.push_back(num<double>("env", "step_penalty", [](C& c) -> double& { return c.env.step_penalty; }));
    v.push_back(num<double>("env", "success_reward", [](C& c) -> double& { return c.env.success_reward; }));
    v.push_back(num<double>("env", "slip_intended", [](C& c) -> double& { return c.env.slip_intended; }));
    v.push_back(num<int>("env", "holes", [](C& c) -> int& { return c.env.holes; }));
    v.push_back(num<int>("env", "boxes", [](C& c) -> int& { return c.env.boxes; }));
    v.push_back(num<int>("env", "reverse_steps", [](C& c) -> int& { return c.env.reverse_steps; }));
    v.push_back(num<int>("env", "givens", [](C& c) -> int& { return c.env.givens; }));
    v.push_back(num<double>("env", "valid_place_reward", [](C& c) -> double& { return c.env.valid_place_reward; }));
    v.push_back(num<double>("env", "invalid_place_reward", [](C& c) -> double& { return c.env.invalid_place_reward; }));

    v.push_back(num<int>("policy", "vocab_size", [](C& c) -> int& { return c.arch.vocab_size; }));
    v.push_back(num<int>("policy", "d_model", [](C& c) -> int& { return c.arch.d_model; }));
    v.push_back(num<int>("policy", "n_heads", [](C& c) -> int& { return c.arch.n_heads; }));
    v.push_back(num<int>("policy", "n_layers", [](C& c) -> int& { return c.arch.n_layers; }));
    v.push_back(num<int>("policy", "context_window", [](C& c) -> int& { return c.arch.context_window; }));
    v.push_back(num<int>("policy", "mlp_mult", [](C& c) -> int& { return c.arch.mlp_mult; }));
    v.push_back(flag("policy", "value_head", [](C& c) -> bool& { return c.arch.value_head; }));

    v.push_back(num<double>("optimizer", "actor_lr", [](C& c) -> double& { return c.adam.actor_lr; }));
    v.push_back(num<double>("optimizer", "critic_lr", [](C& c) -> double& { return c.adam.critic_lr; }));
    v.push_back(num<double>("optimizer", "beta1", [](C& c) -> double& { return c.adam.beta1; }));
    v.push_back(num<double>("optimizer", "beta2", [](C& c) -> double& { return c.adam.beta2; }));
    v.push_back(num<double>("optimizer", "eps", [](C& c) -> double& { return c.adam.eps; }));
    v.push_back(num<double>("optimizer", "eps_low", [](C& c) -> double& { return c.objective.eps_low; }));
    v.push_back(num<double>("optimizer", "eps_high", [](C& c) -> double& { return c.objective.eps_high; }));
    v.push_back(num<double>("optimizer", "kl_coef", [](C& c) -> double& { return c.objective.kl_coef; }));
    v.push_back(num<double>("optimizer", "entropy_coef", [](C& c) -> double& { return c.objective.entropy_coef; }));
    v.push_back(num<double>("optimizer", "value_coef", [](C& c) -> double& { return c.objective.value_coef; }));

    v.push_back(num<int>("warmup", "max_steps", [](C& c) -> int& { return c.warmup.max_steps; }));
    v.push_back(num<int>("warmup", "batch", [](C& c) -> int& { return c.warmup.batch; }));
    v.push_back(num<double>("warmup", "lr", [](C& c) -> double& { return c.warmup.lr; }));
    v.push_back(num<double>("warmup", "target_validity", [](C& c) -> double& { return c.warmup.target_validity; }));
    v.push_back(num<int>("warmup", "check_every", [](C& c) -> int& { return c.warmup.check_every; }));
    v.push_back(num<int>("warmup", "check_prompts", [](C& c) -> int& { return c.warmup.check_prompts; }));
    v.push_back(num<int>("warmup", "think_min", [](C& c) -> int& { return c.warmup.think_min; }));
    v.push_back(num<int>("warmup", "think_max", [](C& c) -> int& { return c.warmup.think_max; }));
    return v;
  }();
  return f;
}

const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

boost::property_tree::ptree read_ini_text(std::string_view text) {
  boost::property_tree::ptree pt;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  return pt;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void set_config_value(TrainConfig& cfg, std::string_view dotted_key, std::string_view value) {
  std::string_view section = "run", key = dotted_key;
  if (const auto dot = dotted_key.find('.'); dot != std::string_view::npos) {
    section = dotted_key.substr(0, dot);
    key = dotted_key.substr(dot + 1);
  }
  const Field* f = find_field(section, key);
  if (!f) throw ConfigError("unknown config key '" + std::string(dotted_key) + "'");
  f->set(cfg, trim(value));
}

TrainConfig parse_config(std::string_view text) {
  const auto pt = read_ini_text(text);
  TrainConfig cfg;
  // The environment kind resets the [env] block, so apply it first.
  if (const auto env = pt.get_child_optional("env"))
    if (const auto kind = env->get_optional<std::string>("kind")) set_config_value(cfg, "env.kind", *kind);
  for (const auto& [section, body] : pt) {
    if (section == "seeds") continue;  // derived, informational
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key '" + section + "' must live inside a section");
    for (const auto& [key, node] : body) {
      if (section == "env" && key == "kind") continue;
      if (!find_field(section, key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
      set_config_value(cfg, section + "." + key, node.data());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream out;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << f.section << "]\n";
      current = f.section;
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  out << "\n[seeds]\n";
  const RngStream root(cfg.seed);
  for (auto name : {kStreamInit, kStreamWarmup, kStreamEnvGen, kStreamRollout, kStreamShuffle, kStreamEval,
                    kStreamPermutation})
    out << name << " = " << root.derive(name).key() << '\n';
  return out.str();
}

std::size_t SweepGrid::cell_count() const {
  if (axes.empty()) return 0;
  std::size_t n = 1;
  for (const auto& [k, vals] : axes) n *= vals.size();
  return n;
}

std::vector<std::pair<std::string, std::string>> SweepGrid::cell(std::size_t index) const {
  std::vector<std::pair<std::string, std::string>> out(axes.size());
  // Last axis varies fastest.
  for (std::size_t a = axes.size(); a-- > 0;) {
    const auto& vals = axes[a].second;
    out[a] = {axes[a].first, vals[index % vals.size()]};
    index /= vals.size();
  }
  return out;
}

SweepGrid parse_grid(std::string_view text) {
  const auto pt = read_ini_text(text);
  SweepGrid g;
  for (const auto& [section, body] : pt) {
    if (section != "grid") throw ConfigError("unknown grid section '" + section + "'");
    for (const auto& [key, node] : body) {
      std::vector<std::string> vals;
      std::string_view rest = node.data();
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = trim(rest.substr(0, comma));
        if (!item.empty()) vals.emplace_back(item);
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
      }
      TrainConfig probe;
      for (const auto& v : vals) set_config_value(probe, key, v);
      g.axes.emplace_back(key, std::move(vals));
    }
  }
  return g;
}

SweepGrid load_grid(const std::filesystem::path& path) { return parse_grid(read_file(path)); }

}  // namespace actfocus
