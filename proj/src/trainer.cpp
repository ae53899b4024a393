#include "actfocus/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "actfocus/advantage.hpp"
#include "actfocus/checkpoint.hpp"
#include "actfocus/credit.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/numerics.hpp"
#include "actfocus/trajectory_io.hpp"

namespace actfocus {

namespace {

bool format_violation(const Response& r, const ParsedActions& p) { return !r.well_formed || p.unknown > 0; }

template <class... Args>
void logf(std::ostream* log, const Args&... args) {
  if (!log) return;
  ((*log) << ... << args) << std::endl;
}

}  // namespace

// ---------------------------------------------------------------- episodes --

Trajectory run_episode(const EnvSpec& spec, std::uint64_t env_seed, std::uint64_t episode_key, RngStream sampler,
                       const RolloutPolicy& rp) {
  Trajectory tr;
  tr.env = spec.kind;
  tr.meta = EpisodeMeta{spec, env_seed, episode_key, rp.format_penalty};
  EnvState state = reset(spec, env_seed);
  RngStream env_rng(episode_key);

  Decoder dec(*rp.policy);
  std::optional<Decoder> ref;
  if (rp.reference) ref.emplace(*rp.reference);
  const Token marker = env_token(spec.kind);
  dec.feed(marker);
  if (ref) ref->feed(marker);

  const auto window = static_cast<std::size_t>(rp.policy->arch.context_window);
  double penalties = 0.0;
  while (!state.terminated) {
    std::string text = render_state(state);
    const auto prompt = state_prompt_tokens(text);
    if (dec.length() + prompt.size() + static_cast<std::size_t>(rp.max_tokens) > window) break;
    dec.feed(prompt);
    if (ref) ref->feed(prompt);
    auto s = sample_response(dec, ref ? &*ref : nullptr, rp.temperature, sampler, rp.max_tokens);
    tr.logp_old.insert(tr.logp_old.end(), s.logp.begin(), s.logp.end());
    tr.values_old.insert(tr.values_old.end(), s.values.begin(), s.values.end());
    tr.logp_ref.insert(tr.logp_ref.end(), s.ref_logp.begin(), s.ref_logp.end());
    tr.ref_lse.insert(tr.ref_lse.end(), s.ref_lse.begin(), s.ref_lse.end());
    tr.ref_entropy.insert(tr.ref_entropy.end(), s.ref_entropy.begin(), s.ref_entropy.end());
    const auto parsed = parse_actions(s.response, spec.kind);
    if (format_violation(s.response, parsed)) {
      penalties += rp.format_penalty;
      ++tr.format_violations;
    }
    tr.turns.push_back({std::move(text), std::move(s.response)});
    state = apply_actions(state, parsed.actions, env_rng).state;
  }
  tr.reward = state.accumulated_reward + penalties;
  tr.success = state.solved;
  return tr;
}

TokenSeq scripted_response(const EnvState& state, RngStream& rng, int think_min, int think_max) {
  const auto& V = vocab();
  TokenSeq t{tok::kThinkOpen};
  const auto n_think = think_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(think_max - think_min + 1)));
  for (int i = 0; i < n_think; ++i) t.push_back(V.filler()[rng.below(V.filler().size())]);
  t.push_back(tok::kThinkClose);
  t.push_back(tok::kAnswerOpen);
  const int n_act = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(state.spec.max_actions_per_turn)));
  for (int i = 0; i < n_act; ++i) {
    if (i) t.push_back(tok::kSeparator);
    if (state.spec.kind == EnvKind::Sudoku) {
      const auto& b = std::get<SudokuBoard>(state.board);
      std::vector<int> empty;
      for (int c = 0; c < 16; ++c)
        if (b.values[c] == 0) empty.push_back(c);
      const int cell = empty.empty() ? static_cast<int>(rng.below(16)) : empty[rng.below(empty.size())];
      const int value = 1 + static_cast<int>(rng.below(4));
      t.insert(t.end(), {Vocabulary::digit(cell / 4 + 1), tok::kComma, Vocabulary::digit(cell % 4 + 1), tok::kComma,
                         Vocabulary::digit(value)});
    } else {
      t.push_back(static_cast<Token>(tok::kUp + rng.below(4)));
    }
  }
  t.push_back(tok::kAnswerClose);
  return t;
}

Trajectory scripted_episode(const EnvSpec& spec, std::uint64_t env_seed, std::uint64_t episode_key, RngStream rng,
                            int think_min, int think_max, double format_penalty) {
  Trajectory tr;
  tr.env = spec.kind;
  tr.meta = EpisodeMeta{spec, env_seed, episode_key, format_penalty};
  EnvState state = reset(spec, env_seed);
  RngStream env_rng(episode_key);
  double penalties = 0.0;
  while (!state.terminated) {
    auto response = parse_response(scripted_response(state, rng, think_min, think_max));
    const auto parsed = parse_actions(response, spec.kind);
    if (format_violation(response, parsed)) {
      penalties += format_penalty;
      ++tr.format_violations;
    }
    tr.turns.push_back({render_state(state), std::move(response)});
    state = apply_actions(state, parsed.actions, env_rng).state;
  }
  tr.reward = state.accumulated_reward + penalties;
  tr.success = state.solved;
  return tr;
}

double replay_episode(const Trajectory& traj, bool* success) {
  if (!traj.meta) throw FormatError("trajectory has no env block to replay");
  const auto& m = *traj.meta;
  EnvState state = reset(m.spec, m.env_seed);
  RngStream env_rng(m.episode_key);
  double penalties = 0.0;
  for (std::size_t k = 0; k < traj.turns.size(); ++k) {
    const auto& turn = traj.turns[k];
    if (state.terminated) throw FormatError("turn " + std::to_string(k) + " logged after the episode ended");
    if (render_state(state) != turn.state_text) throw FormatError("state of turn " + std::to_string(k) + " differs from the log");
    const auto parsed = parse_actions(turn.response, m.spec.kind);
    if (format_violation(turn.response, parsed)) penalties += m.format_penalty;
    state = apply_actions(state, parsed.actions, env_rng).state;
  }
  if (success) *success = state.solved;
  return state.accumulated_reward + penalties;
}

// ------------------------------------------------------------------ seeds --

std::uint64_t train_env_seed(const TrainConfig& cfg, int step, int prompt) {
  return RngStream(cfg.seed)
      .derive(kStreamEnvGen)
      .derive({static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(prompt)})
      .key();
}

std::uint64_t eval_env_seed(const TrainConfig& cfg, int prompt) {
  return RngStream(cfg.seed).derive(kStreamEval).derive({0, static_cast<std::uint64_t>(prompt)}).key();
}

// ----------------------------------------------------------------- warmup --

double format_validity(const TrainConfig& cfg, const PolicyParams& params, int prompts, int threads) {
  const RngStream root = RngStream(cfg.seed).derive(kStreamWarmup).derive(2);
  std::vector<int> ok(static_cast<std::size_t>(prompts), 0);
  parallel_for(ok.size(), threads, [&](std::size_t i) {
    const auto state = reset(cfg.env, root.derive({0, i}).key());
    Decoder dec(params);
    dec.feed(env_token(cfg.env.kind));
    dec.feed(state_prompt_tokens(render_state(state)));
    RngStream rng = root.derive({1, i});
    const auto s = sample_response(dec, nullptr, cfg.rollout_temperature, rng, cfg.max_response_tokens);
    const auto parsed = parse_actions(s.response, cfg.env.kind);
    ok[i] = !format_violation(s.response, parsed) && !parsed.actions.empty();
  });
  return static_cast<double>(std::accumulate(ok.begin(), ok.end(), 0)) / static_cast<double>(prompts);
}

namespace {

// Mean negative log-likelihood of the response tokens.
GradResult nll_grad(const PolicyParams& params, const std::vector<ContextLayout>& layouts, int threads) {
  std::size_t n = 0;
  std::vector<TokenSeq> seqs;
  for (const auto& l : layouts) {
    n += l.response_positions.size();
    seqs.push_back(l.tokens);
  }
  const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
  const LossClosure closure = [&](std::span<const ForwardOutput> outs, std::span<OutputAdjoint> adj) {
    double loss = 0.0;
    std::vector<double> lp;
    for (std::size_t b = 0; b < outs.size(); ++b) {
      const auto& lg = outs[b].logits;
      adj[b].dlogits = Mat::Zero(lg.rows(), lg.cols());
      lp.resize(static_cast<std::size_t>(lg.cols()));
      for (std::size_t pos : layouts[b].response_positions) {
        const auto row = static_cast<Eigen::Index>(pos - 1);
        log_softmax(std::span<const double>(lg.row(row).data(), lp.size()), lp);
        const auto y = static_cast<std::size_t>(layouts[b].tokens[pos]);
        loss -= lp[y] * inv;
        for (std::size_t v = 0; v < lp.size(); ++v) adj[b].dlogits(row, static_cast<Eigen::Index>(v)) += std::exp(lp[v]) * inv;
        adj[b].dlogits(row, static_cast<Eigen::Index>(y)) -= inv;
      }
    }
    return loss;
  };
  return grad(params, seqs, closure, threads);
}

}  // namespace

WarmupReport warmup(const TrainConfig& cfg, PolicyParams& params, int threads, std::ostream* log) {
  WarmupReport rep;
  const auto& w = cfg.warmup;
  if (w.max_steps == 0) {
    rep.validity = format_validity(cfg, params, w.check_prompts, threads);
    rep.reached = rep.validity >= w.target_validity;
    return rep;
  }
  const RngStream root = RngStream(cfg.seed).derive(kStreamWarmup).derive(1);
  AdamConfig acfg = cfg.adam;
  acfg.actor_lr = w.lr;
  AdamState st;
  for (int s = 1; s <= w.max_steps; ++s) {
    std::vector<ContextLayout> layouts(static_cast<std::size_t>(w.batch));
    parallel_for(layouts.size(), threads, [&](std::size_t b) {
      const RngStream r = root.derive({static_cast<std::uint64_t>(s), b});
      auto tr = scripted_episode(cfg.env, r.derive(0).key(), r.derive(1).key(), r.derive(2), w.think_min, w.think_max,
                                 cfg.format_penalty);
      // Drop turns that would overflow the context window.
      while (!tr.turns.empty()) {
        auto layout = context_layout(tr);
        if (layout.tokens.size() <= static_cast<std::size_t>(params.arch.context_window)) {
          layouts[b] = std::move(layout);
          break;
        }
        tr.turns.pop_back();
      }
    });
    auto g = nll_grad(params, layouts, threads);
    adam_step(params, g.grad, st, acfg);
    rep.steps = s;
    if (s % w.check_every == 0 || s == w.max_steps) {
      rep.validity = format_validity(cfg, params, w.check_prompts, threads);
      logf(log, "warmup step ", s, " nll ", g.loss, " format validity ", rep.validity);
      if (rep.validity >= w.target_validity) {
        rep.reached = true;
        break;
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------- rollouts --

std::vector<TrajectoryGroup> collect_rollouts(const TrainConfig& cfg, const PolicyParams& policy,
                                              const PolicyParams& reference, int step, int threads) {
  const auto P = static_cast<std::size_t>(cfg.prompts_per_step);
  const auto G = static_cast<std::size_t>(cfg.rollouts_per_prompt);
  const RngStream root = RngStream(cfg.seed).derive(kStreamRollout);
  RolloutPolicy rp{&policy, &reference, cfg.rollout_temperature, cfg.max_response_tokens, cfg.format_penalty};
  std::vector<Trajectory> all(P * G);
  parallel_for(all.size(), threads, [&](std::size_t i) {
    const std::size_t p = i / G, g = i % G;
    const RngStream r = root.derive({static_cast<std::uint64_t>(step), p, g});
    auto tr = run_episode(cfg.env, train_env_seed(cfg, step, static_cast<int>(p)), r.derive(1).key(), r.derive(0), rp);
    tr.prompt_id = static_cast<std::int64_t>((static_cast<std::size_t>(step) - 1) * P + p);
    tr.group_id = tr.prompt_id;
    all[i] = std::move(tr);
  });
  std::vector<TrajectoryGroup> groups;
  groups.reserve(P);
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<Trajectory> members(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(p * G)),
                                    std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>((p + 1) * G)));
    const auto id = members.front().prompt_id;
    groups.push_back(make_group(id, std::move(members)));
  }
  return groups;
}

std::vector<TrajectoryGroup> filter_groups(std::vector<TrajectoryGroup> groups, double ratio) {
  if (ratio >= 1.0) return groups;
  if (ratio <= 0.0) throw ConfigError("filter ratio must be positive");
  const auto keep = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(groups.size()) - 1e-9));
  std::stable_sort(groups.begin(), groups.end(), [](const TrajectoryGroup& a, const TrajectoryGroup& b) {
    if (a.sigma_g != b.sigma_g) return a.sigma_g > b.sigma_g;
    return a.prompt_id < b.prompt_id;
  });
  groups.resize(std::min(keep, groups.size()));
  return groups;
}

// ------------------------------------------------------------------ update --

TrainerState TrainerState::create(const TrainConfig& cfg, int threads, std::ostream* log) {
  cfg.validate();
  TrainerState st;
  st.cfg = cfg;
  st.theta = PolicyParams::init(cfg.arch, RngStream(cfg.seed).derive(kStreamInit));
  st.warmup = actfocus::warmup(cfg, st.theta, threads, log);
  st.reference = freeze_reference(st.theta);
  return st;
}

StepMetrics train_step(TrainerState& state, int threads, const StepHooks& hooks) {
  const auto& cfg = state.cfg;
  StepMetrics m;
  m.step = ++state.step;

  auto groups = collect_rollouts(cfg, state.theta, state.reference, m.step, threads);
  {
    std::size_t n = 0, tokens = 0, actions = 0, solved = 0;
    double reward = 0.0;
    for (const auto& g : groups)
      for (const auto& t : g.members) {
        ++n;
        reward += t.reward;
        solved += t.success ? 1 : 0;
        for (auto l : t.labels()) {
          ++tokens;
          if (l == SpanLabel::Action) ++actions;
        }
        if (hooks.rollouts) hooks.rollouts->push_back(t);
      }
    m.success_rate = static_cast<double>(solved) / static_cast<double>(n);
    m.mean_reward = reward / static_cast<double>(n);
    m.mean_response_len = static_cast<double>(tokens) / static_cast<double>(n);
    m.action_token_fraction = tokens ? static_cast<double>(actions) / static_cast<double>(tokens) : 0.0;
  }

  const auto kept = filter_groups(std::move(groups), cfg.effective_filter_ratio());
  m.groups_kept = static_cast<int>(kept.size());

  // Per-trajectory advantages and value targets.
  std::vector<const Trajectory*> trajs;
  std::vector<std::vector<double>> advantages, targets;
  const bool ppo = cfg.algo == Algorithm::PPO;
  for (const auto& g : kept) {
    std::optional<GroupAdvantage> ga;
    if (!ppo) {
      ga = grpo_advantage(g);
      if (ga->degenerate) ++m.degenerate_groups;
    }
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      const auto& t = g.members[i];
      const std::size_t T = t.token_count();
      trajs.push_back(&t);
      if (ppo) {
        std::vector<double> v = t.values_old;
        v.resize(T, 0.0);
        v.push_back(0.0);
        auto r = gae(v, T, t.reward, cfg.gamma, cfg.lambda);
        advantages.push_back(std::move(r.advantages));
        targets.push_back(cfg.arch.value_head ? std::move(r.targets) : std::vector<double>{});
      } else {
        advantages.emplace_back(T, ga->per_member[i]);
        targets.emplace_back();
      }
    }
  }

  if (ppo && cfg.whiten_advantages) whiten(advantages);

  ObjectiveConfig ocfg = cfg.objective;
  ocfg.train_value = ppo && cfg.arch.value_head;
  const PolicyParams theta_before = state.theta;
  const AdamState adam_before = state.adam;
  bool nonfinite = false;
  std::string failure;
  LossBreakdown sum;

  std::vector<std::size_t> order(trajs.size());
  const auto E = static_cast<std::size_t>(cfg.mini_batch);
  for (int epoch = 0; epoch < cfg.ppo_epochs && !nonfinite; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle_rng =
        RngStream(cfg.seed).derive(kStreamShuffle).derive({static_cast<std::uint64_t>(m.step), static_cast<std::uint64_t>(epoch)});
    shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size() && !nonfinite; start += E) {
      const std::size_t end = std::min(order.size(), start + E);
      std::vector<const Trajectory*> view;
      for (std::size_t k = start; k < end; ++k) view.push_back(trajs[order[k]]);
      const auto credit = cfg.weighting == Weighting::Uniform ? uniform_weights(view)
                                                              : assign_weights(view, cfg.alpha, cfg.beta, cfg.signal);
      if (cfg.weighting == Weighting::ActFocus && !credit.modulated) ++m.zero_action_batches;
      std::vector<UpdateItem> items;
      std::vector<std::vector<double>> batch_adv;
      for (std::size_t k = 0; k < view.size(); ++k) {
        std::vector<double> w;
        for (const auto& tc : credit.tokens[k]) w.push_back(tc.weight);
        const std::size_t idx = order[start + k];
        items.push_back(make_update_item(*view[k], std::move(w), advantages[idx], targets[idx]));
        batch_adv.push_back(advantages[idx]);
      }
      if (hooks.credit_csv && m.minibatches == 0) write_credit_csv(*hooks.credit_csv, view, credit, cfg.signal, &batch_adv);

      LossAndGrad lg;
      try {
        lg = loss_and_grad(state.theta, items, ocfg, threads);
      } catch (const NumericalError& e) {
        nonfinite = true;
        failure = e.parameter();
        break;
      }
      if (!std::isfinite(lg.parts.total)) {
        nonfinite = true;
        failure = "loss";
        break;
      }
      if (m.minibatches == 0) m.max_ratio_deviation = lg.parts.max_ratio_deviation;
      if (!adam_step(state.theta, lg.grad, state.adam, cfg.adam)) {
        nonfinite = true;
        failure = "gradient";
        break;
      }
      ++m.minibatches;
      sum.total += lg.parts.total;
      sum.surrogate += lg.parts.surrogate;
      sum.value += lg.parts.value;
      sum.kl += lg.parts.kl;
      sum.entropy += lg.parts.entropy;
      sum.sum_weights += lg.parts.sum_weights;
    }
  }

  if (nonfinite) {
    state.theta = theta_before;
    state.adam = adam_before;
    m.skipped = true;
    ++state.total_skips;
    const double nan = std::nan("");
    m.loss_total = m.loss_surrogate = m.loss_value = m.mean_kl = m.mean_entropy = m.sum_weights = nan;
    if (++state.consecutive_skips >= 3)
      throw NumericalError("three consecutive non-finite steps ending at step " + std::to_string(m.step), failure);
    return m;
  }
  state.consecutive_skips = 0;
  const double k = m.minibatches ? static_cast<double>(m.minibatches) : 1.0;
  m.loss_total = sum.total / k;
  m.loss_surrogate = sum.surrogate / k;
  m.loss_value = sum.value / k;
  m.mean_kl = sum.kl / k;
  m.mean_entropy = sum.entropy / k;
  m.sum_weights = sum.sum_weights / k;
  return m;
}

// -------------------------------------------------------------- evaluation --

namespace {

template <class Episode>
EvalMetrics run_eval_set(const TrainConfig& cfg, int step, int threads, int episodes, Episode&& play) {
  const int n = episodes > 0 ? episodes : cfg.eval_prompts * cfg.eval_rollouts;
  std::vector<Trajectory> out(static_cast<std::size_t>(n));
  const RngStream root = RngStream(cfg.seed).derive(kStreamEval).derive(1);
  parallel_for(out.size(), threads, [&](std::size_t i) {
    const int prompt = static_cast<int>(i % static_cast<std::size_t>(cfg.eval_prompts));
    const auto rollout = i / static_cast<std::size_t>(cfg.eval_prompts);
    const RngStream r = root.derive({static_cast<std::uint64_t>(prompt), rollout});
    out[i] = play(eval_env_seed(cfg, prompt), r.derive(1).key(), r.derive(0));
  });
  EvalMetrics e;
  e.step = step;
  e.episodes = n;
  std::size_t turns = 0, violations = 0, solved = 0;
  for (const auto& t : out) {
    solved += t.success ? 1 : 0;
    e.mean_reward += t.reward;
    turns += t.turns.size();
    violations += static_cast<std::size_t>(t.format_violations);
  }
  e.success_rate = static_cast<double>(solved) / n;
  e.mean_reward /= n;
  e.format_validity = turns ? 1.0 - static_cast<double>(violations) / static_cast<double>(turns) : 0.0;
  return e;
}

}  // namespace

EvalMetrics evaluate(const TrainConfig& cfg, const PolicyParams& params, int step, int threads, int episodes) {
  const RolloutPolicy rp{&params, nullptr, cfg.eval_temperature, cfg.max_response_tokens, cfg.format_penalty};
  return run_eval_set(cfg, step, threads, episodes, [&](std::uint64_t env_seed, std::uint64_t key, RngStream r) {
    return run_episode(cfg.env, env_seed, key, r, rp);
  });
}

EvalMetrics random_agent_baseline(const TrainConfig& cfg, int threads, int episodes) {
  return run_eval_set(cfg, 0, threads, episodes, [&](std::uint64_t env_seed, std::uint64_t key, RngStream r) {
    return scripted_episode(cfg.env, env_seed, key, r, cfg.warmup.think_min, cfg.warmup.think_max, cfg.format_penalty);
  });
}

// ------------------------------------------------------------------- runs --

std::string metrics_header() {
  return "step,env,algo,weighting,signal,alpha,beta,success_rate,mean_reward,mean_response_len,"
         "action_token_fraction,mean_kl,mean_entropy,loss_total,loss_surrogate,loss_value,sum_weights";
}

std::string metrics_row(const TrainConfig& cfg, const StepMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << m.step << ',' << to_string(cfg.env.kind) << ',' << to_string(cfg.algo) << ',' << to_string(cfg.weighting) << ','
     << to_string(cfg.signal) << ',' << cfg.alpha << ',' << cfg.beta << ',' << m.success_rate << ',' << m.mean_reward
     << ',' << m.mean_response_len << ',' << m.action_token_fraction << ',' << m.mean_kl << ',' << m.mean_entropy << ','
     << m.loss_total << ',' << m.loss_surrogate << ',' << m.loss_value << ',' << m.sum_weights;
  return os.str();
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw Error("cannot open '" + p.string() + "' for writing");
  f << std::setprecision(10);
  return f;
}

void eval_row(std::ostream& os, const EvalMetrics& e) {
  os << e.step << ',' << e.success_rate << ',' << e.mean_reward << ',' << e.format_validity << ',' << e.episodes << '\n';
  os.flush();
}

}  // namespace

RunSummary train(const TrainConfig& cfg, const std::filesystem::path& out, int threads, std::ostream* log,
                 const EvalCallback& on_eval) {
  cfg.validate();
  std::filesystem::create_directories(out);
  {
    auto f = open_out(out / "effective_config");
    f << serialize_config(cfg);
  }
  RunSummary summary;
  TrainerState st = TrainerState::create(cfg, threads, log);
  summary.warmup = st.warmup;
  logf(log, "warmup finished after ", st.warmup.steps, " steps, format validity ", st.warmup.validity);
  save_checkpoint(out / "checkpoint_0.bin", st.theta);

  auto metrics = open_out(out / "metrics.csv");
  metrics << metrics_header() << '\n';
  auto evals = open_out(out / "eval.csv");
  evals << "step,success_rate,mean_reward,format_validity,episodes\n";
  std::optional<std::ofstream> traj_log;
  if (cfg.trajectory_log_every > 0) traj_log.emplace(open_out(out / "trajectories.jsonl"));

  auto e0 = evaluate(cfg, st.theta, 0, threads);
  eval_row(evals, e0);
  summary.evals.push_back(e0);
  summary.final_eval = e0;
  logf(log, "step 0 eval success ", e0.success_rate);

  for (int s = 1; s <= cfg.total_steps; ++s) {
    std::vector<Trajectory> rollouts;
    std::optional<std::ofstream> credit;
    StepHooks hooks;
    const bool log_traj = traj_log && s % cfg.trajectory_log_every == 0;
    if (log_traj) hooks.rollouts = &rollouts;
    if (cfg.credit_dump) {
      credit.emplace(open_out(out / ("credit_" + std::to_string(s) + ".csv")));
      hooks.credit_csv = &*credit;
    }
    const auto m = train_step(st, threads, hooks);
    metrics << metrics_row(cfg, m) << '\n';
    metrics.flush();
    if (log_traj) write_jsonl(*traj_log, rollouts);
    summary.steps_run = s;
    if (m.skipped) logf(log, "step ", s, " skipped (non-finite loss)");

    if (s % cfg.eval_every == 0 || s == cfg.total_steps) {
      const auto e = evaluate(cfg, st.theta, s, threads);
      eval_row(evals, e);
      summary.evals.push_back(e);
      summary.final_eval = e;
      save_checkpoint(out / ("checkpoint_" + std::to_string(s) + ".bin"), st.theta);
      logf(log, "step ", s, " train success ", m.success_rate, " eval success ", e.success_rate, " reward ",
           e.mean_reward, " validity ", e.format_validity);
      if (cfg.stop_at_success > 0.0 && e.success_rate >= cfg.stop_at_success) break;
      if (on_eval && !on_eval(e)) break;
    }
  }
  return summary;
}

std::vector<SweepCell> sweep(const TrainConfig& base, const SweepGrid& grid, const std::filesystem::path& out,
                             int threads, std::ostream* log) {
  std::filesystem::create_directories(out);
  std::vector<SweepCell> cells;
  for (std::size_t k = 0; k < grid.cell_count(); ++k) {
    SweepCell c;
    c.index = k;
    c.settings = grid.cell(k);
    c.cfg = base;
    try {
      for (const auto& [key, value] : c.settings) set_config_value(c.cfg, key, value);
      logf(log, "sweep cell ", k, " of ", grid.cell_count());
      c.summary = train(c.cfg, out / ("cell_" + std::to_string(k)), threads, log);
      c.ok = true;
    } catch (const std::exception& e) {
      c.error = e.what();
      logf(log, "sweep cell ", k, " failed: ", c.error);
    }
    cells.push_back(std::move(c));
  }

  auto csv_text = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  auto summary = open_out(out / "summary.csv");
  summary << "cell,settings,env,algo,weighting,signal,alpha,beta,seed,status,steps,final_success_rate,final_mean_reward,"
             "error\n";
  for (const auto& c : cells) {
    std::string settings;
    for (const auto& [k, v] : c.settings) settings += (settings.empty() ? "" : ";") + k + "=" + v;
    summary << c.index << ',' << settings << ',' << to_string(c.cfg.env.kind) << ',' << to_string(c.cfg.algo) << ','
            << to_string(c.cfg.weighting) << ',' << to_string(c.cfg.signal) << ',' << c.cfg.alpha << ',' << c.cfg.beta
            << ',' << c.cfg.seed << ',' << (c.ok ? "ok" : "failed") << ',' << c.summary.steps_run << ','
            << c.summary.final_eval.success_rate << ',' << c.summary.final_eval.mean_reward << ',' << csv_text(c.error)
            << '\n';
  }

  // Pair uniform and actfocus cells that agree on every other axis.
  auto is_weighting_axis = [](const std::string& k) {
    return k == "weighting" || k == "run.weighting" || k == "alpha" || k == "run.alpha" || k == "beta" ||
           k == "run.beta";
  };
  auto others = [&](const SweepCell& c) {
    std::vector<std::pair<std::string, std::string>> o;
    for (const auto& kv : c.settings)
      if (!is_weighting_axis(kv.first)) o.push_back(kv);
    return o;
  };
  std::vector<std::pair<const SweepCell*, const SweepCell*>> pairs;
  for (const auto& a : cells) {
    if (!a.ok || a.cfg.weighting != Weighting::ActFocus) continue;
    for (const auto& u : cells)
      if (u.ok && u.cfg.weighting == Weighting::Uniform && others(u) == others(a)) {
        pairs.emplace_back(&u, &a);
        break;
      }
  }
  if (!pairs.empty()) {
    auto cmp = open_out(out / "comparison.csv");
    cmp << "uniform_cell,actfocus_cell,seed,uniform_success,actfocus_success,delta,actfocus_ge_uniform\n";
    int ge = 0;
    double mean_delta = 0.0;
    for (const auto& [u, a] : pairs) {
      const double d = a->summary.final_eval.success_rate - u->summary.final_eval.success_rate;
      ge += d >= 0.0;
      mean_delta += d;
      cmp << u->index << ',' << a->index << ',' << a->cfg.seed << ',' << u->summary.final_eval.success_rate << ','
          << a->summary.final_eval.success_rate << ',' << d << ',' << (d >= 0.0 ? "yes" : "no") << '\n';
    }
    mean_delta /= static_cast<double>(pairs.size());
    logf(log, "actfocus >= uniform on ", ge, " of ", pairs.size(), " matched pairs, mean success delta ", mean_delta);
  }
  return cells;
}

ReplayReport replay_check(std::span<const Trajectory> trajs, double tolerance) {
  ReplayReport rep;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    ++rep.checked;
    try {
      bool solved = false;
      const double r = replay_episode(trajs[i], &solved);
      const double err = std::abs(r - trajs[i].reward);
      rep.max_abs_error = std::max(rep.max_abs_error, err);
      if (!(err <= tolerance) || solved != trajs[i].success) {
        ++rep.mismatched;
        std::ostringstream os;
        os << std::setprecision(17) << "trajectory " << i << ": logged reward " << trajs[i].reward << ", replayed " << r;
        rep.problems.push_back(os.str());
      }
    } catch (const Error& e) {
      ++rep.mismatched;
      rep.problems.push_back("trajectory " + std::to_string(i) + ": " + e.what());
    }
  }
  return rep;
}

}  // namespace actfocus
