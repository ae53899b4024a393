#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "actfocus/checkpoint.hpp"
#include "actfocus/errors.hpp"
#include "actfocus/trainer.hpp"
#include "actfocus/trajectory_io.hpp"
#include "fixtures.hpp"

using namespace actfocus;

namespace {

TrainConfig tiny_config(EnvKind kind = EnvKind::FrozenLake) {
  TrainConfig c;
  c.env = EnvSpec::defaults(kind);
  if (kind == EnvKind::FrozenLake) {
    c.env.size = 3;
    c.env.slippery = false;
  }
  c.arch = fixtures::small_arch();
  c.prompts_per_step = 2;
  c.rollouts_per_prompt = 4;
  c.filter_ratio = 1.0;
  c.mini_batch = 4;
  c.total_steps = 2;
  c.eval_every = 1;
  c.eval_prompts = 2;
  c.eval_rollouts = 2;
  c.trajectory_log_every = 1;
  c.warmup.max_steps = 2;
  c.warmup.batch = 2;
  c.warmup.check_every = 1;
  c.warmup.check_prompts = 4;
  return c;
}

TrajectoryGroup group_with_rewards(std::int64_t id, std::vector<double> rewards) {
  std::vector<Trajectory> m;
  for (double r : rewards) {
    Trajectory t;
    t.prompt_id = id;
    t.reward = r;
    m.push_back(t);
  }
  return make_group(id, std::move(m));
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("filter_groups keeps the highest-variance groups") {
  std::vector<TrajectoryGroup> groups;
  const double spreads[] = {0.5, 2.0, 0.0, 1.0, 2.0, 0.1, 3.0, 1.0};
  for (int p = 0; p < 8; ++p) groups.push_back(group_with_rewards(p, {0.0, spreads[p]}));

  SUBCASE("ratio 1 is the identity") {
    const auto kept = filter_groups(groups, 1.0);
    REQUIRE(kept.size() == 8);
    for (int p = 0; p < 8; ++p) CHECK(kept[p].prompt_id == p);
  }
  SUBCASE("ratio 0.25 keeps two, ties broken by lower prompt id") {
    const auto kept = filter_groups(groups, 0.25);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].prompt_id == 6);
    CHECK(kept[1].prompt_id == 1);
  }
  SUBCASE("monotone split on random inputs") {
    RngStream rng(8);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<TrajectoryGroup> gs;
      const int P = 2 + static_cast<int>(rng.below(12));
      for (int p = 0; p < P; ++p)
        gs.push_back(group_with_rewards(p, {0.0, static_cast<double>(rng.below(4)), static_cast<double>(rng.below(4))}));
      const double ratio = 0.05 + 0.9 * rng.uniform();
      const auto kept = filter_groups(gs, ratio);
      CHECK(kept.size() == static_cast<std::size_t>(std::ceil(ratio * P - 1e-9)));
      std::set<std::int64_t> ids;
      double min_kept = 1e300;
      for (const auto& g : kept) {
        ids.insert(g.prompt_id);
        min_kept = std::min(min_kept, g.sigma_g);
      }
      for (const auto& g : gs)
        if (!ids.count(g.prompt_id)) CHECK(g.sigma_g <= min_kept);
    }
  }
}

TEST_CASE("training and evaluation prompts are disjoint") {
  const auto cfg = tiny_config();
  std::set<std::uint64_t> train;
  for (int s = 1; s <= 200; ++s)
    for (int p = 0; p < 8; ++p) train.insert(train_env_seed(cfg, s, p));
  CHECK(train.size() == 1600);
  for (int p = 0; p < 32; ++p) CHECK_FALSE(train.count(eval_env_seed(cfg, p)));
}

TEST_CASE("sampled episodes carry consistent caches and replay exactly") {
  const auto arch = fixtures::small_arch();
  const auto policy = fixtures::noisy_params(arch, 4, 0.5);
  const auto ref = fixtures::noisy_params(arch, 5, 0.5);
  for (auto kind : {EnvKind::Sokoban, EnvKind::FrozenLake, EnvKind::Sudoku}) {
    auto spec = EnvSpec::defaults(kind);
    const RolloutPolicy rp{&policy, &ref, 1.0, 24, -0.1};
    int violations = 0;
    for (std::uint64_t i = 0; i < 6; ++i) {
      const auto t = run_episode(spec, 100 + i, 200 + i, RngStream(300 + i), rp);
      t.validate();
      violations += t.format_violations;
      const auto lv = logprob_and_value(policy, t);
      CHECK(max_abs_diff(lv.logp, t.logp_old) < 1e-10);
      CHECK(max_abs_diff(lv.value, t.values_old) < 1e-10);
      CHECK(max_abs_diff(logprob_and_value(ref, t).logp, t.logp_ref) < 1e-10);
      bool solved = false;
      CHECK(replay_episode(t, &solved) == t.reward);
      CHECK(solved == t.success);
    }
    // A noisy untrained policy is mostly malformed, so penalties are exercised.
    CHECK(violations > 0);
  }
}

TEST_CASE("scripted episodes are well formed and replayable") {
  for (auto kind : {EnvKind::Sokoban, EnvKind::FrozenLake, EnvKind::Sudoku}) {
    const auto spec = EnvSpec::defaults(kind);
    for (std::uint64_t i = 0; i < 20; ++i) {
      const auto t = scripted_episode(spec, i, i + 1, RngStream(i + 2), 3, 8, -0.1);
      CHECK(t.format_violations == 0);
      for (const auto& turn : t.turns) CHECK(turn.response.well_formed);
      CHECK(replay_episode(t) == t.reward);
    }
  }
}

TEST_CASE("replay_check reports tampered logs") {
  const auto spec = EnvSpec::defaults(EnvKind::Sokoban);
  std::vector<Trajectory> trajs;
  for (std::uint64_t i = 0; i < 5; ++i) trajs.push_back(scripted_episode(spec, i, i, RngStream(i), 3, 5, -0.1));
  CHECK(replay_check(trajs).mismatched == 0);
  trajs[1].reward += 1e-6;
  trajs[3].turns[0].state_text = "tampered";
  const auto rep = replay_check(trajs);
  CHECK(rep.checked == 5);
  CHECK(rep.mismatched == 2);
  CHECK(rep.problems.size() == 2);
}

TEST_CASE("train_step is reproducible and independent of the thread count") {
  const auto cfg = tiny_config();
  auto a = TrainerState::create(cfg, 1);
  auto b = TrainerState::create(cfg, 2);
  CHECK(a.theta.values == b.theta.values);
  for (int s = 0; s < 2; ++s) {
    const auto ma = train_step(a, 1);
    const auto mb = train_step(b, 2);
    CHECK(metrics_row(cfg, ma) == metrics_row(cfg, mb));
  }
  CHECK(a.theta.values == b.theta.values);
  CHECK(a.reference.values == b.reference.values);
}

TEST_CASE("first mini-batch after a refresh is on-policy") {
  auto cfg = tiny_config(EnvKind::Sokoban);
  cfg.ppo_epochs = 2;
  auto st = TrainerState::create(cfg, 1);
  for (int s = 0; s < 2; ++s) {
    const auto m = train_step(st, 1);
    CHECK(m.max_ratio_deviation < 1e-10);
    CHECK(m.minibatches == 4);
  }
}

TEST_CASE("uniform weighting equals ActFocus with alpha 1 and beta 0") {
  for (auto algo : {Algorithm::PPO, Algorithm::GRPO}) {
    auto u = tiny_config(EnvKind::Sokoban);
    u.algo = algo;
    u.weighting = Weighting::Uniform;
    auto f = u;
    f.weighting = Weighting::ActFocus;
    f.alpha = 1.0;
    f.beta = 0.0;
    auto su = TrainerState::create(u, 1);
    auto sf = TrainerState::create(f, 1);
    for (int s = 0; s < 2; ++s) {
      train_step(su, 1);
      train_step(sf, 1);
    }
    CHECK(max_abs_diff(su.theta.values, sf.theta.values) < 1e-10);
  }
}

TEST_CASE("GRPO advantages are constant within a trajectory in the credit dump") {
  auto cfg = tiny_config(EnvKind::Sokoban);
  cfg.algo = Algorithm::GRPO;
  auto st = TrainerState::create(cfg, 1);
  std::ostringstream dump;
  StepHooks hooks;
  hooks.credit_csv = &dump;
  train_step(st, 1, hooks);
  std::istringstream in(dump.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "traj_id,pos,label,signal_kind,s_t,s_tilde,w_t,advantage");
  std::map<std::string, std::set<std::string>> adv;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const auto traj = line.substr(0, line.find(','));
    adv[traj].insert(line.substr(line.rfind(',') + 1));
  }
  CHECK(rows > 0);
  for (const auto& [traj, values] : adv) CHECK(values.size() == 1);
}

TEST_CASE("non-finite losses skip the step and the third in a row aborts") {
  auto st = TrainerState::create(tiny_config(), 1);
  const auto before = st.theta.values;
  st.cfg.objective.kl_coef = std::numeric_limits<double>::infinity();
  int skipped = 0;
  CHECK_THROWS_AS(
      [&] {
        for (int s = 0; s < 3; ++s) {
          const auto m = train_step(st, 1);
          skipped += m.skipped;
          CHECK(st.theta.values == before);
        }
      }(),
      NumericalError);
  CHECK(skipped == 2);
  CHECK(st.total_skips == 3);
  CHECK(st.theta.values == before);
}

TEST_CASE("train writes the run directory") {
  const auto dir = std::filesystem::temp_directory_path() / "actfocus_train_test";
  std::filesystem::remove_all(dir);
  auto cfg = tiny_config();
  cfg.total_steps = 3;
  cfg.eval_every = 2;
  cfg.credit_dump = true;
  const auto summary = train(cfg, dir, 1);
  CHECK(summary.steps_run == 3);
  for (const char* f : {"effective_config", "metrics.csv", "eval.csv", "trajectories.jsonl", "checkpoint_0.bin",
                        "checkpoint_2.bin", "checkpoint_3.bin", "credit_1.csv"})
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);

  std::ifstream metrics(dir / "metrics.csv");
  std::string line;
  std::getline(metrics, line);
  CHECK(line ==
        "step,env,algo,weighting,signal,alpha,beta,success_rate,mean_reward,mean_response_len,"
        "action_token_fraction,mean_kl,mean_entropy,loss_total,loss_surrogate,loss_value,sum_weights");
  int rows = 0;
  while (std::getline(metrics, line)) ++rows;
  CHECK(rows == 3);

  CHECK(load_config(dir / "effective_config") == cfg);
  const auto log = read_jsonl_file((dir / "trajectories.jsonl").string());
  CHECK(log.warnings.empty());
  CHECK(log.trajectories.size() == 3 * 8);
  CHECK(replay_check(log.trajectories).mismatched == 0);
  CHECK(load_checkpoint(dir / "checkpoint_3.bin").arch == cfg.arch);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep records failures and continues") {
  const auto dir = std::filesystem::temp_directory_path() / "actfocus_sweep_test";
  std::filesystem::remove_all(dir);
  auto base = tiny_config();
  base.total_steps = 1;
  base.trajectory_log_every = 0;

  SUBCASE("empty grid") {
    const auto cells = sweep(base, SweepGrid{}, dir, 1);
    CHECK(cells.empty());
    std::ifstream s(dir / "summary.csv");
    std::string header, row;
    std::getline(s, header);
    CHECK_FALSE(std::getline(s, row));
  }
  SUBCASE("failing cell") {
    const auto grid = parse_grid("[grid]\nweighting = uniform, actfocus\nalpha = 0.1, 2.0\n");
    const auto cells = sweep(base, grid, dir, 1);
    REQUIRE(cells.size() == 4);
    CHECK(cells[0].ok);
    CHECK_FALSE(cells[1].ok);
    CHECK(cells[2].ok);
    CHECK_FALSE(cells[3].ok);
    CHECK(std::filesystem::exists(dir / "cell_2" / "metrics.csv"));
    std::ifstream s(dir / "summary.csv");
    std::string line;
    int rows = -1;
    while (std::getline(s, line)) ++rows;
    CHECK(rows == 4);
    CHECK(std::filesystem::exists(dir / "comparison.csv"));
  }
  std::filesystem::remove_all(dir);
}
