#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "actfocus/env_spec.hpp"
#include "actfocus/rng.hpp"
#include "actfocus/trajectory.hpp"

namespace actfocus {

enum class Move { Up, Down, Left, Right };

/// Sudoku placement, 1-based row/column as written in answers ("r,c,v").
struct Placement {
  int row = 0;
  int col = 0;
  int value = 0;
  bool operator==(const Placement&) const = default;
};

using Action = std::variant<Move, Placement>;

// Static layout uses '#' wall, '_' floor, 'O' target.
struct SokobanBoard {
  int rows = 0;
  int cols = 0;
  std::vector<char> layout;
  std::vector<int> boxes;  // sorted cell indices
  int player = 0;
  bool operator==(const SokobanBoard&) const = default;
};

// Static layout uses '_' ice, 'O' hole, 'G' goal.
struct FrozenLakeBoard {
  int n = 0;
  std::vector<char> layout;
  int start = 0;
  int player = 0;
  bool in_hole = false;
  bool operator==(const FrozenLakeBoard&) const = default;
};

struct SudokuBoard {
  std::array<int, 16> values{};  // 0 = empty
  std::array<bool, 16> initial{};
  bool operator==(const SudokuBoard&) const = default;
};

struct EnvState {
  EnvSpec spec;
  std::variant<SokobanBoard, FrozenLakeBoard, SudokuBoard> board;
  int turn_index = 0;
  int actions_used = 0;
  bool terminated = false;
  bool solved = false;
  double accumulated_reward = 0.0;

  bool operator==(const EnvState&) const = default;
  int actions_left() const { return spec.max_actions_per_episode - actions_used; }
};

/// Procedurally generates a solvable instance; a pure function of
/// (spec, seed). Throws GenerationError after bounded retries.
EnvState reset(const EnvSpec& spec, std::uint64_t seed);

/// Builds a state from rendered rows (same symbols as render_state). Sudoku
/// rows use "[n]" for initial cells, digits for placed ones and "." for
/// empty, optionally with "|" separators.
EnvState state_from_rows(const EnvSpec& spec, const std::vector<std::string>& rows);

std::string render_grid(const EnvState& state);

/// Grid followed by a line with the remaining action budget.
std::string render_state(const EnvState& state);

struct StepResult {
  EnvState state;
  double turn_reward = 0.0;
  bool done = false;
  int actions_applied = 0;
};

/// Applies up to max_actions_per_turn actions (extra ones are dropped), then
/// advances the turn counter. Calling on a terminated state is a no-op.
StepResult apply_actions(const EnvState& state, std::span<const Action> actions, RngStream& rng);

struct ParsedActions {
  std::vector<Action> actions;
  int unknown = 0;  // dropped action-span pieces
};

/// Splits the answer span on "||" and maps each piece to an action of the
/// environment. Malformed responses yield no actions.
ParsedActions parse_actions(const Response& response, EnvKind kind);

bool is_solved(const EnvState& state);

// Oracles shared by generators and tests.
int count_sudoku_solutions(std::array<int, 16> values, int limit = 2);
int frozenlake_shortest_path(const FrozenLakeBoard& board);  // -1 if unreachable
std::string_view move_name(Move m);

}  // namespace actfocus
