#include "actfocus/env.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>
#include <string_view>

#include "actfocus/errors.hpp"

namespace actfocus {

// ---------------------------------------------------------------- EnvSpec --

EnvSpec EnvSpec::defaults(EnvKind kind) {
  EnvSpec s;
  s.kind = kind;
  switch (kind) {
    case EnvKind::Sokoban:
      s.size = 6;
      s.reverse_steps = 6;
      break;
    case EnvKind::FrozenLake:
      s.size = 4;
      s.slippery = true;
      break;
    case EnvKind::Sudoku:
      s.size = 4;
      s.max_turns = 8;
      s.max_actions_per_episode = 16;
      s.step_penalty = 0.0;
      break;
  }
  return s;
}

int EnvSpec::hole_count() const {
  if (holes >= 0) return holes;
  return static_cast<int>(std::lround(0.2 * size * size));
}

void EnvSpec::validate() const {
  if (max_turns <= 0 || max_actions_per_turn <= 0 || max_actions_per_episode <= 0)
    throw ConfigError("environment budgets must be positive");
  if (!std::isfinite(step_penalty) || !std::isfinite(success_reward)) throw ConfigError("rewards must be finite");
  switch (kind) {
    case EnvKind::Sokoban:
      if (size < 4 || size > 12) throw ConfigError("sokoban size must be in [4, 12]");
      if (boxes < 1 || reverse_steps < 1) throw ConfigError("sokoban needs at least one box and one reverse step");
      break;
    case EnvKind::FrozenLake:
      if (size < 2 || size > 12) throw ConfigError("frozenlake size must be in [2, 12]");
      if (hole_count() > size * size - 2) throw ConfigError("too many frozenlake holes");
      if (slip_intended < 0.0 || slip_intended > 1.0) throw ConfigError("slip_intended must be a probability");
      break;
    case EnvKind::Sudoku:
      if (size != 4) throw ConfigError("only 4x4 sudoku is supported");
      if (givens < 4 || givens > 16) throw ConfigError("sudoku givens must be in [4, 16]");
      break;
  }
}

std::string_view move_name(Move m) {
  switch (m) {
    case Move::Up: return "Up";
    case Move::Down: return "Down";
    case Move::Left: return "Left";
    case Move::Right: return "Right";
  }
  return "?";
}

namespace {

constexpr std::array<Move, 4> kMoves = {Move::Up, Move::Down, Move::Left, Move::Right};
constexpr int kMaxAttempts = 200;

void delta(Move m, int& dr, int& dc) {
  dr = m == Move::Up ? -1 : m == Move::Down ? 1 : 0;
  dc = m == Move::Left ? -1 : m == Move::Right ? 1 : 0;
}

bool has_box(const SokobanBoard& b, int cell) { return std::binary_search(b.boxes.begin(), b.boxes.end(), cell); }

void move_box(SokobanBoard& b, int from, int to) {
  *std::find(b.boxes.begin(), b.boxes.end(), from) = to;
  std::sort(b.boxes.begin(), b.boxes.end());
}

int floor_component_size(const std::vector<char>& layout, int rows, int cols, int from) {
  std::vector<bool> seen(layout.size(), false);
  std::deque<int> q{from};
  seen[from] = true;
  int count = 0;
  while (!q.empty()) {
    int c = q.front();
    q.pop_front();
    ++count;
    for (Move m : kMoves) {
      int dr, dc;
      delta(m, dr, dc);
      int r = c / cols + dr, k = c % cols + dc;
      if (r < 0 || r >= rows || k < 0 || k >= cols) continue;
      int n = r * cols + k;
      if (!seen[n] && layout[n] != '#') {
        seen[n] = true;
        q.push_back(n);
      }
    }
  }
  return count;
}

// Places boxes on targets, then pulls them backwards with random player
// moves. Replaying the reversed moves solves the puzzle, so every instance is
// solvable in at most reverse_steps actions.
EnvState generate_sokoban(const EnvSpec& spec, std::uint64_t seed) {
  const int n = spec.size;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream rng = RngStream(seed).derive({hash_name("sokoban"), static_cast<std::uint64_t>(attempt)});
    SokobanBoard b;
    b.rows = b.cols = n;
    b.layout.assign(static_cast<std::size_t>(n * n), '#');
    std::vector<int> interior;
    for (int r = 1; r < n - 1; ++r)
      for (int c = 1; c < n - 1; ++c) {
        b.layout[r * n + c] = '_';
        interior.push_back(r * n + c);
      }
    const auto extra_walls = rng.below(interior.size() / 6 + 1);
    shuffle(interior.begin(), interior.end(), rng);
    for (std::size_t w = 0; w < extra_walls; ++w) b.layout[interior[w]] = '#';
    std::vector<int> floor(interior.begin() + static_cast<long>(extra_walls), interior.end());
    if (static_cast<int>(floor.size()) < spec.boxes + 2) continue;
    if (floor_component_size(b.layout, n, n, floor.front()) != static_cast<int>(floor.size())) continue;

    shuffle(floor.begin(), floor.end(), rng);
    for (int k = 0; k < spec.boxes; ++k) {
      b.layout[floor[k]] = 'O';
      b.boxes.push_back(floor[k]);
    }
    std::sort(b.boxes.begin(), b.boxes.end());
    b.player = floor[spec.boxes];

    int moves = 0;
    for (int tries = 0; moves < spec.reverse_steps && tries < spec.reverse_steps * 20; ++tries) {
      int dr, dc;
      delta(kMoves[rng.below(4)], dr, dc);
      const int next = b.player + dr * n + dc;
      if (b.layout[next] == '#' || has_box(b, next)) continue;
      const int behind = b.player - dr * n - dc;
      const bool pull = b.layout[behind] != '#' && has_box(b, behind) && rng.uniform() < 0.8;
      if (pull) move_box(b, behind, b.player);
      b.player = next;
      ++moves;
    }
    bool all_on_target = true;
    for (int box : b.boxes) all_on_target = all_on_target && b.layout[box] == 'O';
    if (all_on_target) continue;

    EnvState s;
    s.spec = spec;
    s.board = std::move(b);
    return s;
  }
  throw GenerationError("sokoban generator exhausted its retries", seed);
}

int bfs_path(const FrozenLakeBoard& b, int from, int to) {
  std::vector<int> dist(b.layout.size(), -1);
  std::deque<int> q{from};
  dist[from] = 0;
  while (!q.empty()) {
    int c = q.front();
    q.pop_front();
    if (c == to) return dist[c];
    for (Move m : kMoves) {
      int dr, dc;
      delta(m, dr, dc);
      int r = c / b.n + dr, k = c % b.n + dc;
      if (r < 0 || r >= b.n || k < 0 || k >= b.n) continue;
      int nx = r * b.n + k;
      if (dist[nx] < 0 && b.layout[nx] != 'O') {
        dist[nx] = dist[c] + 1;
        q.push_back(nx);
      }
    }
  }
  return -1;
}

EnvState generate_frozenlake(const EnvSpec& spec, std::uint64_t seed) {
  const int n = spec.size;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream rng = RngStream(seed).derive({hash_name("frozenlake"), static_cast<std::uint64_t>(attempt)});
    FrozenLakeBoard b;
    b.n = n;
    b.layout.assign(static_cast<std::size_t>(n * n), '_');
    std::vector<int> cells(static_cast<std::size_t>(n * n));
    for (int i = 0; i < n * n; ++i) cells[i] = i;
    shuffle(cells.begin(), cells.end(), rng);
    const int holes = spec.hole_count();
    for (int h = 0; h < holes; ++h) b.layout[cells[h]] = 'O';
    b.start = b.player = cells[holes];
    b.layout[cells[holes + 1]] = 'G';
    if (bfs_path(b, b.start, cells[holes + 1]) < 0) continue;
    EnvState s;
    s.spec = spec;
    s.board = std::move(b);
    return s;
  }
  throw GenerationError("frozenlake generator exhausted its retries", seed);
}

bool sudoku_allows(const std::array<int, 16>& v, int cell, int value) {
  const int r = cell / 4, c = cell % 4;
  for (int k = 0; k < 4; ++k) {
    if (k != c && v[r * 4 + k] == value) return false;
    if (k != r && v[k * 4 + c] == value) return false;
  }
  const int br = r / 2 * 2, bc = c / 2 * 2;
  for (int rr = br; rr < br + 2; ++rr)
    for (int cc = bc; cc < bc + 2; ++cc)
      if (rr * 4 + cc != cell && v[rr * 4 + cc] == value) return false;
  return true;
}

bool fill_sudoku(std::array<int, 16>& v, int cell, RngStream& rng) {
  if (cell == 16) return true;
  std::array<int, 4> order = {1, 2, 3, 4};
  shuffle(order.begin(), order.end(), rng);
  for (int value : order) {
    if (!sudoku_allows(v, cell, value)) continue;
    v[cell] = value;
    if (fill_sudoku(v, cell + 1, rng)) return true;
  }
  v[cell] = 0;
  return false;
}

EnvState generate_sudoku(const EnvSpec& spec, std::uint64_t seed) {
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream rng = RngStream(seed).derive({hash_name("sudoku"), static_cast<std::uint64_t>(attempt)});
    std::array<int, 16> v{};
    if (!fill_sudoku(v, 0, rng)) continue;
    std::array<int, 16> order;
    for (int i = 0; i < 16; ++i) order[i] = i;
    shuffle(order.begin(), order.end(), rng);
    int givens = 16;
    for (int cell : order) {
      if (givens == spec.givens) break;
      const int keep = v[cell];
      v[cell] = 0;
      if (count_sudoku_solutions(v) == 1) {
        --givens;
      } else {
        v[cell] = keep;
      }
    }
    if (givens != spec.givens) continue;
    SudokuBoard b;
    b.values = v;
    for (int i = 0; i < 16; ++i) b.initial[i] = v[i] != 0;
    EnvState s;
    s.spec = spec;
    s.board = b;
    return s;
  }
  throw GenerationError("sudoku generator could not keep a unique completion", seed);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

int count_sudoku_solutions(std::array<int, 16> values, int limit) {
  int cell = 0;
  while (cell < 16 && values[cell] != 0) ++cell;
  if (cell == 16) {
    for (int i = 0; i < 16; ++i)
      if (!sudoku_allows(values, i, values[i])) return 0;
    return 1;
  }
  int count = 0;
  for (int value = 1; value <= 4 && count < limit; ++value) {
    if (!sudoku_allows(values, cell, value)) continue;
    values[cell] = value;
    count += count_sudoku_solutions(values, limit - count);
  }
  return count;
}

int frozenlake_shortest_path(const FrozenLakeBoard& board) {
  const auto goal = std::find(board.layout.begin(), board.layout.end(), 'G') - board.layout.begin();
  return bfs_path(board, board.player, static_cast<int>(goal));
}

EnvState reset(const EnvSpec& spec, std::uint64_t seed) {
  spec.validate();
  switch (spec.kind) {
    case EnvKind::Sokoban: return generate_sokoban(spec, seed);
    case EnvKind::FrozenLake: return generate_frozenlake(spec, seed);
    case EnvKind::Sudoku: return generate_sudoku(spec, seed);
  }
  throw GenerationError("unknown environment", seed);
}

bool is_solved(const EnvState& state) {
  if (const auto* b = std::get_if<SokobanBoard>(&state.board)) {
    for (int box : b->boxes)
      if (b->layout[box] != 'O') return false;
    return true;
  }
  if (const auto* b = std::get_if<FrozenLakeBoard>(&state.board)) return !b->in_hole && b->layout[b->player] == 'G';
  const auto& b = std::get<SudokuBoard>(state.board);
  for (int i = 0; i < 16; ++i)
    if (b.values[i] == 0 || !sudoku_allows(b.values, i, b.values[i])) return false;
  return true;
}

EnvState state_from_rows(const EnvSpec& spec, const std::vector<std::string>& rows) {
  const auto& v = vocab();
  EnvState s;
  s.spec = spec;
  std::vector<std::vector<std::string_view>> grid;
  for (const auto& row : rows) {
    std::vector<std::string_view> cells;
    for (Token t : v.tokenize(row)) {
      const auto w = v.word(t);
      if (w == "|" || w == "---") continue;
      cells.push_back(w);
    }
    if (!cells.empty()) grid.push_back(std::move(cells));
  }
  if (grid.empty()) throw FormatError("empty grid");
  const int rcount = static_cast<int>(grid.size());
  const int ccount = static_cast<int>(grid.front().size());
  for (const auto& r : grid)
    if (static_cast<int>(r.size()) != ccount) throw FormatError("ragged grid");

  switch (spec.kind) {
    case EnvKind::Sokoban: {
      SokobanBoard b;
      b.rows = rcount;
      b.cols = ccount;
      b.layout.assign(static_cast<std::size_t>(rcount * ccount), '_');
      int players = 0;
      for (int r = 0; r < rcount; ++r)
        for (int c = 0; c < ccount; ++c) {
          const auto w = grid[r][c];
          const int i = r * ccount + c;
          if (w == "#") b.layout[i] = '#';
          else if (w == "O") b.layout[i] = 'O';
          else if (w == "X") b.boxes.push_back(i);
          else if (w == "√") { b.layout[i] = 'O'; b.boxes.push_back(i); }
          else if (w == "P") { b.player = i; ++players; }
          else if (w == "S") { b.layout[i] = 'O'; b.player = i; ++players; }
          else if (w != "_") throw FormatError("unknown sokoban symbol '" + std::string(w) + "'");
        }
      if (players != 1) throw FormatError("sokoban grid needs exactly one player");
      std::sort(b.boxes.begin(), b.boxes.end());
      s.board = std::move(b);
      break;
    }
    case EnvKind::FrozenLake: {
      if (rcount != ccount) throw FormatError("frozenlake grid must be square");
      FrozenLakeBoard b;
      b.n = rcount;
      b.layout.assign(static_cast<std::size_t>(rcount * rcount), '_');
      int players = 0;
      for (int r = 0; r < rcount; ++r)
        for (int c = 0; c < ccount; ++c) {
          const auto w = grid[r][c];
          const int i = r * ccount + c;
          if (w == "O") b.layout[i] = 'O';
          else if (w == "G") b.layout[i] = 'G';
          else if (w == "P") { b.player = i; ++players; }
          else if (w == "X") { b.layout[i] = 'O'; b.player = i; b.in_hole = true; ++players; }
          else if (w == "√") { b.layout[i] = 'G'; b.player = i; ++players; }
          else if (w != "_") throw FormatError("unknown frozenlake symbol '" + std::string(w) + "'");
        }
      if (players != 1) throw FormatError("frozenlake grid needs exactly one player");
      b.start = b.player;
      s.terminated = b.in_hole;
      s.board = std::move(b);
      break;
    }
    case EnvKind::Sudoku: {
      if (rcount != 4 || ccount != 4) throw FormatError("sudoku grid must be 4x4");
      SudokuBoard b;
      for (int i = 0; i < 16; ++i) {
        const auto w = grid[i / 4][i % 4];
        if (w.size() == 3 && w.front() == '[') {
          b.values[i] = w[1] - '0';
          b.initial[i] = true;
        } else if (w.size() == 1 && w[0] >= '1' && w[0] <= '4') {
          b.values[i] = w[0] - '0';
        } else if (w != ".") {
          throw FormatError("unknown sudoku symbol '" + std::string(w) + "'");
        }
      }
      s.board = b;
      break;
    }
  }
  if (is_solved(s)) s.solved = s.terminated = true;
  return s;
}

std::string render_grid(const EnvState& state) {
  std::string out;
  if (const auto* b = std::get_if<SokobanBoard>(&state.board)) {
    for (int r = 0; r < b->rows; ++r) {
      if (r) out += '\n';
      for (int c = 0; c < b->cols; ++c) {
        const int i = r * b->cols + c;
        const bool target = b->layout[i] == 'O';
        if (i == b->player) out += target ? "S" : "P";
        else if (has_box(*b, i)) out += target ? "√" : "X";
        else out += b->layout[i];
      }
    }
  } else if (const auto* f = std::get_if<FrozenLakeBoard>(&state.board)) {
    for (int r = 0; r < f->n; ++r) {
      if (r) out += '\n';
      for (int c = 0; c < f->n; ++c) {
        const int i = r * f->n + c;
        if (i == f->player) out += f->in_hole ? "X" : f->layout[i] == 'G' ? "√" : "P";
        else out += f->layout[i];
      }
    }
  } else {
    const auto& s = std::get<SudokuBoard>(state.board);
    for (int r = 0; r < 4; ++r) {
      if (r == 2) out += "---\n";
      for (int c = 0; c < 4; ++c) {
        if (c) out += c == 2 ? " | " : " ";
        const int v = s.values[r * 4 + c];
        if (v == 0) out += ".";
        else if (s.initial[r * 4 + c]) out += "[" + std::to_string(v) + "]";
        else out += std::to_string(v);
      }
      if (r < 3) out += '\n';
    }
  }
  return out;
}

std::string render_state(const EnvState& state) {
  return render_grid(state) + "\nYou have " + std::to_string(std::max(0, state.actions_left())) + " actions left";
}

namespace {

void apply_move(EnvState& s, Move m, RngStream& rng) {
  int dr, dc;
  if (auto* b = std::get_if<SokobanBoard>(&s.board)) {
    delta(m, dr, dc);
    const int step = dr * b->cols + dc;
    const int next = b->player + step;
    if (b->layout[next] == '#') return;
    if (has_box(*b, next)) {
      const int beyond = next + step;
      if (b->layout[beyond] == '#' || has_box(*b, beyond)) return;
      move_box(*b, next, beyond);
    }
    b->player = next;
  } else if (auto* f = std::get_if<FrozenLakeBoard>(&s.board)) {
    Move actual = m;
    if (s.spec.slippery) {
      const double u = rng.uniform();
      const double side = (1.0 - s.spec.slip_intended) / 2.0;
      const bool vertical = m == Move::Up || m == Move::Down;
      if (u >= s.spec.slip_intended) {
        const bool first = u < s.spec.slip_intended + side;
        actual = vertical ? (first ? Move::Left : Move::Right) : (first ? Move::Up : Move::Down);
      }
    }
    delta(actual, dr, dc);
    const int r = f->player / f->n + dr, c = f->player % f->n + dc;
    if (r >= 0 && r < f->n && c >= 0 && c < f->n) f->player = r * f->n + c;
    if (f->layout[f->player] == 'O') {
      f->in_hole = true;
      s.terminated = true;
    }
  }
}

double apply_placement(EnvState& s, const Placement& p) {
  auto& b = std::get<SudokuBoard>(s.board);
  const bool in_range = p.row >= 1 && p.row <= 4 && p.col >= 1 && p.col <= 4 && p.value >= 1 && p.value <= 4;
  if (!in_range) return s.spec.invalid_place_reward;
  const int cell = (p.row - 1) * 4 + (p.col - 1);
  if (b.initial[cell] || !sudoku_allows(b.values, cell, p.value)) return s.spec.invalid_place_reward;
  b.values[cell] = p.value;
  return s.spec.valid_place_reward;
}

}  // namespace

StepResult apply_actions(const EnvState& state, std::span<const Action> actions, RngStream& rng) {
  StepResult r{state, 0.0, state.terminated, 0};
  if (state.terminated) return r;
  EnvState& s = r.state;
  const auto limit = std::min<std::size_t>(actions.size(), static_cast<std::size_t>(s.spec.max_actions_per_turn));
  double reward = 0.0;
  for (std::size_t i = 0; i < limit; ++i) {
    if (s.terminated || s.actions_used >= s.spec.max_actions_per_episode) break;
    const Action& a = actions[i];
    const bool is_sudoku = s.spec.kind == EnvKind::Sudoku;
    if (std::holds_alternative<Placement>(a) != is_sudoku) continue;
    ++s.actions_used;
    ++r.actions_applied;
    reward += s.spec.step_penalty;
    if (is_sudoku) reward += apply_placement(s, std::get<Placement>(a));
    else apply_move(s, std::get<Move>(a), rng);
    if (!s.terminated && is_solved(s)) {
      s.solved = true;
      s.terminated = true;
      reward += s.spec.success_reward;
    }
  }
  ++s.turn_index;
  if (s.actions_used >= s.spec.max_actions_per_episode || s.turn_index >= s.spec.max_turns) s.terminated = true;
  s.accumulated_reward += reward;
  r.turn_reward = reward;
  r.done = s.terminated;
  return r;
}

ParsedActions parse_actions(const Response& response, EnvKind kind) {
  ParsedActions out;
  if (!response.well_formed) return out;
  const auto& v = vocab();
  std::vector<std::vector<Token>> pieces(1);
  bool in_answer = false;
  for (std::size_t i = 0; i < response.tokens.size(); ++i) {
    const Token t = response.tokens[i];
    if (t == tok::kAnswerOpen) {
      in_answer = true;
      continue;
    }
    if (!in_answer || t == tok::kAnswerClose) continue;
    if (t == tok::kSeparator) pieces.emplace_back();
    else pieces.back().push_back(t);
  }
  for (const auto& piece : pieces) {
    if (piece.empty()) continue;
    if (kind == EnvKind::Sudoku) {
      const bool shape = piece.size() == 5 && v.is_digit(piece[0]) && piece[1] == tok::kComma && v.is_digit(piece[2]) &&
                         piece[3] == tok::kComma && v.is_digit(piece[4]);
      if (shape) out.actions.emplace_back(Placement{v.digit_value(piece[0]), v.digit_value(piece[2]), v.digit_value(piece[4])});
      else ++out.unknown;
      continue;
    }
    for (Token t : piece) {
      const auto w = lower(v.word(t));
      bool matched = false;
      for (Move m : kMoves) {
        if (w == lower(move_name(m))) {
          out.actions.emplace_back(m);
          matched = true;
          break;
        }
      }
      if (!matched) ++out.unknown;
    }
  }
  return out;
}

}  // namespace actfocus
