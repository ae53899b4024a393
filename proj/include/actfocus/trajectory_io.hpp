#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "actfocus/trajectory.hpp"

namespace actfocus {

// Trajectory log: one JSON object per line with fields
//   prompt_id, group_id, reward, turns:[{state, tokens:[int], labels:[int]}],
//   logp_old:[float], logp_ref:[float], ref_lse:[float]
// plus optional ref_entropy, success, format_violations and an env block
// {kind, size, slippery, ..., seed, episode} used by replay.
// Label encoding: 0=Think, 1=Action, 2=Structural.

std::string to_jsonl_line(const Trajectory& traj);

/// Throws FormatError on any schema violation.
Trajectory from_jsonl_line(const std::string& line);

void write_jsonl(std::ostream& out, const std::vector<Trajectory>& trajs);

struct JsonlReadResult {
  std::vector<Trajectory> trajectories;
  std::vector<std::string> warnings;  // one per skipped line
  std::size_t lines = 0;
};

/// Reads every line, skipping malformed ones with a warning.
JsonlReadResult read_jsonl(std::istream& in);
JsonlReadResult read_jsonl_file(const std::string& path);

}  // namespace actfocus
