#pragma once

#include <filesystem>
#include <iosfwd>

#include "actfocus/policy.hpp"

namespace actfocus {

/// Binary layout: 8-byte magic "AFCKPT01", u32 version, u64 header length,
/// JSON header {arch, role, param_count, manifest:[{name, offset, shape}]},
/// then param_count little-endian float64 values in manifest order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const PolicyParams& params);
void save_checkpoint(const std::filesystem::path& path, const PolicyParams& params);

/// Throws FormatError on a bad magic, version, header or truncated payload.
PolicyParams read_checkpoint(std::istream& in);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace actfocus
