#pragma once

#include <iosfwd>

namespace actfocus {

/// Command-line entry point. Returns 0 on success, 1 on a usage error and 2
/// on a runtime error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace actfocus
