#pragma once

#include <iosfwd>

namespace xar {

// Runs the built-in invariant checks, printing one line per check.
// Returns true when every check passed.
bool run_selftest(std::ostream& out);

}  // namespace xar
