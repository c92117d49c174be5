#pragma once

#include <iosfwd>

namespace groklab {

/// Entry point of the `groklab` command. Returns 0 on success, 1 for bad
/// input (usage, configs, missing files) and 2 for runtime failures.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace groklab
