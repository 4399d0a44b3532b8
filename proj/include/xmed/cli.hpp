#pragma once

#include <ostream>

namespace xmed {

/// Entry point for the `xmed` tool: train / eval / explain / synth.
/// Returns 0 on success, 2 on usage errors, 1 on runtime errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace xmed
