#pragma once

#include <iosfwd>

namespace kdflow {

/// Entry point of the `kdflow` command. Exit codes: 0 success, 1 runtime
/// failure (or compare outside tolerance), 2 invalid config / usage (or
/// compare step-count mismatch).
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace kdflow
