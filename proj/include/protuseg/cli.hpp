#pragma once

#include <iosfwd>

namespace protuseg {

/// Command-line entry point. Returns 0 on success, 2 on usage errors and 1 on
/// any other failure, after printing one line of the form
///   error: kind=<usage|invalid_argument|io|format|numeric|internal> [where=<stage>] msg="..."
/// to `err`.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace protuseg
