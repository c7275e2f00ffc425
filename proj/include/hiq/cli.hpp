#pragma once

#include <iosfwd>

namespace hiq {

/// Entry point of the `hiq` tool. Exit codes: 0 success, 1 usage or
/// configuration error, 2 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hiq
