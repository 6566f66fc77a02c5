#pragma once

#include <ostream>

namespace headaudit {

// Exit codes: 0 success, 1 validation or configuration error, 2 runtime error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace headaudit
