#pragma once

#include <iosfwd>

namespace lpt {

// Entry point of the `lpt` tool. Returns 0 on success, 2 on usage errors and
// 1 on any other failure, after printing one "error[<category>]: <message>"
// line to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lpt
