#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "grab/error.hpp"

namespace grab {

// Exit codes: 0 ok, 1 config error, 2 I/O or parse error, 3 contract
// violation. Failures print one "error kind=<kind> code=<code> reason=<...>"
// line to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

int exit_code(ErrorKind kind);

}  // namespace grab
