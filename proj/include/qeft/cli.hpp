#pragma once

#include "qeft/error.hpp"

#include <string>
#include <vector>

namespace qeft::cli {

// 0 success, 1 unexpected failure, 2 usage error, 10 + ErrorKind otherwise.
int exit_code(ErrorKind k);

// args excludes the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

} // namespace qeft::cli
