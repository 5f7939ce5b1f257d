#pragma once

// The `senformer` command surface: synth, train, eval, analyze, gradcheck.
//
// Exit codes: 0 success, 1 runtime failure (one "error: <command>: <message>"
// line on stderr), 2 usage error (message plus usage text).

#include <iosfwd>
#include <string>
#include <vector>

namespace senf {

// `args` excludes the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

// Parses "2,3,4,5" into pyramid levels; throws std::invalid_argument.
std::vector<std::size_t> parse_levels(const std::string& text);

}  // namespace senf
