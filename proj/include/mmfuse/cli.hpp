#pragma once

// Subcommand front end: generate / train / probe / similarity / saliency /
// report, each driven by one strict JSON config (unknown keys rejected) plus
// --config/--seed/--out flags. Every run echoes its fully resolved config
// next to its outputs. Exit codes: 0 success, 1 runtime failure, 2 config
// error.

#include <string>
#include <vector>

namespace mmfuse {

int run_cli(const std::vector<std::string>& args);

}  // namespace mmfuse
