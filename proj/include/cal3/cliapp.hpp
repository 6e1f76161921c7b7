#pragma once

#include <string>
#include <vector>

namespace cal3 {

// Full command-line surface: generate | pretrain | train | eval | embed.
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
int run_cli(const std::vector<std::string>& args);

}  // namespace cal3
