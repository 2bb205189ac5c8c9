#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ddc {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or path error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ddc
