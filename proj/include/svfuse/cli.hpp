#pragma once

#include <string>
#include <vector>

namespace svfuse {

/// Exit codes: 0 success, 1 usage or invalid config, 2 data error, 3 numeric failure.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace svfuse
