#pragma once

#include <string>
#include <vector>

namespace avflow {

/// Entry point behind the avflow binary. Exit codes: 0 success, 2 usage
/// error, 1 runtime failure.
int cli_main(const std::vector<std::string>& args);

}  // namespace avflow
