#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace piattn {

// Exit codes: 0 every asserted property held, 1 a property failed,
// 2 usage or configuration error.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string version_string();

}  // namespace piattn
