// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aquila {

// Runs one `aquila` invocation; args excludes the program name. Returns the
// process exit code: 0 on success, 2 for usage errors, 1 for anything else.
// Errors are reported as a single "error: ..." line on err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aquila
