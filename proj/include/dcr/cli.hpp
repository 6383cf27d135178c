#pragma once

namespace dcr {

// Entry point shared by the dcr binary and the tests. Exit status: 0 when all
// requested work passed, 1 when an executed check failed, 2 for malformed
// configuration or flags.
int run_cli(int argc, const char* const* argv);

}  // namespace dcr
