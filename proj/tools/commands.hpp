#pragma once

namespace dstod::cli {

/// Parses and runs one subcommand. Exit codes: 0 success, 1 stage failure
/// (structured error on stderr), 2 usage error.
int run_cli(int argc, char** argv);

}  // namespace dstod::cli
