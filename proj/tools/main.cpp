#include "commands.hpp"

int main(int argc, char** argv) { return dstod::cli::run_cli(argc, argv); }
