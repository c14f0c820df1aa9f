#include "fdsl/cli.hpp"

int main(int argc, char** argv) { return fdsl::cli::run_main(argc, argv); }
