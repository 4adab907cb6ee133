#include "ncgp/cli.hpp"

int main(int argc, char **argv) { return ncgp::cli::run_main(argc, argv); }
