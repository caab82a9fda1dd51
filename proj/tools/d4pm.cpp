#include "d4pm/cli.hpp"

int main(int argc, char** argv) { return d4pm::cli_main(argc, argv); }
