#include <iostream>

#include "groklab/cli.hpp"

int main(int argc, char** argv) { return groklab::run_cli(argc, argv, std::cout, std::cerr); }
