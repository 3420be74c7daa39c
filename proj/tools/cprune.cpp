#include <iostream>

#include "cprune/cli.hpp"

int main(int argc, char** argv) { return cprune::run_cli(argc, argv, std::cout, std::cerr); }
