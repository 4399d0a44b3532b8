#include <iostream>

#include "xmed/cli.hpp"

int main(int argc, char** argv) { return xmed::run_cli(argc, argv, std::cout, std::cerr); }
