#include <iostream>

#include "rrnet/cli.hpp"

int main(int argc, char** argv) { return rrnet::cli::run(argc, argv, std::cout, std::cerr); }
