#include "escore/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return escore::cli::run(argc, argv, std::cout, std::cerr); }
