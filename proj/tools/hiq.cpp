#include <iostream>

#include "hiq/cli.hpp"

int main(int argc, char** argv) { return hiq::run_cli(argc, argv, std::cout, std::cerr); }
