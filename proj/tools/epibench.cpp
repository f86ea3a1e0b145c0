#include <iostream>

#include "epibench/cli.hpp"

int main(int argc, char** argv) { return epibench::run_cli(argc, argv, std::cout, std::cerr); }
