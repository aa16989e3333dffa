#include <iostream>

#include "hsae/cli.hpp"

int main(int argc, char** argv) { return hsae::run_cli(argc, argv, std::cout, std::cerr); }
