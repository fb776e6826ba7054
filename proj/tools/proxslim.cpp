#include <iostream>

#include "proxslim/harness.hpp"

int main(int argc, char** argv) { return proxslim::run_cli(argc, argv, std::cout, std::cerr); }
