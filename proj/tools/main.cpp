#include <iostream>

#include "epep/cli.hpp"

int main(int argc, char** argv) { return epep::run_cli(argc, argv, std::cout, std::cerr); }
