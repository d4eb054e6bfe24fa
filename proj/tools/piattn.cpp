#include <iostream>

#include "piattn/cli.hpp"

int main(int argc, char** argv) { return piattn::cli_dispatch(argc, argv, std::cout, std::cerr); }
