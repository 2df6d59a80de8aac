#include <iostream>

#include "protuseg/cli.hpp"

int main(int argc, char** argv) { return protuseg::cli_dispatch(argc, argv, std::cout, std::cerr); }
