#include <iostream>

#include "kdflow/cli.hpp"

int main(int argc, char** argv) { return kdflow::cli_main(argc, argv, std::cout, std::cerr); }
