#include <iostream>

#include "bcr/cli.hpp"

int main(int argc, char** argv) { return bcr::run_cli(argc, argv, std::cerr); }
