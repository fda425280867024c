#include <iostream>

#include "mmclip/cli.hpp"

int main(int argc, char** argv) { return mmclip::cli::run(argc, argv, std::cout, std::cerr); }
