#include <iostream>

#include "lsemvae/cli.hpp"

int main(int argc, char** argv) { return lsemvae::cli::run(argc, argv, std::cout, std::cerr); }
