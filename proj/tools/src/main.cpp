#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return rwkv_clip::cli::run(argc, argv, std::cout, std::cerr); }
