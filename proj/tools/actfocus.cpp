#include <iostream>

#include "actfocus/cli.hpp"

int main(int argc, char** argv) { return actfocus::run(argc, argv, std::cout, std::cerr); }
