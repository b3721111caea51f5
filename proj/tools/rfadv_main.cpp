#include <iostream>

#include "rfadv/harness.hpp"

int main(int argc, char** argv) { return rfadv::harness::run_cli(argc, argv, std::cout, std::cerr); }
