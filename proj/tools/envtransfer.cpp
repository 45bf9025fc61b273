#include <iostream>

#include "envtransfer/cli.hpp"

int main(int argc, char** argv) {
  return envtransfer::run_cli(argc, argv, std::cout, std::cerr);
}
