#include "emblora/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return emblora::run_cli(args, std::cout, std::cerr);
}
