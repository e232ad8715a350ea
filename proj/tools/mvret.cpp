#include <iostream>
#include <string>
#include <vector>

#include "mvret/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mvret::dispatch(args, std::cout, std::cerr);
}
