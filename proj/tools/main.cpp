#include <iostream>

#include "ice/cli.hpp"

int main(int argc, char** argv) {
  return ice::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
