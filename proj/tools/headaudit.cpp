#include <iostream>

#include "headaudit/cli.hpp"

int main(int argc, char** argv) {
  return headaudit::run_cli(argc, argv, std::cout, std::cerr);
}
