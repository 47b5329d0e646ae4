#include "cli.hpp"

#include "digr/runtime.hpp"

#include <iostream>

int main(int argc, char** argv) {
  digr::tune_allocator();
  return digr::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
