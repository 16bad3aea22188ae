#include <string>
#include <vector>

#include "flowvi/harness.hpp"

int main(int argc, char** argv) {
  return flowvi::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
