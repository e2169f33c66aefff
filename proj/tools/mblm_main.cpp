#include <string>
#include <vector>

#include "mblm/experiment.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mblm::run_cli(args);
}
