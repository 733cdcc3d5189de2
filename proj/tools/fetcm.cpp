#include "fetcm/cli.hpp"
#include "fetcm/platform.hpp"

int main(int argc, char** argv) {
  fetcm::tune_allocator();
  return fetcm::run_cli(argc, argv);
}
