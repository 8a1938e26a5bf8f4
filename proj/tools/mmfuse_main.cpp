#include "mmfuse/cli.hpp"

int main(int argc, char** argv) {
  return mmfuse::run_cli({argv + 1, argv + argc});
}
