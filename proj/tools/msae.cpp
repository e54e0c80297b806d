#include <iostream>

#include "msae/app/commands.hpp"

int main(int argc, char** argv) {
  return msae::app::run_cli(argc, argv, std::cout, std::cerr);
}
