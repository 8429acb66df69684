// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "covt/cli.hpp"

int main(int argc, char** argv) { return covt::run_cli(argc, argv, std::cout, std::cerr); }
