#include <iostream>

#include "optin/cli.hpp"

int main(int argc, char** argv) { return optin::cli::run(argc, argv, std::cout, std::cerr); }
