#include "dynident/cli_io.hpp"

int main(int argc, char** argv) { return dynident::run_command(argc, argv); }
