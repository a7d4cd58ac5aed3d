#include "equirobust/cli.hpp"

int main(int argc, char** argv) { return equirobust::cli::main(argc, argv); }
