#include "bitnet_a48/cli.hpp"

int main(int argc, char** argv) { return ba48::cli::run(argc, argv); }
