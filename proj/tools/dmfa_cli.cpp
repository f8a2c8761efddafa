#include "dmfa/cli.hpp"

int main(int argc, char** argv) { return dmfa::cli::run(argc, argv); }
