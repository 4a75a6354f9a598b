#include "dvat/cli.hpp"

int main(int argc, char** argv) { return dvat::cli::run(argc, argv); }
