#include "petrec/cli.hpp"

int main(int argc, char** argv) { return petrec::cli_main(argc, argv); }
