#include "xrec/cli.hpp"

int main(int argc, char** argv) { return xrec::run_cli(argc, argv); }
