#include "tilewise/cli.hpp"

int main(int argc, char** argv) { return tilewise::run_cli(argc, argv); }
