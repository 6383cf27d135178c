#include "dcr/cli.hpp"

int main(int argc, char** argv) { return dcr::run_cli(argc, argv); }
