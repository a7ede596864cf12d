#include "svfuse/cli.hpp"

int main(int argc, char** argv) { return svfuse::cli_main(argc, argv); }
