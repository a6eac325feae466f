#include "dilkit/cli.hpp"

int main(int argc, char** argv) { return dilkit::cli_main(argc, argv); }
