#include "stldp/cli.hpp"

int main(int argc, char** argv) { return stldp::cli::run({argv + 1, argv + argc}); }
