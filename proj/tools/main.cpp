#include "cli.hpp"

int main(int argc, char** argv) { return malfuse::cli::run({argv + 1, argv + argc}); }
