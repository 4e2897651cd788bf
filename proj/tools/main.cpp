#include "mrfmap/cli.hpp"

int main(int argc, char** argv) { return mrfmap::cli::run(argc, argv); }
