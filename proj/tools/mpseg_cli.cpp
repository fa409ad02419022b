#include "mpseg/cli.hpp"

int main(int argc, char** argv) { return mpseg::cli::run(argc, argv); }
