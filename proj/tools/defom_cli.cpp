#include "defom/cli.hpp"

int main(int argc, char** argv) { return defom::cli::run(argc, argv); }
