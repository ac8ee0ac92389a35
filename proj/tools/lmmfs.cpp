#include "lmmfs/cli/commands.hpp"

int main(int argc, char** argv) { return lmmfs::cli::run(argc, argv); }
