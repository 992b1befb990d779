#include "ginv/cli.hpp"

int main(int argc, char** argv) { return ginv::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
