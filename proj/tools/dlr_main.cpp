#include "dlr/cli.hpp"

int main(int argc, char** argv) { return dlr::run_cli(std::vector<std::string>(argv, argv + argc)); }
