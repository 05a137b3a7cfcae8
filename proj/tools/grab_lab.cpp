#include "grab/cli.hpp"

int main(int argc, char** argv) { return grab::run_cli(argc, argv); }
