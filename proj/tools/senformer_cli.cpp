#include "senformer/commands.hpp"

int main(int argc, char** argv) { return senf::run_command(argc, argv); }
