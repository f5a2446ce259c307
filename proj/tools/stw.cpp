#include "stereoworld/cli.hpp"

int main(int argc, char** argv) { return stw::cli::run(argc, argv); }
