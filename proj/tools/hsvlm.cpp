#include "hsvlm/cli.hpp"

int main(int argc, char** argv) { return hsvlm::cli::run(argc, argv); }
