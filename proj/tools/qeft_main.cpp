#include "qeft/cli.hpp"

int main(int argc, char** argv) { return qeft::cli::run(argc, argv); }
