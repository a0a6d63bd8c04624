#include "opotomo/io.hpp"

int main(int argc, char** argv) { return opotomo::io::run_cli(argc, argv); }
