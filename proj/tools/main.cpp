#include "kvpacket/cli.hpp"

int main(int argc, char** argv) { return kvp::cli_main(argc, argv); }
