#include "textcsp/cli/commands.hpp"

int main(int argc, char** argv) { return textcsp::cli::run(argc, argv); }
