#include "mitodet/cli.hpp"

int main(int argc, const char** argv) { return mitodet::cli::dispatch(argc, argv); }
