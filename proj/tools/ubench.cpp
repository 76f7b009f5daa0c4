#include "ubench/cli.hpp"

int main(int argc, char** argv) {
    ubench::cli::install_signal_handlers();
    return ubench::cli::run(argc, argv);
}
