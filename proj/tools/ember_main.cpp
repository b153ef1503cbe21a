#include "ember/cli.hpp"

int main(int argc, char** argv) {
    return ember::cli::run(argc, argv);
}
