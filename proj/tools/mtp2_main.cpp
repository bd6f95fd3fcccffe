#include <string>
#include <vector>

#include "mtp2/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mtp2::run_cli(std::move(args));
}
