#include <string>
#include <vector>

#include "cal3/cliapp.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cal3::run_cli(args);
}
