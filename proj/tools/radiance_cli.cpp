#include "radiance/cli.hpp"

int main(int argc, char** argv) {
    return radiance::cli::dispatch(std::vector<std::string>(argv, argv + argc));
}
