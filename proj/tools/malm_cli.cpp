#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "malm/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    malm::ParsedArgs parsed = malm::parse_args(args);
    if (parsed.exit_code >= 0) {
        (parsed.exit_code == 0 ? std::cout : std::cerr) << parsed.usage_text;
        return parsed.exit_code;
    }
    try {
        return malm::run_command(parsed.command, parsed.config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
