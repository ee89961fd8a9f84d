#pragma once

#include <string>
#include <vector>

namespace imtk::testing {

/// Standard output of a shell command; empty when it cannot be started.
std::string run_command(const std::string& command);
/// Single-quoted for /bin/sh.
std::string shell_quote(const std::string& text);
std::vector<std::string> split_lines(const std::string& text);
std::vector<std::string> split_words(const std::string& line);

} // namespace imtk::testing
