#pragma once

#include <map>
#include <stdexcept>
#include <string>

namespace xrec {

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses a flat "key = value" configuration file. '#' starts a comment;
/// blank lines are skipped. Errors name the file and line number.
std::map<std::string, std::string> parse_config_file(const std::string& path);

/// Writes entries as sorted "key = value" lines.
void write_run_config(const std::string& path, const std::map<std::string, std::string>& entries);

/// Entry point behind main(). Returns the process exit code: 0 on success,
/// nonzero with a one-line diagnostic on stderr otherwise.
int run_cli(int argc, const char* const* argv);

}  // namespace xrec
