#pragma once

#include <stdexcept>
#include <string>

namespace cdr {

// Missing or unreadable input, or an output that could not be written.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

std::string read_text_file(const std::string& path);
// Creates parent directories as needed.
void write_text_file(const std::string& path, const std::string& contents);
void write_binary_file(const std::string& path, const std::string& bytes);

// Round-trip exact text form of a double ("%.17g").
std::string format_double(double v);
// Fixed-precision form for human-facing tables.
std::string format_fixed(double v, int digits);

}  // namespace cdr
