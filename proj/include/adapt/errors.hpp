#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adapt {

// Exit-code classes used by the CLI: config_error -> 1, data_error -> 2,
// numeric_error -> 3. Contract violations (programming errors) throw
// std::invalid_argument / std::logic_error.

struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct off_parse_error : data_error {
  off_parse_error(size_t line_no, const std::string& msg)
      : data_error("line " + std::to_string(line_no) + ": " + msg), line(line_no) {}
  size_t line;
};

}  // namespace adapt
