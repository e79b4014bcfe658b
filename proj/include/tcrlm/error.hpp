#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace tcrlm {

// Every failure in the library throws this one type. The category is a stable
// machine-readable token (tests and the CLI match on it); what() carries
// "<category>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& detail)
      : std::runtime_error(category + ": " + detail),
        category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

[[noreturn]] inline void fail(std::string category, const std::string& detail) {
  throw Error(std::move(category), detail);
}

}  // namespace tcrlm
