#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace mad {

// Error with a stable machine-readable kind. The CLI maps kinds to exit
// codes and emits them as single-line JSON on stderr.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

[[noreturn]] inline void fail(const std::string& kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void check(bool cond, const std::string& kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

// Common kinds.
namespace errkind {
inline constexpr const char* kShape = "shape_mismatch";
inline constexpr const char* kContract = "contract_violation";
inline constexpr const char* kNumeric = "non_finite_value";
inline constexpr const char* kConfig = "config_invalid";
inline constexpr const char* kUsage = "usage";
inline constexpr const char* kIo = "io_error";
inline constexpr const char* kDatasetNotFound = "dataset_not_found";
inline constexpr const char* kCorrupt = "corrupt_file";
inline constexpr const char* kVersion = "version_mismatch";
}  // namespace errkind

}  // namespace mad
