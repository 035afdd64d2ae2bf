#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace nspexit {

enum class ErrorKind {
  kDimensionMismatch,
  kRankDeficient,
  kDegenerateFeature,
  kNonFinite,
  kNotAProbability,
  kInvalidArgument,
  kEmptyHistogram,
  kDegenerateLabels,
  kNonBinaryLabels,
  kUnreachableTarget,
  kInvalidConfig,
  kDivergence,
  kIoFailure,
  kCorruptPayload,
  kUnsupportedVersion,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries one of the kinds above so the
// CLI can map it onto a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Set when the failure happened while processing one sample of a dataset.
  std::optional<std::size_t> sample_index() const noexcept { return sample_index_; }
  void set_sample_index(std::size_t index) { sample_index_ = index; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> sample_index_;
};

}  // namespace nspexit
