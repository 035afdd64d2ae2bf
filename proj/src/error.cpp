#include "nspexit/error.hpp"

namespace nspexit {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kRankDeficient: return "RankDeficient";
    case ErrorKind::kDegenerateFeature: return "DegenerateFeature";
    case ErrorKind::kNonFinite: return "NonFinite";
    case ErrorKind::kNotAProbability: return "NotAProbability";
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
    case ErrorKind::kEmptyHistogram: return "EmptyHistogram";
    case ErrorKind::kDegenerateLabels: return "DegenerateLabels";
    case ErrorKind::kNonBinaryLabels: return "NonBinaryLabels";
    case ErrorKind::kUnreachableTarget: return "UnreachableTarget";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
    case ErrorKind::kDivergence: return "Divergence";
    case ErrorKind::kIoFailure: return "IoFailure";
    case ErrorKind::kCorruptPayload: return "CorruptPayload";
    case ErrorKind::kUnsupportedVersion: return "UnsupportedVersion";
  }
  return "Unknown";
}

}  // namespace nspexit
