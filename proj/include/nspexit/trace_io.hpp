#pragma once

// Portable trace files: per-layer classifier heads plus per-sample,
// per-layer features. The byte layout is documented in FORMAT.md.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nspexit/controller.hpp"
#include "nspexit/linalg.hpp"

namespace nspexit {

inline constexpr int kTraceFormatVersion = 1;

enum class PayloadEncoding { kJson, kBinaryLittleEndianF32 };

struct TraceManifest {
  int format_version = kTraceFormatVersion;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::size_t num_layers = 0;
  std::size_t num_samples = 0;
  std::vector<std::string> label_names;
  PayloadEncoding payload_encoding = PayloadEncoding::kBinaryLittleEndianF32;
  // Lowercase 8-digit hex CRC32 of the payload bytes; filled in by save_trace.
  std::string checksum;
  // Free-form string metadata (generator settings, source, ...).
  std::map<std::string, std::string> provenance;

  friend bool operator==(const TraceManifest&, const TraceManifest&) = default;
};

struct LayerHead {
  RealMatrix weight;  // N x C
  RealVector bias;    // C

  friend bool operator==(const LayerHead&, const LayerHead&) = default;
};

struct TraceDataset {
  TraceManifest manifest;
  std::vector<LayerHead> heads;
  std::vector<SampleFeatures> samples;

  friend bool operator==(const TraceDataset&, const TraceDataset&) = default;
};

struct TracePaths {
  std::filesystem::path manifest;
  std::filesystem::path payload;
};

// Accepts either the stem "<dir>/<name>" or "<dir>/<name>.manifest.json".
TracePaths resolve_trace_paths(const std::filesystem::path& path);

// Throws DimensionMismatch / NonFinite on any broken invariant.
void validate(const TraceDataset& dataset);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Payload bytes as written for the binary encoding (f32) or covered by the
// checksum of the JSON encoding (f64).
std::vector<std::uint8_t> encode_payload(const TraceDataset& dataset, PayloadEncoding encoding);

// Writes atomically (temp file + rename). The manifest's encoding picks the
// variant; its checksum field is recomputed. Throws IoFailure.
void save_trace(const TraceDataset& dataset, const std::filesystem::path& destination);

// Throws IoFailure, CorruptPayload, DimensionMismatch, UnsupportedVersion,
// NonFinite.
TraceDataset load_trace(const std::filesystem::path& source);

// Reads only the manifest document; no payload validation.
TraceManifest read_manifest(const std::filesystem::path& source);

MultiExitModel build_model(const TraceDataset& dataset,
                           double rank_tolerance = kDefaultRankTolerance);

std::string to_string(PayloadEncoding encoding);

// The manifest as pretty-printed JSON (the keys of the manifest file, without
// any embedded payload).
std::string manifest_json(const TraceManifest& manifest);

// Atomic text write used for every file the tools emit.
void write_file_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomically(const std::filesystem::path& path, const std::string& text);

}  // namespace nspexit
