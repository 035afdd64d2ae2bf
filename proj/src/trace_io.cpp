#include "nspexit/trace_io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>
#include <system_error>

#include "json.hpp"
#include "nspexit/error.hpp"

namespace nspexit {

namespace {

using nlohmann::json;

constexpr std::string_view kManifestSuffix = ".manifest.json";
constexpr std::string_view kPayloadSuffix = ".payload";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_real(std::vector<std::uint8_t>& out, double v, PayloadEncoding encoding) {
  if (encoding == PayloadEncoding::kBinaryLittleEndianF32) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) {
      throw Error(ErrorKind::kNonFinite, "value " + std::to_string(v) + " overflows float32");
    }
    put_u32(out, std::bit_cast<std::uint32_t>(f));
  } else {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

std::string encoding_name(PayloadEncoding e) {
  return e == PayloadEncoding::kJson ? "json" : "binary_le_f32";
}

PayloadEncoding parse_encoding(const std::string& name) {
  if (name == "json") return PayloadEncoding::kJson;
  if (name == "binary_le_f32") return PayloadEncoding::kBinaryLittleEndianF32;
  throw Error(ErrorKind::kCorruptPayload, "unknown payload_encoding '" + name + "'");
}

std::size_t get_count(const json& doc, const char* key) {
  const auto& v = doc.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 1) {
    throw Error(ErrorKind::kCorruptPayload, std::string(key) + " must be a positive integer");
  }
  return static_cast<std::size_t>(v.get<std::int64_t>());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::kIoFailure, "read failed for " + path.string());
  return bytes;
}

json manifest_to_json(const TraceManifest& m) {
  json doc;
  doc["format_version"] = m.format_version;
  doc["feature_dim"] = m.feature_dim;
  doc["num_classes"] = m.num_classes;
  doc["num_layers"] = m.num_layers;
  doc["num_samples"] = m.num_samples;
  doc["label_names"] = m.label_names;
  doc["payload_encoding"] = encoding_name(m.payload_encoding);
  doc["checksum"] = m.checksum;
  doc["provenance"] = json::object();
  for (const auto& [k, v] : m.provenance) doc["provenance"][k] = v;
  return doc;
}

TraceManifest manifest_from_json(const json& doc) {
  TraceManifest m;
  const auto& version = doc.at("format_version");
  if (!version.is_number_integer()) {
    throw Error(ErrorKind::kCorruptPayload, "format_version must be an integer");
  }
  m.format_version = version.get<int>();
  if (m.format_version != kTraceFormatVersion) {
    throw Error(ErrorKind::kUnsupportedVersion,
                "format_version " + std::to_string(m.format_version) + " is not supported");
  }
  m.feature_dim = get_count(doc, "feature_dim");
  m.num_classes = get_count(doc, "num_classes");
  m.num_layers = get_count(doc, "num_layers");
  m.num_samples = get_count(doc, "num_samples");
  m.label_names = doc.at("label_names").get<std::vector<std::string>>();
  m.payload_encoding = parse_encoding(doc.at("payload_encoding").get<std::string>());
  m.checksum = doc.at("checksum").get<std::string>();
  if (doc.contains("provenance")) {
    for (const auto& [k, v] : doc.at("provenance").items()) {
      m.provenance[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
  if (m.label_names.size() != m.num_classes) {
    throw Error(ErrorKind::kDimensionMismatch, "label_names length differs from num_classes");
  }
  return m;
}

std::vector<double> json_reals(const json& arr, std::size_t expected, const char* what) {
  if (!arr.is_array() || arr.size() != expected) {
    throw Error(ErrorKind::kDimensionMismatch,
                std::string(what) + " must hold " + std::to_string(expected) + " entries");
  }
  std::vector<double> out;
  out.reserve(expected);
  for (const auto& v : arr) {
    if (!v.is_number()) throw Error(ErrorKind::kCorruptPayload, std::string(what) + " is not numeric");
    out.push_back(v.get<double>());
  }
  return out;
}

void check_label(std::int64_t label, std::size_t classes) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw Error(ErrorKind::kDimensionMismatch, "gold label " + std::to_string(label) +
                                                   " outside [0, " + std::to_string(classes) + ")");
  }
}

void verify_checksum(const TraceDataset& dataset) {
  const auto bytes = encode_payload(dataset, dataset.manifest.payload_encoding);
  const std::string actual = hex32(crc32(bytes));
  if (actual != dataset.manifest.checksum) {
    throw Error(ErrorKind::kCorruptPayload,
                "checksum mismatch: manifest " + dataset.manifest.checksum + ", payload " + actual);
  }
}

TraceDataset load_json_variant(const json& doc, TraceManifest manifest) {
  const std::size_t n = manifest.feature_dim;
  const std::size_t c = manifest.num_classes;
  const std::size_t m = manifest.num_layers;
  const std::size_t s = manifest.num_samples;

  TraceDataset ds;
  const auto& heads = doc.at("heads");
  if (!heads.is_array() || heads.size() != m) {
    throw Error(ErrorKind::kDimensionMismatch, "expected " + std::to_string(m) + " heads");
  }
  for (const auto& h : heads) {
    const auto& rows = h.at("weight");
    if (!rows.is_array() || rows.size() != n) {
      throw Error(ErrorKind::kDimensionMismatch, "weight must have feature_dim rows");
    }
    std::vector<double> w;
    w.reserve(n * c);
    for (const auto& row : rows) {
      auto r = json_reals(row, c, "weight row");
      w.insert(w.end(), r.begin(), r.end());
    }
    ds.heads.push_back(LayerHead{RealMatrix(n, c, std::move(w)),
                                 RealVector(json_reals(h.at("bias"), c, "bias"))});
  }
  const auto& samples = doc.at("samples");
  if (!samples.is_array() || samples.size() != s) {
    throw Error(ErrorKind::kDimensionMismatch, "expected " + std::to_string(s) + " samples");
  }
  for (const auto& js : samples) {
    SampleFeatures sf;
    const auto label = js.at("label").get<std::int64_t>();
    check_label(label, c);
    sf.gold_label = static_cast<std::size_t>(label);
    const auto& layers = js.at("features");
    if (!layers.is_array() || layers.size() != m) {
      throw Error(ErrorKind::kDimensionMismatch, "sample must have num_layers feature vectors");
    }
    for (const auto& x : layers) sf.per_layer.emplace_back(json_reals(x, n, "feature"));
    ds.samples.push_back(std::move(sf));
  }
  ds.manifest = std::move(manifest);
  return ds;
}

TraceDataset load_binary_variant(const TracePaths& paths, TraceManifest manifest) {
  const std::size_t n = manifest.feature_dim;
  const std::size_t c = manifest.num_classes;
  const std::size_t m = manifest.num_layers;
  const std::size_t s = manifest.num_samples;

  const auto bytes = read_bytes(paths.payload);
  const std::size_t words = m * (n * c + c) + s + s * m * n;
  if (bytes.size() != 4 * words) {
    throw Error(ErrorKind::kCorruptPayload, "payload has " + std::to_string(bytes.size()) +
                                                " bytes, manifest implies " +
                                                std::to_string(4 * words));
  }
  const std::string actual = hex32(crc32(bytes));
  if (actual != manifest.checksum) {
    throw Error(ErrorKind::kCorruptPayload,
                "checksum mismatch: manifest " + manifest.checksum + ", payload " + actual);
  }

  const std::uint8_t* p = bytes.data();
  auto next_real = [&p]() {
    const float f = std::bit_cast<float>(get_u32(p));
    p += 4;
    return static_cast<double>(f);
  };
  auto next_reals = [&](std::size_t count) {
    std::vector<double> out(count);
    for (auto& v : out) v = next_real();
    return out;
  };

  TraceDataset ds;
  for (std::size_t layer = 0; layer < m; ++layer) {
    RealMatrix w(n, c, next_reals(n * c));
    RealVector b(next_reals(c));
    ds.heads.push_back(LayerHead{std::move(w), std::move(b)});
  }
  ds.samples.resize(s);
  for (auto& sample : ds.samples) {
    const std::uint32_t label = get_u32(p);
    p += 4;
    check_label(label, c);
    sample.gold_label = label;
  }
  for (auto& sample : ds.samples) {
    for (std::size_t layer = 0; layer < m; ++layer) sample.per_layer.emplace_back(next_reals(n));
  }
  ds.manifest = std::move(manifest);
  return ds;
}

json load_json_document(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptPayload, "manifest is not valid JSON: " + std::string(e.what()));
  }
}

}  // namespace

std::string to_string(PayloadEncoding encoding) { return encoding_name(encoding); }

TracePaths resolve_trace_paths(const std::filesystem::path& path) {
  std::string stem = path.string();
  if (stem.size() > kManifestSuffix.size() &&
      stem.compare(stem.size() - kManifestSuffix.size(), kManifestSuffix.size(), kManifestSuffix) ==
          0) {
    stem.resize(stem.size() - kManifestSuffix.size());
  }
  return TracePaths{stem + std::string(kManifestSuffix), stem + std::string(kPayloadSuffix)};
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t len = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(len));
  }
  return static_cast<std::uint32_t>(crc);
}

void validate(const TraceDataset& dataset) {
  const auto& m = dataset.manifest;
  if (m.feature_dim < 1 || m.num_classes < 1 || m.num_layers < 1 || m.num_samples < 1) {
    throw Error(ErrorKind::kDimensionMismatch, "manifest dimensions must be positive");
  }
  if (m.label_names.size() != m.num_classes) {
    throw Error(ErrorKind::kDimensionMismatch, "label_names length differs from num_classes");
  }
  if (dataset.heads.size() != m.num_layers) {
    throw Error(ErrorKind::kDimensionMismatch, "head count differs from num_layers");
  }
  for (const auto& h : dataset.heads) {
    if (h.weight.rows() != m.feature_dim || h.weight.cols() != m.num_classes ||
        h.bias.dim() != m.num_classes) {
      throw Error(ErrorKind::kDimensionMismatch, "head shape differs from manifest");
    }
  }
  if (dataset.samples.size() != m.num_samples) {
    throw Error(ErrorKind::kDimensionMismatch, "sample count differs from num_samples");
  }
  for (const auto& s : dataset.samples) {
    if (s.gold_label >= m.num_classes) {
      throw Error(ErrorKind::kDimensionMismatch, "gold label out of range");
    }
    if (s.per_layer.size() != m.num_layers) {
      throw Error(ErrorKind::kDimensionMismatch, "sample layer count differs from num_layers");
    }
    for (const auto& x : s.per_layer) {
      if (x.dim() != m.feature_dim) {
        throw Error(ErrorKind::kDimensionMismatch, "feature dim differs from manifest");
      }
    }
  }
}

std::vector<std::uint8_t> encode_payload(const TraceDataset& dataset, PayloadEncoding encoding) {
  std::vector<std::uint8_t> out;
  const auto& m = dataset.manifest;
  const std::size_t width = encoding == PayloadEncoding::kJson ? 8 : 4;
  out.reserve(width * (m.num_layers * (m.feature_dim + 1) * m.num_classes +
                       m.num_samples * m.num_layers * m.feature_dim) +
              4 * m.num_samples);
  for (const auto& h : dataset.heads) {
    for (double v : h.weight.values()) put_real(out, v, encoding);
    for (double v : h.bias.values()) put_real(out, v, encoding);
  }
  for (const auto& s : dataset.samples) put_u32(out, static_cast<std::uint32_t>(s.gold_label));
  for (const auto& s : dataset.samples) {
    for (const auto& x : s.per_layer) {
      for (double v : x.values()) put_real(out, v, encoding);
    }
  }
  return out;
}

void write_file_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw Error(ErrorKind::kIoFailure, "cannot create " + path.parent_path().string());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIoFailure, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::kIoFailure, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::kIoFailure, "cannot rename onto " + path.string());
}

void write_file_atomically(const std::filesystem::path& path, const std::string& text) {
  write_file_atomically(
      path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                          text.size()));
}

void save_trace(const TraceDataset& dataset, const std::filesystem::path& destination) {
  validate(dataset);
  const TracePaths paths = resolve_trace_paths(destination);
  const PayloadEncoding encoding = dataset.manifest.payload_encoding;
  const auto payload = encode_payload(dataset, encoding);

  TraceManifest manifest = dataset.manifest;
  manifest.checksum = hex32(crc32(payload));
  json doc = manifest_to_json(manifest);

  if (encoding == PayloadEncoding::kBinaryLittleEndianF32) {
    doc["payload_file"] = paths.payload.filename().string();
    write_file_atomically(paths.payload, payload);
  } else {
    json heads = json::array();
    for (const auto& h : dataset.heads) {
      json rows = json::array();
      for (std::size_t i = 0; i < h.weight.rows(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < h.weight.cols(); ++j) row.push_back(h.weight(i, j));
        rows.push_back(std::move(row));
      }
      heads.push_back({{"weight", std::move(rows)}, {"bias", h.bias.data()}});
    }
    json samples = json::array();
    for (const auto& s : dataset.samples) {
      json layers = json::array();
      for (const auto& x : s.per_layer) layers.push_back(x.data());
      samples.push_back({{"label", s.gold_label}, {"features", std::move(layers)}});
    }
    doc["heads"] = std::move(heads);
    doc["samples"] = std::move(samples);
  }
  write_file_atomically(paths.manifest, doc.dump(2) + "\n");
}

TraceManifest read_manifest(const std::filesystem::path& source) {
  const json doc = load_json_document(resolve_trace_paths(source).manifest);
  try {
    return manifest_from_json(doc);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptPayload, "malformed manifest: " + std::string(e.what()));
  }
}

TraceDataset load_trace(const std::filesystem::path& source) {
  const TracePaths paths = resolve_trace_paths(source);
  const json doc = load_json_document(paths.manifest);
  try {
    TraceManifest manifest = manifest_from_json(doc);
    TraceDataset ds;
    if (manifest.payload_encoding == PayloadEncoding::kJson) {
      ds = load_json_variant(doc, std::move(manifest));
      validate(ds);
      verify_checksum(ds);
    } else {
      TracePaths bin = paths;
      if (doc.contains("payload_file")) {
        bin.payload = paths.manifest.parent_path() / doc.at("payload_file").get<std::string>();
      }
      ds = load_binary_variant(bin, std::move(manifest));
      validate(ds);
    }
    return ds;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kCorruptPayload, "malformed trace document: " + std::string(e.what()));
  }
}

MultiExitModel build_model(const TraceDataset& dataset, double rank_tolerance) {
  std::vector<ProjectionContext> heads;
  heads.reserve(dataset.heads.size());
  for (const auto& h : dataset.heads) {
    heads.push_back(build_projection_context(h.weight, h.bias, rank_tolerance));
  }
  return MultiExitModel(std::move(heads));
}

std::string manifest_json(const TraceManifest& manifest) {
  return manifest_to_json(manifest).dump(2) + "\n";
}

}  // namespace nspexit
