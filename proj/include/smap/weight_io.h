#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "smap/errors.h"
#include "smap/model.h"

namespace smap {

// SMAP container layout (all integers little-endian):
//   "SMAP" | u32 version (=1) | u64 header_len | header JSON | payload
// The header holds {"config": {...}, "tensors": [{name, shape, offset}, ...]}
// with offsets in bytes from the start of the payload. The payload is packed
// float32, row-major, in manifest order.
inline constexpr char kModelMagic[4] = {'S', 'M', 'A', 'P'};
inline constexpr std::uint32_t kModelVersion = 1;

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public ModelFormatError {
 public:
  BadMagicError() : ModelFormatError("bad magic") {}
};
class UnsupportedVersionError : public ModelFormatError {
 public:
  explicit UnsupportedVersionError(std::uint32_t v)
      : ModelFormatError("unsupported version " + std::to_string(v)) {}
};
class TruncatedPayloadError : public ModelFormatError {
 public:
  explicit TruncatedPayloadError(const std::string& what)
      : ModelFormatError("truncated payload: " + what) {}
};
class TensorShapeError : public ModelFormatError {
 public:
  using ModelFormatError::ModelFormatError;
};
class MissingTensorError : public ModelFormatError {
 public:
  using ModelFormatError::ModelFormatError;
};

struct TensorEntry {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0;

  std::uint64_t elements() const;
};

struct ModelFileHeader {
  std::uint32_t version = kModelVersion;
  ModelConfig config;
  std::vector<TensorEntry> tensors;
};

// Manifest implied by a config, in canonical payload order.
std::vector<TensorEntry> tensor_manifest(const ModelConfig& config);

ModelFileHeader read_model_header(const std::string& path);
ModelWeights load_model(const std::string& path);
// Validates before writing anything; output bytes depend only on the inputs.
void save_model(const std::string& path, const ModelWeights& weights);

// Index -> token string, with reserved specials 0 (padding), 1 (end of
// sequence) and 2 (unknown).
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;

  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;

  // Greedy longest match over the non-special tokens; each unmatched byte
  // becomes kUnk.
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t longest_ = 0;
};

// Specials, printable ASCII, then common words and letter pairs up to `size`.
Vocabulary make_toy_vocabulary(std::size_t size = 256);

}  // namespace smap
