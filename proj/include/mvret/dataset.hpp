#pragma once

// Embedding dataset: manifest, on-disk format, validation and the synthetic
// generator used as a desk-scale fixture.
//
// On disk a dataset is a directory holding index.json plus raw little-endian
// float32 blobs (dino.f32le, clip_visual.f32le, text.f32le). In memory all
// values are doubles; load widens, save narrows with round-to-nearest-even.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvret/error.hpp"
#include "mvret/tensor.hpp"

namespace mvret {

enum class Split { train, query, target };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ObjectEntry {
  std::string id;
  std::size_t label = 0;
  Split split = Split::train;

  bool operator==(const ObjectEntry&) const = default;
};

struct BlobInfo {
  std::string file;
  std::uint64_t checksum = 0;
  Shape shape;

  bool operator==(const BlobInfo&) const = default;
};

inline constexpr std::string_view kDinoBlob = "dino";
inline constexpr std::string_view kClipBlob = "clip_visual";
inline constexpr std::string_view kTextBlob = "text";

struct DatasetManifest {
  std::string dataset_name;
  std::size_t num_objects = 0;
  std::size_t views_per_object = 0;  // M
  std::size_t dino_dim = 0;          // d
  std::size_t clip_dim = 0;          // d_c
  std::vector<std::string> label_names;
  std::vector<std::string> lexicon_names;
  bool open_set_flag = true;
  std::vector<ObjectEntry> objects;
  std::map<std::string, BlobInfo> blobs;

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  Tensor dino;                // [N, M, d]
  std::optional<Tensor> clip; // [N, M, d_c]
  std::optional<Tensor> text; // [|label_names| + |lexicon_names|, d_c]

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

enum class ViolationCode {
  InvalidDimensions,
  ObjectCountMismatch,
  DuplicateObjectId,
  DuplicateName,
  LabelOutOfRange,
  OverlappingLabelSpaces,
  QueryTargetLabelMismatch,
  MissingBlob,
  UnknownBlob,
  ShapeMismatch,
  SizeMismatch,
  ChecksumMismatch,
  NonFiniteValue,
};

std::string_view to_string(ViolationCode code);

struct Violation {
  ViolationCode code;
  std::string detail;
};

/// Thrown by load/save when a dataset fails validation.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<Violation> violations);
  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  std::vector<Violation> violations_;
};

using BlobBytes = std::map<std::string, std::vector<unsigned char>>;

/// Every invariant violation; empty iff the dataset is loadable. A blob listed
/// in the manifest but absent from `blobs` is reported as MissingBlob.
std::vector<Violation> validate_manifest(const DatasetManifest& manifest, const BlobBytes& blobs);

// ---------------------------------------------------------------------------
// Format primitives

std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::string checksum_to_hex(std::uint64_t checksum);
std::uint64_t checksum_from_hex(std::string_view hex);

std::vector<unsigned char> encode_f32le(const Tensor& values);
Tensor decode_f32le(std::span<const unsigned char> bytes, const Shape& shape);

/// Round every value through float32, as a save/load cycle would.
Tensor round_to_f32(const Tensor& values);

/// Canonical index.json text (fixed key order, 2-space indent, trailing newline).
std::string serialize_manifest(const DatasetManifest& manifest);
/// Throws ErrorKind::format (with byte offset) on malformed text.
DatasetManifest parse_manifest(std::string_view json_text);

/// Recompute manifest.blobs and counts from the tensors and return the encoded
/// blobs, keyed by blob name.
BlobBytes encode_blobs(Dataset& dataset);

/// Throws ValidationError, ErrorKind::format or ErrorKind::io.
Dataset load_dataset(const std::filesystem::path& root);
/// Refuses to write (returns the violations) when the dataset is invalid;
/// otherwise writes index + blobs and returns an empty list. IO failures throw.
std::vector<Violation> save_dataset(const Dataset& dataset, const std::filesystem::path& root);

/// FNV-1a of the canonical index.json text; identifies a dataset in run outputs.
std::uint64_t dataset_hash(const DatasetManifest& manifest);

// ---------------------------------------------------------------------------
// Accessors

std::vector<std::size_t> split_indices(const DatasetManifest& manifest, Split split);
std::vector<std::size_t> object_labels(const DatasetManifest& manifest,
                                       std::span<const std::size_t> indices);
/// rows[indices] of an [N, ...] tensor, in the given order.
Tensor gather_rows(const Tensor& values, std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticSpec {
  std::size_t seen_classes = 20;
  std::size_t unseen_classes = 20;
  std::size_t objects_per_class = 50;
  std::size_t views = 24;
  std::size_t dino_dim = 64;
  std::size_t clip_dim = 32;
  double visual_noise_sigma = 0.15;
  double view_jitter = 0.3;
  // Object-level noise in the adapted space: isotropic part plus a
  // class-independent low-rank nuisance, both scaled by sigma.
  double object_noise = 0.5;
  std::size_t nuisance_rank = 8;
  double nuisance_gain = 3.5;
  std::size_t lexicon_size = 200;
  std::vector<std::string> lexicon_names;  // empty -> concept_000, concept_001, ...
  std::uint64_t alignment_seed = 1042;
  std::uint64_t data_seed = 42;

  /// The standard fixture for a given seed.
  static SyntheticSpec standard(std::uint64_t seed);
};

/// Throws ErrorKind::config on an invalid spec.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

}  // namespace mvret
