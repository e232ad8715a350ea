#include "mvret/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mvret/rng.hpp"

namespace mvret {

using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::target: return "target";
  }
  return "unknown";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "query") return Split::query;
  if (text == "target") return Split::target;
  fail(ErrorKind::format, "unknown split '" + std::string(text) + "'");
}

std::string_view to_string(ViolationCode code) {
  switch (code) {
    case ViolationCode::InvalidDimensions: return "InvalidDimensions";
    case ViolationCode::ObjectCountMismatch: return "ObjectCountMismatch";
    case ViolationCode::DuplicateObjectId: return "DuplicateObjectId";
    case ViolationCode::DuplicateName: return "DuplicateName";
    case ViolationCode::LabelOutOfRange: return "LabelOutOfRange";
    case ViolationCode::OverlappingLabelSpaces: return "OverlappingLabelSpaces";
    case ViolationCode::QueryTargetLabelMismatch: return "QueryTargetLabelMismatch";
    case ViolationCode::MissingBlob: return "MissingBlob";
    case ViolationCode::UnknownBlob: return "UnknownBlob";
    case ViolationCode::ShapeMismatch: return "ShapeMismatch";
    case ViolationCode::SizeMismatch: return "SizeMismatch";
    case ViolationCode::ChecksumMismatch: return "ChecksumMismatch";
    case ViolationCode::NonFiniteValue: return "NonFiniteValue";
  }
  return "Unknown";
}

namespace {

std::string describe(const std::vector<Violation>& violations) {
  std::string msg = "dataset validation failed:";
  for (const auto& v : violations) {
    msg += ' ';
    msg += to_string(v.code);
    if (!v.detail.empty()) msg += " (" + v.detail + ")";
    msg += ';';
  }
  return msg;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

ValidationError::ValidationError(std::vector<Violation> violations)
    : Error(ErrorKind::validation, describe(violations)), violations_(std::move(violations)) {}

// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string checksum_to_hex(std::uint64_t checksum) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(checksum));
  return buf;
}

std::uint64_t checksum_from_hex(std::string_view hex) {
  require(hex.size() == 16, ErrorKind::format, "checksum must be 16 hex digits: " + std::string(hex));
  std::uint64_t v = 0;
  for (char c : hex) {
    int digit;
    if (c >= '0' && c <= '9') digit = c - '0';
    else if (c >= 'a' && c <= 'f') digit = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') digit = c - 'A' + 10;
    else fail(ErrorKind::format, "checksum has a non-hex digit: " + std::string(hex));
    v = (v << 4) | static_cast<std::uint64_t>(digit);
  }
  return v;
}

std::vector<unsigned char> encode_f32le(const Tensor& values) {
  std::vector<unsigned char> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return out;
}

Tensor decode_f32le(std::span<const unsigned char> bytes, const Shape& shape) {
  const std::size_t n = shape_volume(shape);
  require(bytes.size() == n * 4, ErrorKind::format,
          "blob holds " + std::to_string(bytes.size()) + " bytes, shape " + shape_to_string(shape) +
              " needs " + std::to_string(n * 4));
  Tensor t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    t[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return t;
}

Tensor round_to_f32(const Tensor& values) {
  Tensor out = values;
  for (auto& v : out.storage()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

// ---------------------------------------------------------------------------

std::string serialize_manifest(const DatasetManifest& m) {
  ordered_json j;
  j["dataset_name"] = m.dataset_name;
  j["num_objects"] = m.num_objects;
  j["views_per_object"] = m.views_per_object;
  j["dino_dim"] = m.dino_dim;
  j["clip_dim"] = m.clip_dim;
  j["label_names"] = m.label_names;
  j["lexicon_names"] = m.lexicon_names;
  j["open_set_flag"] = m.open_set_flag;
  ordered_json objects = ordered_json::array();
  for (const auto& o : m.objects)
    objects.push_back({{"id", o.id}, {"label", o.label}, {"split", std::string(to_string(o.split))}});
  j["objects"] = std::move(objects);
  ordered_json blobs = ordered_json::object();
  for (const auto& [name, info] : m.blobs)
    blobs[name] = {{"file", info.file}, {"checksum", checksum_to_hex(info.checksum)}, {"shape", info.shape}};
  j["blobs"] = std::move(blobs);
  return j.dump(2) + "\n";
}

DatasetManifest parse_manifest(std::string_view json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text.begin(), json_text.end());
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, "index.json is not valid JSON at byte offset " + std::to_string(e.byte) +
                                ": " + e.what());
  }
  require(j.is_object(), ErrorKind::format, "index.json: top level must be an object");
  static const std::set<std::string> keys = {"dataset_name", "num_objects",   "views_per_object",
                                             "dino_dim",     "clip_dim",      "label_names",
                                             "lexicon_names", "open_set_flag", "objects",
                                             "blobs"};
  for (const auto& k : keys)
    require(j.contains(k), ErrorKind::format, "index.json: missing key '" + k + "'");
  for (const auto& item : j.items())
    require(keys.count(item.key()) == 1, ErrorKind::format,
            "index.json: unexpected key '" + item.key() + "'");

  DatasetManifest m;
  try {
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.num_objects = j.at("num_objects").get<std::size_t>();
    m.views_per_object = j.at("views_per_object").get<std::size_t>();
    m.dino_dim = j.at("dino_dim").get<std::size_t>();
    m.clip_dim = j.at("clip_dim").get<std::size_t>();
    m.label_names = j.at("label_names").get<std::vector<std::string>>();
    m.lexicon_names = j.at("lexicon_names").get<std::vector<std::string>>();
    m.open_set_flag = j.at("open_set_flag").get<bool>();
    for (const auto& o : j.at("objects")) {
      ObjectEntry e;
      e.id = o.at("id").get<std::string>();
      e.label = o.at("label").get<std::size_t>();
      e.split = parse_split(o.at("split").get<std::string>());
      m.objects.push_back(std::move(e));
    }
    for (const auto& item : j.at("blobs").items()) {
      BlobInfo info;
      info.file = item.value().at("file").get<std::string>();
      info.checksum = checksum_from_hex(item.value().at("checksum").get<std::string>());
      info.shape = item.value().at("shape").get<Shape>();
      m.blobs[item.key()] = std::move(info);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("index.json: ") + e.what());
  }
  return m;
}

std::uint64_t dataset_hash(const DatasetManifest& manifest) {
  const std::string text = serialize_manifest(manifest);
  return fnv1a64({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

// ---------------------------------------------------------------------------

std::vector<Violation> validate_manifest(const DatasetManifest& m, const BlobBytes& blobs) {
  std::vector<Violation> out;
  auto add = [&](ViolationCode code, std::string detail) { out.push_back({code, std::move(detail)}); };

  if (m.views_per_object < 1 || m.dino_dim < 1 || m.clip_dim < 1)
    add(ViolationCode::InvalidDimensions, "views_per_object, dino_dim and clip_dim must be >= 1");
  if (m.num_objects != m.objects.size())
    add(ViolationCode::ObjectCountMismatch, "num_objects=" + std::to_string(m.num_objects) +
                                                " but " + std::to_string(m.objects.size()) +
                                                " objects listed");

  std::set<std::string> ids;
  for (const auto& o : m.objects)
    if (!ids.insert(o.id).second) add(ViolationCode::DuplicateObjectId, o.id);

  std::set<std::string> names;
  for (const auto* list : {&m.label_names, &m.lexicon_names})
    for (const auto& n : *list)
      if (!names.insert(lower(n)).second) add(ViolationCode::DuplicateName, n);

  std::set<std::size_t> train_labels, query_labels, target_labels;
  for (const auto& o : m.objects) {
    if (o.label >= m.label_names.size()) {
      add(ViolationCode::LabelOutOfRange, o.id + " has label " + std::to_string(o.label));
      continue;
    }
    (o.split == Split::train ? train_labels : o.split == Split::query ? query_labels : target_labels)
        .insert(o.label);
  }
  if (m.open_set_flag) {
    for (std::size_t l : train_labels)
      if (query_labels.count(l) || target_labels.count(l))
        add(ViolationCode::OverlappingLabelSpaces, "label " + m.label_names[l] +
                                                       " appears in train and retrieval splits");
  }
  if (query_labels != target_labels)
    add(ViolationCode::QueryTargetLabelMismatch, "query and target label sets differ");

  const std::size_t text_rows = m.label_names.size() + m.lexicon_names.size();
  const std::map<std::string, Shape> expected = {
      {std::string(kDinoBlob), {m.num_objects, m.views_per_object, m.dino_dim}},
      {std::string(kClipBlob), {m.num_objects, m.views_per_object, m.clip_dim}},
      {std::string(kTextBlob), {text_rows, m.clip_dim}},
  };
  if (!m.blobs.count(std::string(kDinoBlob)))
    add(ViolationCode::MissingBlob, "index lists no dino blob");
  for (const auto& [name, info] : m.blobs) {
    auto it = expected.find(name);
    if (it == expected.end()) {
      add(ViolationCode::UnknownBlob, name);
      continue;
    }
    if (info.shape != it->second)
      add(ViolationCode::ShapeMismatch, name + " shape " + shape_to_string(info.shape) +
                                            ", expected " + shape_to_string(it->second));
    auto bytes = blobs.find(name);
    if (bytes == blobs.end()) {
      add(ViolationCode::MissingBlob, name + " (" + info.file + ")");
      continue;
    }
    const std::size_t want = shape_volume(info.shape) * 4;
    const bool size_ok = bytes->second.size() == want;
    if (!size_ok)
      add(ViolationCode::SizeMismatch, name + " has " + std::to_string(bytes->second.size()) +
                                           " bytes, expected " + std::to_string(want));
    if (fnv1a64(bytes->second) != info.checksum)
      add(ViolationCode::ChecksumMismatch, name);
    if (size_ok) {
      const Tensor values = decode_f32le(bytes->second, info.shape);
      if (!values.all_finite()) add(ViolationCode::NonFiniteValue, name);
    }
  }
  return out;
}

BlobBytes encode_blobs(Dataset& dataset) {
  BlobBytes out;
  auto& blobs = dataset.manifest.blobs;
  blobs.clear();
  auto put = [&](std::string_view name, const Tensor& t) {
    auto bytes = encode_f32le(t);
    blobs[std::string(name)] = {std::string(name) + ".f32le", fnv1a64(bytes), t.shape()};
    out[std::string(name)] = std::move(bytes);
  };
  put(kDinoBlob, dataset.dino);
  if (dataset.clip) put(kClipBlob, *dataset.clip);
  if (dataset.text) put(kTextBlob, *dataset.text);
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root) {
  const auto index_path = root / "index.json";
  require(std::filesystem::exists(index_path), ErrorKind::io,
          "no index.json in " + root.string());
  const auto index_bytes = read_file(index_path);
  Dataset ds;
  ds.manifest = parse_manifest(
      std::string_view(reinterpret_cast<const char*>(index_bytes.data()), index_bytes.size()));

  BlobBytes blobs;
  for (const auto& [name, info] : ds.manifest.blobs) {
    const std::filesystem::path rel(info.file);
    if (rel.is_absolute() || rel.filename() != rel) continue;  // reported as MissingBlob
    const auto path = root / rel;
    if (std::filesystem::is_regular_file(path)) blobs[name] = read_file(path);
  }
  auto violations = validate_manifest(ds.manifest, blobs);
  if (!violations.empty()) throw ValidationError(std::move(violations));

  const auto& info = ds.manifest.blobs;
  ds.dino = decode_f32le(blobs.at(std::string(kDinoBlob)), info.at(std::string(kDinoBlob)).shape);
  if (auto it = blobs.find(std::string(kClipBlob)); it != blobs.end())
    ds.clip = decode_f32le(it->second, info.at(it->first).shape);
  if (auto it = blobs.find(std::string(kTextBlob)); it != blobs.end())
    ds.text = decode_f32le(it->second, info.at(it->first).shape);
  return ds;
}

std::vector<Violation> save_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  Dataset copy = dataset;
  const BlobBytes blobs = encode_blobs(copy);
  auto violations = validate_manifest(copy.manifest, blobs);
  if (!violations.empty()) return violations;

  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  require(!ec, ErrorKind::io, "cannot create " + root.string() + ": " + ec.message());
  for (const auto& [name, bytes] : blobs) write_file(root / copy.manifest.blobs.at(name).file, bytes);
  const std::string index = serialize_manifest(copy.manifest);
  write_file(root / "index.json",
             {reinterpret_cast<const unsigned char*>(index.data()), index.size()});
  return {};
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> split_indices(const DatasetManifest& manifest, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.objects.size(); ++i)
    if (manifest.objects[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::size_t> object_labels(const DatasetManifest& manifest,
                                       std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(manifest.objects.at(i).label);
  return out;
}

Tensor gather_rows(const Tensor& values, std::span<const std::size_t> indices) {
  require(values.rank() >= 1, ErrorKind::shape, "gather_rows: scalar input");
  const std::size_t row = values.size() / std::max<std::size_t>(values.dim(0), 1);
  Shape shape = values.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    require(indices[r] < values.dim(0), ErrorKind::shape, "gather_rows: index out of range");
    std::copy_n(values.data() + indices[r] * row, row, out.data() + r * row);
  }
  return out;
}

// ---------------------------------------------------------------------------

SyntheticSpec SyntheticSpec::standard(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.data_seed = seed;
  spec.alignment_seed = seed + 1000;
  return spec;
}

namespace {

std::string numbered(std::string_view prefix, std::size_t i, int width = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return std::string(prefix) + buf;
}

// Orthonormal columns of a random d x r Gaussian matrix (modified Gram-Schmidt).
std::vector<std::vector<double>> random_orthonormal(std::size_t d, std::size_t r, Rng& rng) {
  std::vector<std::vector<double>> basis;
  while (basis.size() < r) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * b[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-8) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  require(spec.seen_classes >= 1 && spec.unseen_classes >= 1, ErrorKind::config,
          "synthetic spec: class counts must be >= 1");
  require(spec.objects_per_class >= 2, ErrorKind::config,
          "synthetic spec: objects_per_class must be >= 2 so every unseen class has a query and a target");
  require(spec.views >= 1 && spec.dino_dim >= 1 && spec.clip_dim >= 1, ErrorKind::config,
          "synthetic spec: views and dims must be >= 1");
  require(spec.visual_noise_sigma >= 0 && spec.view_jitter >= 0 && spec.object_noise >= 0 &&
              spec.nuisance_gain >= 0,
          ErrorKind::config, "synthetic spec: noise scales must be >= 0");
  require(spec.nuisance_rank <= spec.dino_dim, ErrorKind::config,
          "synthetic spec: nuisance_rank exceeds dino_dim");
  require(spec.lexicon_names.empty() || spec.lexicon_names.size() >= spec.lexicon_size,
          ErrorKind::config, "synthetic spec: fewer lexicon names than lexicon_size");

  const std::size_t S = spec.seen_classes, U = spec.unseen_classes, C = S + U;
  const std::size_t X = spec.lexicon_size, M = spec.views, d = spec.dino_dim, dc = spec.clip_dim;
  const std::size_t opc = spec.objects_per_class, N = C * opc;
  const double sigma = spec.visual_noise_sigma;

  Dataset ds;
  auto& m = ds.manifest;
  m.dataset_name = "synthetic-" + std::to_string(spec.data_seed);
  m.num_objects = N;
  m.views_per_object = M;
  m.dino_dim = d;
  m.clip_dim = dc;
  m.open_set_flag = true;
  for (std::size_t c = 0; c < S; ++c) m.label_names.push_back(numbered("seen_", c));
  for (std::size_t c = 0; c < U; ++c) m.label_names.push_back(numbered("unseen_", c));
  for (std::size_t x = 0; x < X; ++x)
    m.lexicon_names.push_back(spec.lexicon_names.empty() ? numbered("concept_", x)
                                                         : spec.lexicon_names[x]);

  // Alignment model: text prototypes, the map A and the nuisance basis.
  Rng arng(spec.alignment_seed);
  Tensor text({C + X, dc});
  for (std::size_t r = 0; r < C + X; ++r) {
    double n = 0.0;
    for (std::size_t k = 0; k < dc; ++k) {
      text[r * dc + k] = arng.normal();
      n += text[r * dc + k] * text[r * dc + k];
    }
    n = std::sqrt(n);
    for (std::size_t k = 0; k < dc; ++k) text[r * dc + k] /= n;
  }
  std::vector<double> A(d * dc);
  const double a_scale = 1.0 / std::sqrt(static_cast<double>(dc));
  for (auto& a : A) a = a_scale * arng.normal();
  const auto nuisance = random_orthonormal(d, spec.nuisance_rank, arng);

  const std::size_t queries_per_class = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(opc))), 1, opc - 1);

  Rng rng(spec.data_seed);
  ds.dino = Tensor({N, M, d});
  ds.clip = Tensor({N, M, dc});
  std::vector<double> object_offset(d), latent(spec.nuisance_rank), clip_view(dc);
  std::size_t n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < opc; ++i, ++n) {
      Split split = Split::train;
      if (c >= S) split = i < queries_per_class ? Split::query : Split::target;
      m.objects.push_back({numbered("obj_", n, 5), c, split});

      for (std::size_t k = 0; k < d; ++k) object_offset[k] = sigma * spec.object_noise * rng.normal();
      for (auto& z : latent) z = rng.normal();
      for (std::size_t r = 0; r < spec.nuisance_rank; ++r)
        for (std::size_t k = 0; k < d; ++k)
          object_offset[k] += sigma * spec.nuisance_gain * nuisance[r][k] * latent[r];

      for (std::size_t v = 0; v < M; ++v) {
        for (std::size_t k = 0; k < dc; ++k) clip_view[k] = text[c * dc + k] + sigma * rng.normal();
        double* clip_out = ds.clip->data() + (n * M + v) * dc;
        std::copy(clip_view.begin(), clip_view.end(), clip_out);
        double* dino_out = ds.dino.data() + (n * M + v) * d;
        for (std::size_t k = 0; k < d; ++k) {
          double s = 0.0;
          for (std::size_t j = 0; j < dc; ++j) s += A[k * dc + j] * clip_view[j];
          dino_out[k] = s + object_offset[k] + spec.view_jitter * rng.normal();
        }
      }
    }
  }
  ds.dino = round_to_f32(ds.dino);
  ds.clip = round_to_f32(*ds.clip);
  ds.text = round_to_f32(text);
  encode_blobs(ds);
  return ds;
}

}  // namespace mvret
