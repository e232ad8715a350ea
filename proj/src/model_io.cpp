#include <bit>
#include <fstream>
#include <iterator>
#include <map>

#include "json_util.hpp"
#include "mvret/dataset.hpp"
#include "mvret/error.hpp"
#include "mvret/training.hpp"

namespace mvret {

namespace {

constexpr const char* kParamsJson = "params.json";
constexpr const char* kParamsData = "params.f64le";

// Every persisted tensor in file order; running BN statistics included.
std::vector<std::pair<std::string, const Tensor*>> layout(const Model& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const ParamBlock* p : m.params()) out.emplace_back(p->name, &p->value);
  for (std::size_t i = 0; i < m.cam.blocks.size(); ++i) {
    const std::string prefix = "cam.block" + std::to_string(i) + ".bn.";
    out.emplace_back(prefix + "running_mean", &m.cam.blocks[i].running_mean);
    out.emplace_back(prefix + "running_var", &m.cam.blocks[i].running_var);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> mutable_layout(Model& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (ParamBlock* p : m.params()) out.emplace_back(p->name, &p->value);
  for (std::size_t i = 0; i < m.cam.blocks.size(); ++i) {
    const std::string prefix = "cam.block" + std::to_string(i) + ".bn.";
    out.emplace_back(prefix + "running_mean", &m.cam.blocks[i].running_mean);
    out.emplace_back(prefix + "running_var", &m.cam.blocks[i].running_var);
  }
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed: " + p.string());
}

}  // namespace

void save_model(const Model& model, const std::filesystem::path& dir, const std::string& meta_json) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());

  std::string data;
  detail::ordered_json tensors = detail::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : layout(model)) {
    detail::ordered_json e;
    e["name"] = name;
    e["shape"] = t->shape();
    e["offset"] = offset;
    tensors.push_back(e);
    for (double v : t->storage()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) data.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
    offset += t->size();
  }

  detail::ordered_json j;
  j["format"] = "mvret-params";
  j["version"] = 1;
  j["adapter"] = std::string(to_string(model.adapter));
  j["cam_config"] = detail::cam_config_to_json(model.cam_config);
  j["vfs"] = model.vfs.has_value();
  j["data_file"] = kParamsData;
  j["checksum"] = checksum_to_hex(
      fnv1a64({reinterpret_cast<const unsigned char*>(data.data()), data.size()}));
  j["tensors"] = tensors;
  j["meta"] = detail::ordered_json::parse(meta_json);
  write_file(dir / kParamsData, data);
  write_file(dir / kParamsJson, j.dump(2) + "\n");
}

Model load_model(const std::filesystem::path& dir) {
  detail::ordered_json j;
  try {
    j = detail::ordered_json::parse(read_file(dir / kParamsJson));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, "params.json: " + std::string(e.what()));
  }
  const std::string data = read_file(dir / kParamsData);
  try {
    require(j.at("format") == "mvret-params" && j.at("version") == 1, ErrorKind::format,
            "params.json: not an mvret parameter file");
    require(checksum_to_hex(fnv1a64({reinterpret_cast<const unsigned char*>(data.data()),
                                     data.size()})) == j.at("checksum").get<std::string>(),
            ErrorKind::format, "params.f64le: checksum mismatch");
    CamConfig cc;
    detail::cam_config_from_json(j.at("cam_config"), cc);
    std::map<std::string, std::pair<Shape, std::size_t>> entries;
    for (const auto& e : j.at("tensors"))
      entries[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(),
                                                   e.at("offset").get<std::size_t>()};

    std::size_t clip_dim = 0;
    VfsConfig vc;
    if (j.at("vfs").get<bool>()) {
      auto it = entries.find("vfs.psi.fc1.weight");
      require(it != entries.end() && it->second.first.size() == 2, ErrorKind::format,
              "params.json: missing vfs.psi.fc1.weight");
      vc.hidden = it->second.first[0];
      clip_dim = it->second.first[1];
    }
    Model m = init_model(parse_adapter_kind(j.at("adapter").get<std::string>()), cc, clip_dim, vc, 0);
    const std::size_t total = data.size() / 8;
    require(data.size() % 8 == 0, ErrorKind::format, "params.f64le: size is not a multiple of 8");
    for (auto& [name, t] : mutable_layout(m)) {
      auto it = entries.find(name);
      require(it != entries.end(), ErrorKind::format, "params.json: missing tensor " + name);
      require(it->second.first == t->shape(), ErrorKind::format,
              "params.json: shape mismatch for " + name);
      const std::size_t off = it->second.second;
      require(off + t->size() <= total, ErrorKind::format, "params.f64le: truncated at " + name);
      for (std::size_t i = 0; i < t->size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
          bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[(off + i) * 8 + b])) << (8 * b);
        (*t)[i] = std::bit_cast<double>(bits);
      }
    }
    require(entries.size() == mutable_layout(m).size(), ErrorKind::format,
            "params.json: unexpected extra tensors");
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "params.json: " + std::string(e.what()));
  }
}

}  // namespace mvret
