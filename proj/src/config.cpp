#include "mvret/config.hpp"

#include <optional>
#include <set>

#include "json_util.hpp"
#include "mvret/dataset.hpp"
#include "mvret/vfs.hpp"

namespace mvret {

namespace {

using detail::ordered_json;

const ordered_json& typed(const ordered_json& v, bool ok, const char* key, const char* what) {
  require(ok, ErrorKind::config, std::string("config key '") + key + "' must be " + what);
  return v;
}

struct Reader {
  const ordered_json& j;

  const ordered_json* find(const char* key) const {
    auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
  }
  void count(const char* key, std::size_t& out) const {
    if (auto* v = find(key)) out = typed(*v, v->is_number_unsigned(), key, "a non-negative integer").get<std::size_t>();
  }
  void seed(const char* key, std::uint64_t& out) const {
    if (auto* v = find(key)) out = typed(*v, v->is_number_unsigned(), key, "a non-negative integer").get<std::uint64_t>();
  }
  void real(const char* key, double& out) const {
    if (auto* v = find(key)) out = typed(*v, v->is_number(), key, "a number").get<double>();
  }
  void flag(const char* key, bool& out) const {
    if (auto* v = find(key)) out = typed(*v, v->is_boolean(), key, "true or false").get<bool>();
  }
  void text(const char* key, std::string& out) const {
    if (auto* v = find(key)) out = typed(*v, v->is_string(), key, "a string").get<std::string>();
  }
  std::optional<std::string> text(const char* key) const {
    std::optional<std::string> out;
    if (find(key)) text(key, out.emplace());
    return out;
  }
};

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const ordered_json defaults = ordered_json::parse(serialize_run_config({}));
    for (const auto& [key, _] : defaults.items()) k.insert(key);
    k.insert("config_hash");  // written beside outputs; ignored on input
    return k;
  }();
  return keys;
}

}  // namespace

void RunConfig::validate() const {
  CamConfig cc = cam;
  if (cc.dino_dim == 0) cc.dino_dim = 1;  // taken from the dataset at run time
  cc.validate();
  train_config().validate();
  require(vfs.E >= 1, ErrorKind::config, "config: vfs_E must be >= 1");
  require(vfs.align_weight >= 0.0, ErrorKind::config, "config: vfs_align_weight must be >= 0");
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

std::string serialize_run_config(const RunConfig& c) {
  ordered_json j;
  j["data"] = c.data;
  j["data_eval"] = c.data_eval;
  j["model"] = c.model;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["synth_seed"] = c.synth_seed;
  j["views"] = c.views;
  j["adapter"] = std::string(to_string(c.adapter));
  j["chunk_size"] = c.cam.chunk_size;
  j["conv_stride"] = c.cam.conv_stride;
  j["pool_kernel"] = c.cam.pool_kernel;
  j["pool_mode"] = std::string(detail::pool_mode_name(c.cam.pool_mode));
  j["num_cbr_blocks"] = c.cam.num_cbr_blocks;
  j["lambda"] = c.cam.lambda;
  j["normalize_descriptor"] = c.cam.normalize_descriptor;
  j["bn_momentum"] = c.cam.bn_momentum;
  j["bn_eps"] = c.cam.bn_eps;
  j["lr_adapter"] = c.train.lr_adapter;
  j["lr_vfs"] = c.train.lr_vfs;
  j["momentum"] = c.train.momentum;
  j["weight_decay"] = c.train.weight_decay;
  j["epochs"] = c.train.epochs;
  j["milestones"] = c.train.milestones;
  j["gamma"] = c.train.gamma;
  j["classes_per_batch"] = c.train.classes_per_batch;
  j["instances_per_class"] = c.train.instances_per_class;
  j["few_shot_limit"] = c.train.few_shot_limit ? ordered_json(*c.train.few_shot_limit) : ordered_json();
  j["ms_alpha"] = c.train.loss.alpha;
  j["ms_beta"] = c.train.loss.beta;
  j["ms_lambda"] = c.train.loss.lambda_thresh;
  j["ms_margin"] = c.train.loss.margin;
  j["vfs_enabled"] = c.train.vfs_enabled;
  j["vfs_E"] = c.vfs.E;
  j["vfs_selection"] = std::string(to_string(c.vfs.mode));
  j["vfs_align_weight"] = c.vfs.align_weight;
  j["vfs_hidden"] = c.vfs.hidden;
  j["lexicon_path"] = c.lexicon_path;
  j["anmrr_variant"] = std::string(to_string(c.anmrr_variant));
  j["recall_k"] = c.recall_k;
  return j.dump(2) + "\n";
}

RunConfig parse_run_config(std::string_view text, RunConfig c) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::format, std::string("config: ") + e.what());
  }
  require(j.is_object(), ErrorKind::config, "config: top level must be an object");
  for (const auto& [key, _] : j.items())
    require(known_keys().count(key) == 1, ErrorKind::config, "config: unknown key '" + key + "'");

  const Reader r{j};
  r.text("data", c.data);
  r.text("data_eval", c.data_eval);
  r.text("model", c.model);
  r.text("out", c.out);
  r.seed("seed", c.seed);
  r.seed("synth_seed", c.synth_seed);
  r.count("views", c.views);
  if (auto v = r.text("adapter")) c.adapter = parse_adapter_kind(*v);
  r.count("chunk_size", c.cam.chunk_size);
  r.count("conv_stride", c.cam.conv_stride);
  r.count("pool_kernel", c.cam.pool_kernel);
  if (auto v = r.text("pool_mode")) c.cam.pool_mode = detail::parse_pool_mode(*v);
  r.count("num_cbr_blocks", c.cam.num_cbr_blocks);
  r.real("lambda", c.cam.lambda);
  r.flag("normalize_descriptor", c.cam.normalize_descriptor);
  r.real("bn_momentum", c.cam.bn_momentum);
  r.real("bn_eps", c.cam.bn_eps);
  r.real("lr_adapter", c.train.lr_adapter);
  r.real("lr_vfs", c.train.lr_vfs);
  r.real("momentum", c.train.momentum);
  r.real("weight_decay", c.train.weight_decay);
  r.count("epochs", c.train.epochs);
  if (auto* v = r.find("milestones")) {
    typed(*v, v->is_array(), "milestones", "a list of epochs");
    c.train.milestones.clear();
    for (const auto& e : *v)
      c.train.milestones.push_back(
          typed(e, e.is_number_unsigned(), "milestones", "a list of epochs").get<std::size_t>());
  }
  r.real("gamma", c.train.gamma);
  r.count("classes_per_batch", c.train.classes_per_batch);
  r.count("instances_per_class", c.train.instances_per_class);
  if (auto* v = r.find("few_shot_limit")) {
    if (v->is_null()) {
      c.train.few_shot_limit.reset();
    } else {
      c.train.few_shot_limit =
          typed(*v, v->is_number_unsigned(), "few_shot_limit", "null or a positive integer").get<std::size_t>();
    }
  }
  r.real("ms_alpha", c.train.loss.alpha);
  r.real("ms_beta", c.train.loss.beta);
  r.real("ms_lambda", c.train.loss.lambda_thresh);
  r.real("ms_margin", c.train.loss.margin);
  r.flag("vfs_enabled", c.train.vfs_enabled);
  r.count("vfs_E", c.vfs.E);
  if (auto v = r.text("vfs_selection")) c.vfs.mode = parse_selection_mode(*v);
  r.real("vfs_align_weight", c.vfs.align_weight);
  r.count("vfs_hidden", c.vfs.hidden);
  r.text("lexicon_path", c.lexicon_path);
  if (auto v = r.text("anmrr_variant")) c.anmrr_variant = parse_anmrr_variant(*v);
  r.count("recall_k", c.recall_k);
  return c;
}

std::uint64_t config_hash(const RunConfig& config) {
  RunConfig c = config;
  c.out.clear();
  const std::string text = serialize_run_config(c);
  return fnv1a64({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

}  // namespace mvret
