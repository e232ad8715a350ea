#include "mvret/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json_util.hpp"
#include "mvret/config.hpp"
#include "mvret/dataset.hpp"
#include "mvret/retrieval.hpp"
#include "mvret/training.hpp"
#include "mvret/vfs.hpp"

#ifndef MVRET_LEXICON_FILE
#define MVRET_LEXICON_FILE ""
#endif

namespace mvret {

namespace {

namespace fs = std::filesystem;
using detail::ordered_json;

// Raw flag values; `given` decides whether they override the config file.
struct Flags {
  std::string config, data, data_eval, model, out, adapter, lexicon, metric_variant, selection;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  std::size_t shots = 0, epochs = 0, E = 0, views = 0, recall_k = 0;
  bool no_vfs = false;
  std::string spec = "default", axis, values, seeds;
  std::vector<std::string> runs;
};

struct Io {
  std::ostream& out;
  std::ostream& err;

  void warn(const std::string& message) const {
    ordered_json j;
    j["warning"] = message;
    err << j.dump() << "\n";
  }
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream o(path, std::ios::binary);
  require(static_cast<bool>(o), ErrorKind::io, "cannot write " + path.string());
  o << text;
  o.close();
  require(!o.fail(), ErrorKind::io, "cannot write " + path.string());
}

std::string hex(std::uint64_t h) { return checksum_to_hex(h); }

fs::path prepare_out(const RunConfig& c) {
  require(!c.out.empty(), ErrorKind::config, "--out is required");
  fs::create_directories(c.out);
  return c.out;
}

void write_run_config(const fs::path& dir, const RunConfig& c) {
  ordered_json j = ordered_json::parse(serialize_run_config(c));
  j["config_hash"] = hex(config_hash(c));
  write_text(dir / "run_config.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Data

SyntheticSpec fixture_spec(const std::string& name, std::uint64_t seed, const Io& io) {
  SyntheticSpec s = SyntheticSpec::standard(seed);
  if (name == "small") {
    s.seen_classes = 6;
    s.unseen_classes = 6;
    s.objects_per_class = 12;
    s.views = 12;
    s.dino_dim = 16;
    s.clip_dim = 8;
    s.nuisance_rank = 4;
    s.lexicon_size = 40;
  } else {
    require(name == "default", ErrorKind::config, "unknown --spec '" + name + "' (default|small)");
  }
  const fs::path names = MVRET_LEXICON_FILE;
  if (!names.empty() && fs::exists(names)) {
    auto lexicon = load_lexicon(names);
    if (lexicon.size() >= s.lexicon_size) {
      lexicon.resize(s.lexicon_size);
      s.lexicon_names = std::move(lexicon);
      return s;
    }
  }
  io.warn("lexicon name list not found; using numbered concept names");
  return s;
}

// Evenly spaced subset of `keep` views out of M.
Dataset take_views(Dataset ds, std::size_t keep) {
  const std::size_t M = ds.manifest.views_per_object;
  if (keep == 0 || keep == M) return ds;
  require(keep <= M, ErrorKind::config,
          "views=" + std::to_string(keep) + " exceeds the dataset's " + std::to_string(M));
  auto subset = [&](const Tensor& t) {
    const std::size_t N = t.dim(0), w = t.dim(2);
    Tensor out({N, keep, w});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t v = 0; v < keep; ++v)
        std::copy_n(t.data() + (n * M + v * M / keep) * w, w, out.data() + (n * keep + v) * w);
    return out;
  };
  ds.dino = subset(ds.dino);
  if (ds.clip) ds.clip = subset(*ds.clip);
  ds.manifest.views_per_object = keep;
  encode_blobs(ds);  // refresh shapes and checksums so the dataset hash tracks the subset
  return ds;
}

Dataset load_data(const RunConfig& c, const std::string& path, const Io& io) {
  Dataset ds = path.empty() ? generate_synthetic_dataset(fixture_spec("default", c.synth_seed, io))
                            : load_dataset(path);
  return take_views(std::move(ds), c.views);
}

VfsConfig vfs_config(const RunConfig& c) {
  VfsConfig v = c.vfs;
  if (!c.lexicon_path.empty()) v.lexicon = load_lexicon(c.lexicon_path);
  return v;
}

EvalOptions eval_options(const RunConfig& c) {
  EvalOptions o;
  o.anmrr_variant = c.anmrr_variant;
  if (c.recall_k > 0) o.recall_k = c.recall_k;
  o.config_hash = config_hash(c);
  o.seed = c.seed;
  return o;
}

MetricsReport evaluate_model(const Model& model, const Dataset& ds, const RunConfig& c) {
  require(ds.manifest.dino_dim == model.cam_config.dino_dim, ErrorKind::validation,
          "model expects dino_dim " + std::to_string(model.cam_config.dino_dim) +
              ", dataset has " + std::to_string(ds.manifest.dino_dim));
  return evaluate_retrieval(describe(model, ds.dino), ds.manifest, eval_options(c));
}

std::string model_meta(const RunConfig& c, const Dataset& ds) {
  ordered_json j;
  j["config_hash"] = hex(config_hash(c));
  j["dataset_hash"] = hex(dataset_hash(ds.manifest));
  return j.dump();
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const RunConfig& c, const std::string& spec, const Io& io) {
  const fs::path out = prepare_out(c);
  const Dataset ds = generate_synthetic_dataset(fixture_spec(spec, c.synth_seed, io));
  auto violations = save_dataset(ds, out);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  write_run_config(out, c);
  io.out << "synth: " << ds.manifest.num_objects << " objects -> " << out.string() << " dataset_hash "
         << hex(dataset_hash(ds.manifest)) << "\n";
  return 0;
}

void print_metrics(const Io& io, const char* what, const MetricsReport& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%s: mAP %.4f NDCG %.4f ANMRR %.4f over %zu queries\n", what, r.map,
                r.ndcg, r.anmrr, r.num_queries);
  io.out << line;
}

int cmd_baseline(const RunConfig& c, const Io& io) {
  const fs::path out = prepare_out(c);
  const Dataset ds = load_data(c, c.data_eval.empty() ? c.data : c.data_eval, io);
  const auto report = evaluate_retrieval(mean_pool_descriptors(ds), ds.manifest, eval_options(c));
  write_text(out / "metrics.json", serialize_metrics_report(report));
  write_run_config(out, c);
  print_metrics(io, "baseline", report);
  return 0;
}

int cmd_train(const RunConfig& c, const Io& io) {
  const fs::path out = prepare_out(c);
  const Dataset ds = load_data(c, c.data, io);
  auto result = fit(ds, c.adapter, c.cam, c.train_config(), vfs_config(c));
  for (const auto& w : result.warnings) io.warn(w);
  save_model(result.model, out / "model", model_meta(c, ds));
  write_text(out / "train_log.jsonl", serialize_training_log(result.log));
  const auto report = c.data_eval.empty() ? evaluate_model(result.model, ds, c)
                                          : evaluate_model(result.model, load_data(c, c.data_eval, io), c);
  write_text(out / "metrics.json", serialize_metrics_report(report));
  write_run_config(out, c);
  print_metrics(io, "train", report);
  return 0;
}

int cmd_eval(const RunConfig& c, const Io& io) {
  require(!c.model.empty(), ErrorKind::config, "eval: --model is required");
  const fs::path out = prepare_out(c);
  const Model model = load_model(c.model);
  const auto report = evaluate_model(model, load_data(c, c.data_eval.empty() ? c.data : c.data_eval, io), c);
  write_text(out / "metrics.json", serialize_metrics_report(report));
  write_run_config(out, c);
  print_metrics(io, "eval", report);
  return 0;
}

int cmd_bound(const RunConfig& c, const Io& io) {
  require(!c.model.empty(), ErrorKind::config, "bound: --model is required");
  const fs::path out = prepare_out(c);
  const Model model = load_model(c.model);
  require(model.vfs.has_value(), ErrorKind::unavailable, "bound: model has no VFS parameters");
  const Dataset ds = load_data(c, c.data, io);
  const BoundReport r = bound_report(*model.vfs, ds);
  ordered_json j;
  j["config_hash"] = hex(config_hash(c));
  j["dataset_hash"] = hex(dataset_hash(ds.manifest));
  j["lipschitz_estimate"] = r.lipschitz_estimate;
  j["sigma_sq"] = r.sigma_sq;
  j["bound"] = r.bound;
  j["median_deviation"] = r.median_deviation;
  j["slack"] = r.slack;
  j["violation_rate"] = r.violation_rate;
  j["expansion_max_residual"] = r.expansion_max_residual;
  ordered_json per = ordered_json::array();
  for (std::size_t i = 0; i < r.deviations.size(); ++i)
    per.push_back({{"class", r.unseen_names[i]}, {"deviation", r.deviations[i]}});
  j["deviations"] = per;
  write_text(out / "bound.json", j.dump(2) + "\n");
  write_run_config(out, c);
  char line[200];
  std::snprintf(line, sizeof line, "bound: median %.4f vs L*s2 %.4f, violation rate %.3f\n",
                r.median_deviation, r.bound, r.violation_rate);
  io.out << line;
  return 0;
}

// --- sweep -----------------------------------------------------------------

const std::vector<std::pair<std::string, std::string>>& sweep_axes() {
  static const std::vector<std::pair<std::string, std::string>> axes{
      {"lambda", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"},
      {"chunk_size", "1,3,5,7"},
      {"stride", "1,2,3"},
      {"E", "10,20,40,80"},
      {"shots", "1,2,4,8"},
      {"views", "6,12,24"},
      {"blocks", "1,2"},
  };
  return axes;
}

std::vector<std::string> split_list(const std::string& text, const char* what) {
  std::vector<std::string> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    require(!item.empty(), ErrorKind::config, std::string("empty entry in ") + what);
    out.push_back(item);
  }
  require(!out.empty(), ErrorKind::config, std::string(what) + " is empty");
  return out;
}

double parse_real(const std::string& s, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == s.size() && !s.empty(), ErrorKind::config, std::string("bad ") + what + " '" + s + "'");
  return v;
}

std::uint64_t parse_count(const std::string& s, const char* what) {
  require(!s.empty() && s.find_first_not_of("0123456789") == std::string::npos, ErrorKind::config,
          std::string("bad ") + what + " '" + s + "' (expected a non-negative integer)");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    fail(ErrorKind::config, std::string("bad ") + what + " '" + s + "'");
  }
}

// Applies one grid value; returns its canonical spelling for the CSV.
std::string apply_axis(RunConfig& c, const std::string& axis, const std::string& value) {
  if (axis == "lambda") {
    c.cam.lambda = parse_real(value, "lambda value");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", c.cam.lambda);
    return buf;
  }
  const std::size_t n = parse_count(value, "sweep value");
  if (axis == "chunk_size") c.cam.chunk_size = n;
  else if (axis == "stride") c.cam.conv_stride = n;
  else if (axis == "E") c.vfs.E = n;
  else if (axis == "shots") c.train.few_shot_limit = n;
  else if (axis == "views") c.views = n;
  else if (axis == "blocks") c.cam.num_cbr_blocks = n;
  if (axis == "stride" || axis == "shots" || axis == "views")
    require(n >= 1, ErrorKind::config, axis + " must be >= 1");
  return std::to_string(n);
}

int cmd_sweep(const RunConfig& c, const std::string& axis, const std::string& values_text,
              const std::string& seeds_text, const Io& io) {
  std::string defaults;
  for (const auto& [name, grid] : sweep_axes())
    if (name == axis) defaults = grid;
  if (defaults.empty()) {
    std::string names;
    for (const auto& [name, _] : sweep_axes()) names += (names.empty() ? "" : "|") + name;
    fail(ErrorKind::config, "unknown --axis '" + axis + "' (" + names + ")");
  }
  const auto values = split_list(values_text.empty() ? defaults : values_text, "--values");
  std::vector<std::uint64_t> seeds{c.seed};
  if (!seeds_text.empty()) {
    seeds.clear();
    for (const auto& s : split_list(seeds_text, "--seeds")) seeds.push_back(parse_count(s, "seed"));
  }

  // Validate the whole grid before any training starts.
  std::vector<std::pair<RunConfig, std::string>> grid;
  for (const auto& v : values)
    for (std::uint64_t seed : seeds) {
      RunConfig p = c;
      p.seed = seed;
      const std::string label = apply_axis(p, axis, v);
      p.validate();
      grid.emplace_back(std::move(p), label);
    }

  const fs::path out = prepare_out(c);
  // The views axis subsets per grid point, so it starts from every view.
  RunConfig full = c;
  if (axis == "views") full.views = 0;
  const Dataset base = load_data(full, c.data, io);
  const bool cross = !c.data_eval.empty();
  std::optional<Dataset> eval_base;
  if (cross) eval_base = load_data(full, c.data_eval, io);

  std::string csv = "axis,value,seed,map,ndcg,anmrr,num_queries,config_hash\n";
  for (const auto& [p, label] : grid) {
    const Dataset train = axis == "views" ? take_views(base, p.views) : base;
    auto result = fit(train, p.adapter, p.cam, p.train_config(), vfs_config(p));
    for (const auto& w : result.warnings) io.warn(w);
    const auto report = evaluate_model(result.model, cross ? take_views(*eval_base, p.views) : train, p);
    char row[256];
    std::snprintf(row, sizeof row, "%s,%s,%llu,%.6f,%.6f,%.6f,%zu,%s\n", axis.c_str(), label.c_str(),
                  static_cast<unsigned long long>(p.seed), report.map, report.ndcg, report.anmrr,
                  report.num_queries, hex(config_hash(p)).c_str());
    csv += row;
    io.out << row;
  }
  write_text(out / ("sweep_" + axis + ".csv"), csv);
  write_run_config(out, c);
  io.warn("no plotting backend; wrote CSV only");
  return 0;
}

// --- report ----------------------------------------------------------------

int cmd_report(const RunConfig& c, const std::vector<std::string>& runs, const Io& io) {
  require(!runs.empty(), ErrorKind::config, "report: no run directories given");
  std::vector<MetricsReport> reports;
  for (const auto& run : runs) reports.push_back(parse_metrics_report(read_text(fs::path(run) / "metrics.json")));
  for (std::size_t i = 1; i < reports.size(); ++i)
    require(reports[i].dataset_hash == reports[0].dataset_hash, ErrorKind::validation,
            "report: dataset hash mismatch (" + runs[0] + " has " + hex(reports[0].dataset_hash) + ", " +
                runs[i] + " has " + hex(reports[i].dataset_hash) + ")");

  const fs::path out = prepare_out(c);
  ordered_json j;
  j["config_hash"] = hex(config_hash(c));
  j["dataset_hash"] = hex(reports[0].dataset_hash);
  ordered_json rows = ordered_json::array();
  std::string csv = "run,config_hash,map,ndcg,anmrr,num_queries\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = reports[i];
    ordered_json row;
    row["run"] = runs[i];
    row["config_hash"] = hex(r.config_hash);
    row["map"] = r.map;
    row["ndcg"] = r.ndcg;
    row["anmrr"] = r.anmrr;
    row["num_queries"] = r.num_queries;
    rows.push_back(row);
    char line[512];
    std::snprintf(line, sizeof line, "%s,%s,%.6f,%.6f,%.6f,%zu\n", runs[i].c_str(),
                  hex(r.config_hash).c_str(), r.map, r.ndcg, r.anmrr, r.num_queries);
    csv += line;
  }
  j["runs"] = rows;
  write_text(out / "summary.json", j.dump(2) + "\n");
  write_text(out / "summary.csv", csv);
  write_run_config(out, c);
  io.out << "report: merged " << runs.size() << " runs -> " << (out / "summary.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

RunConfig resolve(const CLI::App& sub, const Flags& f, bool seed_is_data_seed) {
  RunConfig c;
  if (!f.config.empty()) c = parse_run_config(read_text(f.config));
  auto given = [&](const char* name) {
    const CLI::Option* o = sub.get_option_no_throw(name);
    return o != nullptr && o->count() > 0;
  };
  if (given("--data")) c.data = f.data;
  if (given("--data-eval")) c.data_eval = f.data_eval;
  if (given("--model")) c.model = f.model;
  if (given("--out")) c.out = f.out;
  if (given("--seed")) (seed_is_data_seed ? c.synth_seed : c.seed) = f.seed;
  if (given("--adapter")) c.adapter = parse_adapter_kind(f.adapter);
  if (given("--no-vfs")) c.train.vfs_enabled = false;
  if (given("--lambda")) c.cam.lambda = f.lambda;
  if (given("--shots")) c.train.few_shot_limit = f.shots;
  if (given("--epochs")) c.train.epochs = f.epochs;
  if (given("--E")) c.vfs.E = f.E;
  if (given("--selection")) c.vfs.mode = parse_selection_mode(f.selection);
  if (given("--lexicon")) c.lexicon_path = f.lexicon;
  if (given("--views")) c.views = f.views;
  if (given("--recall-k")) c.recall_k = f.recall_k;
  if (given("--metric-variant")) {
    const std::string prefix = "anmrr=";
    require(f.metric_variant.rfind(prefix, 0) == 0, ErrorKind::config,
            "--metric-variant expects anmrr=gtm|2ng, got '" + f.metric_variant + "'");
    c.anmrr_variant = parse_anmrr_variant(f.metric_variant.substr(prefix.size()));
  }
  c.validate();
  return c;
}

void error_line(std::ostream& err, std::string_view kind, const std::string& message) {
  ordered_json j;
  j["error"] = std::string(kind);
  j["message"] = message;
  err << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
}

}  // namespace

int exit_code_for(ErrorKind kind) { return kind == ErrorKind::io ? 2 : 1; }

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-set multi-view 3D retrieval over precomputed embeddings", "mvret"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "RunConfig JSON; flags override its keys");
    s->add_option("--out", f.out, "Output directory");
    s->add_option("--metric-variant", f.metric_variant, "anmrr=gtm|2ng");
    s->add_option("--recall-k", f.recall_k, "Also report recall@k");
    s->add_option("--views", f.views, "Use an evenly spaced subset of views");
  };
  auto data = [&](CLI::App* s) {
    s->add_option("--data", f.data, "Dataset directory (default: the synthetic fixture)");
    s->add_option("--data-eval", f.data_eval, "Evaluate on this dataset instead");
    s->add_option("--seed", f.seed, "Training seed");
  };
  auto training = [&](CLI::App* s) {
    s->add_option("--adapter", f.adapter, "cam|mlp");
    s->add_flag("--no-vfs", f.no_vfs, "Train the adapter alone");
    s->add_option("--lambda", f.lambda, "GAP weight in the fused descriptor");
    s->add_option("--shots", f.shots, "Train objects per class");
    s->add_option("--epochs", f.epochs, "Training epochs");
    s->add_option("--E", f.E, "Concepts per virtual batch");
    s->add_option("--selection", f.selection, "random_e|top_e");
    s->add_option("--lexicon", f.lexicon, "Restrict the lexicon to the names in this file");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  common(synth);
  synth->add_option("--spec", f.spec, "default|small");
  synth->add_option("--seed", f.seed, "Data seed (default 42)");
  auto* baseline = app.add_subcommand("baseline", "Evaluate mean-pooled descriptors");
  common(baseline);
  data(baseline);
  auto* train = app.add_subcommand("train", "Fit an adapter, save parameters, log and metrics");
  common(train);
  data(train);
  training(train);
  auto* eval = app.add_subcommand("eval", "Evaluate saved parameters");
  common(eval);
  data(eval);
  eval->add_option("--model", f.model, "Parameter directory written by train");
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate over a grid on one axis");
  common(sweep);
  data(sweep);
  training(sweep);
  sweep->add_option("--axis", f.axis, "lambda|chunk_size|stride|E|shots|views|blocks")->required();
  sweep->add_option("--values", f.values, "Comma-separated grid (default per axis)");
  sweep->add_option("--seeds", f.seeds, "Comma-separated training seeds");
  auto* bound = app.add_subcommand("bound", "Generalization-bound diagnostic of a VFS model");
  common(bound);
  data(bound);
  bound->add_option("--model", f.model, "Parameter directory written by train");
  auto* report = app.add_subcommand("report", "Merge metrics of several runs");
  common(report);
  report->add_option("runs", f.runs, "Run directories holding metrics.json");

  const Io io{out, err};
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (*synth) return cmd_synth(resolve(*synth, f, true), f.spec, io);
    if (*baseline) return cmd_baseline(resolve(*baseline, f, false), io);
    if (*train) return cmd_train(resolve(*train, f, false), io);
    if (*eval) return cmd_eval(resolve(*eval, f, false), io);
    if (*sweep) return cmd_sweep(resolve(*sweep, f, false), f.axis, f.values, f.seeds, io);
    if (*bound) return cmd_bound(resolve(*bound, f, false), io);
    if (*report) return cmd_report(resolve(*report, f, false), f.runs, io);
    return 1;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);  // --help
    error_line(err, "usage", e.what());
    return 1;
  } catch (const Error& e) {
    error_line(err, to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    error_line(err, "io", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    error_line(err, "format", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line(err, "internal", e.what());
    return 1;
  }
}

}  // namespace mvret
