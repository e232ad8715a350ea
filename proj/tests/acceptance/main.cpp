// Acceptance run: one PASS/FAIL line per criterion. Arguments select a subset
// of criteria by number (default: all). Exit status is nonzero if any fail.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_suite.hpp"
#include "mvret/cli.hpp"
#include "mvret/dataset.hpp"
#include "mvret/numerics.hpp"
#include "mvret/retrieval.hpp"
#include "mvret/training.hpp"
#include "mvret/vfs.hpp"
#include "oracles/naive_metrics.hpp"
#include "support.hpp"

using namespace mvret;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Shared across criteria: the standard fixture and the models trained on it.
struct Fixture {
  std::optional<Dataset> standard;
  std::optional<double> baseline_map;
  std::map<double, double> cam_map_by_lambda;  // CAM-only fits
  std::optional<FitResult> cam_vfs;
  std::optional<double> cam_vfs_map;

  const Dataset& data() {
    if (!standard) standard = generate_synthetic_dataset(SyntheticSpec::standard(42));
    return *standard;
  }
  double baseline() {
    if (!baseline_map) baseline_map = evaluate_retrieval(mean_pool_descriptors(data()), data().manifest).map;
    return *baseline_map;
  }
  double cam_only(double lambda) {
    auto it = cam_map_by_lambda.find(lambda);
    if (it != cam_map_by_lambda.end()) return it->second;
    CamConfig cc;
    cc.lambda = lambda;
    TrainConfig tc;
    tc.vfs_enabled = false;
    const auto r = fit(data(), AdapterKind::cam, cc, tc, VfsConfig{});
    const double m = evaluate_retrieval(describe(r.model, data().dino), data().manifest).map;
    cam_map_by_lambda[lambda] = m;
    return m;
  }
  const FitResult& with_vfs() {
    if (!cam_vfs) {
      cam_vfs = fit(data(), AdapterKind::cam, CamConfig{}, TrainConfig{}, VfsConfig{});
      cam_vfs_map = evaluate_retrieval(describe(cam_vfs->model, data().dino), data().manifest).map;
    }
    return *cam_vfs;
  }
};

int cli(std::vector<std::string> args, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

// ---------------------------------------------------------------------------

RankedList list_from(const std::vector<int>& flags) {
  RankedList r;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    r.order.push_back(i);
    r.relevant.push_back(flags[i] != 0);
    r.ng += flags[i] != 0;
  }
  return r;
}

Outcome metric_oracle(Fixture&) {
  const auto t0 = Clock::now();
  Rng rng(31337);
  double worst = 0.0;
  std::size_t rankings = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t n_lists = 1 + rng.index(4);
    std::vector<std::vector<int>> flags;
    std::vector<RankedList> lists;
    int gtm = 0;
    for (std::size_t l = 0; l < n_lists; ++l) {
      const std::size_t n = 1 + rng.index(50);
      const std::size_t ng = 1 + rng.index(std::min<std::size_t>(10, n));
      std::vector<int> f(n, 0);
      for (std::size_t i : rng.sample_without_replacement(n, ng)) f[i] = 1;
      gtm = std::max(gtm, static_cast<int>(ng));
      flags.push_back(f);
      lists.push_back(list_from(f));
    }
    const auto an = anmrr(lists, AnmrrVariant::gtm);
    double oracle_mean = 0.0;
    for (std::size_t l = 0; l < n_lists; ++l) {
      const auto& f = flags[l];
      const int ng = static_cast<int>(std::count(f.begin(), f.end(), 1));
      const double o_nmrr = *oracle::nmrr(f, oracle::anmrr_window_gtm(ng, gtm));
      worst = std::max({worst, std::abs(*oracle::ap(f) - *average_precision(lists[l])),
                        std::abs(*oracle::ndcg(f) - *ndcg(lists[l])), std::abs(o_nmrr - *an.per_query[l])});
      oracle_mean += o_nmrr / static_cast<double>(n_lists);
      ++rankings;
    }
    worst = std::max(worst, std::abs(oracle_mean - an.anmrr));
  }
  const auto hand = list_from({1, 0, 1, 0});
  const bool traced = std::abs(*average_precision(hand) - 5.0 / 6.0) < 1e-15 &&
                      std::abs(*ndcg(hand) - 1.5 / (1.0 + 1.0 / std::log2(3.0))) < 1e-15 &&
                      std::abs(*ndcg(hand) - 0.91972) < 5e-6 &&
                      std::abs(*nmrr(hand, 2, AnmrrVariant::gtm) - 1.0 / 7.0) < 1e-15;
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && traced && secs < 1.0,
          fmt("%zu rankings, max |lib - oracle| %.1e (tol 1e-12), hand-traced AP/NDCG/NMRR %s, %.3f s (limit 1 s)",
              rankings, worst, traced ? "match" : "MISMATCH", secs)};
}

Outcome gradient_suite(Fixture&) {
  const auto t0 = Clock::now();
  const auto groups = acceptance::run_gradient_suite();
  const double secs = seconds_since(t0);
  bool ok = secs < 30.0;
  double worst = 0.0;
  std::string worst_name, summary;
  for (const auto& g : groups) {
    ok &= g.checked >= 20 && g.max_error < 1e-5;
    if (g.max_error >= worst) {
      worst = g.max_error;
      worst_name = g.name + " " + g.worst;
    }
    if (g.checked < 20 || g.max_error >= 1e-5)
      summary += fmt(" [%s: %zu trials, max %.2e]", g.name.c_str(), g.checked, g.max_error);
  }
  return {ok, fmt("%zu groups x >=20 trials, max rel err %.2e at %s (tol 1e-5), %.1f s (limit 30 s)%s",
                  groups.size(), worst, worst_name.c_str(), secs, summary.c_str())};
}

Outcome ablation_trend(Fixture& fx) {
  omp_set_num_threads(1);
  const auto t0 = Clock::now();
  const double base = fx.baseline();
  const double cam = fx.cam_only(CamConfig{}.lambda);
  fx.with_vfs();
  const double vfs = *fx.cam_vfs_map;
  const double secs = seconds_since(t0);
  const bool ok = base < cam && cam < vfs && cam - base >= 0.03 && secs < 300.0;
  return {ok, fmt("unseen mAP baseline %.4f < CAM %.4f < CAM+VFS %.4f, CAM - baseline %.2f pts (need >= 3), "
                  "%.0f s on one thread (limit 300 s)",
                  base, cam, vfs, 100.0 * (cam - base), secs)};
}

Outcome lambda_behavior(Fixture& fx) {
  const double base = fx.baseline();
  std::vector<double> maps;
  for (int i = 0; i <= 10; ++i) maps.push_back(fx.cam_only(i / 10.0));
  const double endpoint_gap = std::abs(maps[10] - base);
  const auto best = std::max_element(maps.begin() + 1, maps.end() - 1);
  std::string grid;
  for (double m : maps) grid += fmt("%s%.4f", grid.empty() ? "" : " ", m);
  const bool ok = endpoint_gap <= 1e-6 && *best >= maps[0] && *best >= maps[10];
  return {ok, fmt("|mAP(lambda=1) - baseline| %.1e (tol 1e-6); best mid lambda %.1f mAP %.4f vs lambda=0 %.4f, "
                  "lambda=1 %.4f; grid [%s]",
                  endpoint_gap, (best - maps.begin()) / 10.0, *best, maps[0], maps[10], grid.c_str())};
}

Outcome bound_diagnostic(Fixture& fx) {
  Rng rng(2718);
  const double residual = expansion_residual(1000, 32, rng);
  const auto& model = fx.with_vfs().model;
  const BoundReport r = bound_report(*model.vfs, fx.data());
  const bool ok = residual < 1e-12 && r.violation_rate < 0.2 && r.median_deviation <= r.bound;
  return {ok, fmt("expansion residual %.1e over 1000 quadruples (tol 1e-12); violation rate %.3f at slack %.1f "
                  "(need < 0.2); median deviation %.4f <= L*s2 %.4f (L %.3f, s2 %.3f)",
                  residual, r.violation_rate, r.slack, r.median_deviation, r.bound, r.lipschitz_estimate,
                  r.sigma_sq)};
}

Outcome determinism(Fixture&) {
  testing_support::TempDir tmp;
  const std::string ds = (tmp / "ds").string();
  if (cli({"synth", "--spec", "small", "--out", ds}) != 0) return {false, "synth failed"};
  const int threads = std::max(4, omp_get_num_procs());
  std::vector<std::string> labels;
  for (int t : {1, threads, 1}) {
    omp_set_num_threads(t);
    const std::string run = (tmp / ("train_" + std::to_string(labels.size()))).string();
    if (cli({"train", "--data", ds, "--out", run, "--seed", "9"}) != 0) return {false, "train failed"};
    const std::string ev = (tmp / ("eval_" + std::to_string(labels.size()))).string();
    // eval's config hash covers the model path, so every run is evaluated from the same place
    const fs::path staged = tmp / "model";
    fs::remove_all(staged);
    fs::copy(fs::path(run) / "model", staged);
    if (cli({"eval", "--data", ds, "--model", staged.string(), "--out", ev, "--seed", "9"}) != 0)
      return {false, "eval failed"};
    labels.push_back(run + "|" + ev);
  }
  omp_set_num_threads(1);
  std::size_t compared = 0;
  bool same = true;
  std::string differing;
  const auto split = [](const std::string& s) { return std::make_pair(s.substr(0, s.find('|')), s.substr(s.find('|') + 1)); };
  const auto [r0, e0] = split(labels[0]);
  for (std::size_t i = 1; i < labels.size(); ++i) {
    const auto [ri, ei] = split(labels[i]);
    for (const auto& [a, b] : std::vector<std::pair<fs::path, fs::path>>{
             {fs::path(r0) / "model/params.f64le", fs::path(ri) / "model/params.f64le"},
             {fs::path(r0) / "model/params.json", fs::path(ri) / "model/params.json"},
             {fs::path(r0) / "metrics.json", fs::path(ri) / "metrics.json"},
             {fs::path(r0) / "train_log.jsonl", fs::path(ri) / "train_log.jsonl"},
             {fs::path(e0) / "metrics.json", fs::path(ei) / "metrics.json"}}) {
      const std::string x = testing_support::read_bytes(a), y = testing_support::read_bytes(b);
      ++compared;
      if (x.empty() || x != y) {
        same = false;
        differing = b.filename().string();
      }
    }
  }
  return {same, fmt("train+eval (CAM+VFS, 70 epochs, small fixture) at 1, %d, 1 threads: %zu file pairs %s%s", threads,
                    compared, same ? "byte-identical" : "DIFFER: ", differing.c_str())};
}

Outcome shape_laws(Fixture&) {
  Rng rng(77);
  std::size_t shapes = 0, bad_shapes = 0;
  for (std::size_t M = 1; M <= 64; ++M)
    for (std::size_t k : {1, 3, 5, 7}) {
      const Tensor x = testing_support::random_tensor({1, 2, M}, rng);
      const Tensor y = conv1d_chunk(x, testing_support::random_tensor({2, 2, k}, rng), Tensor(Shape{2}), k);
      ++shapes;
      bad_shapes += y.dim(2) != (M + k - 1) / k || conv1d_geometry(M, k, k).positions != (M + k - 1) / k;
    }
  testing_support::TempDir tmp;
  std::size_t trips = 0, bad_trips = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng r(9000 + i);
    SyntheticSpec s = SyntheticSpec::standard(i);
    s.seen_classes = 1 + r.index(4);
    s.unseen_classes = 1 + r.index(4);
    s.objects_per_class = 2 + r.index(5);
    s.views = 1 + r.index(8);
    s.dino_dim = 1 + r.index(12);
    s.clip_dim = 1 + r.index(8);
    s.nuisance_rank = r.index(s.dino_dim + 1);
    s.lexicon_size = 1 + r.index(10);
    Dataset ds = generate_synthetic_dataset(s);
    if (i % 3 == 1) {
      ds.dino = round_to_f32(testing_support::random_tensor(ds.dino.shape(), r, 1e3));
    } else if (i % 3 == 2) {
      ds.clip.reset();
      ds.text.reset();
    }
    const fs::path dir = tmp / std::to_string(i);
    const auto violations = save_dataset(ds, dir);
    Dataset back;
    bool ok = violations.empty();
    if (ok) {
      back = load_dataset(dir);
      encode_blobs(ds);  // bring the in-memory manifest's blob table up to date
      ok = back == ds;
    }
    ++trips;
    bad_trips += !ok;
  }
  return {bad_shapes == 0 && bad_trips == 0,
          fmt("K = ceil(M/k_w): %zu/%zu (M in 1..64, k_w in {1,3,5,7}); load(save(X)) == X: %zu/%zu datasets",
              shapes - bad_shapes, shapes, trips - bad_trips, trips)};
}

// Rows of a sweep CSV after checking its structure.
std::optional<std::vector<std::vector<std::string>>> read_csv(const fs::path& path, std::size_t rows,
                                                                 std::string& why) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  if (line != "axis,value,seed,map,ndcg,anmrr,num_queries,config_hash") {
    why = "bad header in " + path.filename().string();
    return std::nullopt;
  }
  std::vector<std::vector<std::string>> out;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream s(line);
    std::string cell;
    while (std::getline(s, cell, ',')) cells.push_back(cell);
    if (cells.size() != 8) {
      why = "row with " + std::to_string(cells.size()) + " cells";
      return std::nullopt;
    }
    for (int c : {3, 4, 5}) {
      const double v = std::stod(cells[c]);
      if (!(v >= 0.0 && v <= 1.0)) {
        why = "metric out of range: " + line;
        return std::nullopt;
      }
    }
    if (cells[7].size() != 16) {
      why = "bad config hash: " + line;
      return std::nullopt;
    }
    out.push_back(cells);
  }
  if (out.size() != rows) {
    why = path.filename().string() + " has " + std::to_string(out.size()) + " rows, expected " + std::to_string(rows);
    return std::nullopt;
  }
  return out;
}

Outcome sweep_harness(Fixture&) {
  testing_support::TempDir tmp;
  std::string why;
  const auto t0 = Clock::now();
  const std::string chunk = (tmp / "chunk").string(), stride = (tmp / "stride").string();
  if (cli({"sweep", "--axis", "chunk_size", "--values", "1,3,5,7", "--no-vfs", "--out", chunk}) != 0)
    return {false, "chunk_size sweep failed"};
  if (cli({"sweep", "--axis", "stride", "--values", "1,2,3", "--no-vfs", "--out", stride}) != 0)
    return {false, "stride sweep failed"};
  const auto c = read_csv(fs::path(chunk) / "sweep_chunk_size.csv", 4, why);
  const auto s = c ? read_csv(fs::path(stride) / "sweep_stride.csv", 3, why) : std::nullopt;
  if (!c || !s) return {false, why};
  const double structural = seconds_since(t0);

  const std::string shots = (tmp / "shots").string();
  if (cli({"sweep", "--axis", "shots", "--values", "1,2,4,8", "--seeds", "0,1,2", "--out", shots}) != 0)
    return {false, "few-shot sweep failed"};
  const auto f = read_csv(fs::path(shots) / "sweep_shots.csv", 12, why);
  if (!f) return {false, why};
  std::map<int, std::vector<double>> by_shots;
  for (const auto& row : *f) by_shots[std::stoi(row[1])].push_back(std::stod(row[3]));
  std::vector<double> medians;
  std::string shown;
  for (auto& [n, maps] : by_shots) {
    std::sort(maps.begin(), maps.end());
    medians.push_back(maps[maps.size() / 2]);
    shown += fmt("%s%d:%.4f", shown.empty() ? "" : " ", n, medians.back());
  }
  const bool monotone = std::is_sorted(medians.begin(), medians.end());
  return {monotone, fmt("chunk_size (4 rows) and stride (3 rows) CSVs well-formed in %.0f s; few-shot median mAP "
                        "over seeds 0,1,2 [%s] %s",
                        structural, shown.c_str(), monotone ? "nondecreasing" : "NOT monotone")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome(Fixture&)>>> criteria{
      {"metric oracle equivalence", metric_oracle},
      {"gradient suite", gradient_suite},
      {"ablation trend", ablation_trend},
      {"lambda behavior", lambda_behavior},
      {"expansion identity and bound diagnostic", bound_diagnostic},
      {"determinism", determinism},
      {"shape laws", shape_laws},
      {"sweep harness", sweep_harness},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  Fixture fx;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(number)) continue;
    omp_set_num_threads(1);
    Outcome o;
    try {
      o = criteria[i].second(fx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all &= o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", number, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
