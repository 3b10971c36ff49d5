#include "stldp/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "stldp/augment.hpp"
#include "stldp/calibrate.hpp"
#include "stldp/errors.hpp"
#include "stldp/metrics.hpp"
#include "stldp/policy.hpp"
#include "stldp/simharness.hpp"

namespace stldp::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string content_hash(const std::string& bytes) {
  const std::string blob = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

namespace {

constexpr int kManifestVersion = 1;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

/// Files of one run. Each file is written to a temporary name and renamed;
/// discard() removes everything this run produced.
class Outputs {
 public:
  explicit Outputs(const std::string& dir) : dir_(dir) {
    if (!fs::exists(dir_)) {
      fs::create_directories(dir_);
      created_ = true;
    }
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  template <class Fn>
  void write_with(const std::string& name, Fn&& fn) {
    const fs::path final_path = dir_ / name;
    const fs::path tmp = dir_ / (name + ".tmp");
    pending_.push_back(tmp);
    fn(tmp.string());
    fs::rename(tmp, final_path);
    pending_.pop_back();
    written_.push_back(final_path);
  }

  void write(const std::string& name, const std::string& content) {
    write_with(name, [&](const std::string& p) {
      std::ofstream out(p, std::ios::binary);
      out << content;
      if (!out) throw std::runtime_error("cannot write " + p);
    });
  }

  void discard() noexcept {
    std::error_code ec;
    for (const fs::path& p : pending_) fs::remove(p, ec);
    for (const fs::path& p : written_) fs::remove(p, ec);
    if (created_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const fs::path& p : written_) out.push_back(p.filename().string());
    return out;
  }

 private:
  fs::path dir_;
  bool created_ = false;
  std::vector<fs::path> pending_, written_;
};

std::string jsonl(const std::vector<json>& rows) {
  std::string s;
  for (const json& r : rows) s += r.dump() + "\n";
  return s;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw DataError("not a number list: " + s);
    }
  }
  if (out.empty()) throw DataError("empty number list");
  return out;
}

// ---------------------------------------------------------------------------
// Inputs shared by several commands.

std::vector<Scenario> load_scenarios(const std::string& path) {
  std::vector<Scenario> out;
  for (const json& j : read_jsonl(path)) out.push_back(scenario_from_json(j));
  if (out.empty()) throw DataError(path + " holds no scenarios");
  return out;
}

struct Calibrated {
  std::map<std::string, StlParams> driving;
  std::map<std::string, HriParams> hri;
};

Calibrated load_calibrated(const std::string& path) {
  Calibrated out;
  for (const json& j : read_jsonl(path)) {
    try {
      const std::string id = j.at("id").get<std::string>();
      if (j.contains("gamma")) {
        out.driving[id] = params_from_json(j.at("gamma"));
      } else {
        out.hri[id] = {j.at("hri_gamma").at("d_coll").get<double>(), j.at("hri_gamma").at("r_goal").get<double>()};
      }
    } catch (const json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
  }
  return out;
}

const StlParams& gamma_for(const Calibrated& cal, const Scenario& sc) {
  const auto it = cal.driving.find(sc.id);
  if (it == cal.driving.end()) throw DataError("no calibrated parameters for " + sc.id);
  return it->second;
}

std::vector<AugmentedRecord> load_records(const std::string& path) {
  std::vector<AugmentedRecord> out;
  for (const json& j : read_jsonl(path)) out.push_back(record_from_json(j));
  if (out.empty()) throw DataError(path + " holds no records");
  return out;
}

policy::PlanOptions plan_options(int samples, const std::string& guidance, const std::string& refine, int steps,
                                 double lr) {
  policy::PlanOptions po;
  po.samples = samples;
  po.guidance.mode = policy::parse_guidance(guidance);
  po.guidance.steps = steps;
  po.guidance.lr = lr;
  if (refine != "on" && refine != "off") throw DataError("--refine must be on or off");
  // Without the RefineNet the sampler output is used as is.
  po.refine = po.use_bank = refine == "on";
  return po;
}

// ---------------------------------------------------------------------------
// Commands. Each fills `report` (for the manifest) and writes its outputs.

struct Run {
  Outputs& out;
  json& inputs;
  void input(const std::string& name, const std::string& path) {
    inputs[name] = {{"path", path}, {"hash", content_hash(read_file(path))}};
  }
};

struct GenArgs {
  int straight = 0, curve = 0, roundabout = 0, hri = 0;
  std::uint64_t seed = 0;
  int horizon = 20, episode_steps = 40;
};

void gen_scenarios(const GenArgs& a, Run& run) {
  GeneratorOptions opt;
  opt.horizon = a.horizon;
  opt.episode_steps = a.episode_steps;
  std::vector<json> rows;
  for (auto [family, n] : {std::pair{Family::Straight, a.straight},
                           {Family::Curve, a.curve},
                           {Family::Roundabout, a.roundabout},
                           {Family::Hri, a.hri}}) {
    for (const Scenario& sc : generate_scenarios(family, n, a.seed, opt)) rows.push_back(to_json(sc));
  }
  if (rows.empty()) throw DataError("no scenarios requested");
  run.out.write("scenarios.jsonl", jsonl(rows));
  std::cout << rows.size() << " scenarios\n";
}

struct CalibrateArgs {
  std::string scenarios;
};

void calibrate(const CalibrateArgs& a, Run& run) {
  run.input("scenarios", a.scenarios);
  const auto scs = load_scenarios(a.scenarios);
  std::vector<json> rows(scs.size());
  parallel_for(scs.size(), [&](std::size_t i) {
    const Scenario& sc = scs[i];
    json row = {{"id", sc.id}, {"family", family_name(sc.family)}};
    if (sc.family == Family::Hri) {
      const HriParams g = calibrate_hri(rollout(sc.hri.human, sc.demo).states, sc.hri);
      row["hri_gamma"] = {{"d_coll", g.d_coll}, {"r_goal", g.r_goal}};
    } else {
      const StlParams g =
          calibrate_params(rollout(sc.ego, sc.demo).states, sc.initial_context(), static_cast<Mode>(sc.mode_label));
      row["gamma"] = to_json(g);
    }
    rows[i] = std::move(row);
  });
  run.out.write("calibrated.jsonl", jsonl(rows));
  std::cout << rows.size() << " calibrated\n";
}

struct AugmentArgs {
  std::string scenarios, calibrated;
  int k = 64;
  std::uint64_t seed = 0;
  int iters = 500;
  double lr = 0.05, margin = 0.01;
};

void augment(const AugmentArgs& a, Run& run) {
  run.input("scenarios", a.scenarios);
  run.input("calibrated", a.calibrated);
  const auto scs = load_scenarios(a.scenarios);
  const Calibrated cal = load_calibrated(a.calibrated);
  AugmentOptions opt;
  opt.k = a.k;
  opt.seed = a.seed;
  opt.trajopt.iters = a.iters;
  opt.trajopt.lr = a.lr;
  opt.trajopt.margin = a.margin;

  std::vector<std::vector<AugmentedRecord>> per(scs.size());
  parallel_for(scs.size(), [&](std::size_t i) {
    const Scenario& sc = scs[i];
    if (sc.family == Family::Hri) {
      const auto it = cal.hri.find(sc.id);
      if (it == cal.hri.end()) throw DataError("no calibrated parameters for " + sc.id);
      per[i] = {augment_hri(sc.hri, it->second, opt)};
    } else {
      per[i] = augment_scene(sc.initial_context(), gamma_for(cal, sc), opt);
    }
  });

  std::vector<json> rows;
  int records = 0, records_ok = 0, scenes_ok = 0;
  std::map<std::string, std::pair<int, int>> by_family;  // ok, total
  double distinct = 0.0;
  for (std::size_t i = 0; i < scs.size(); ++i) {
    bool labeled_ok = false;
    for (const AugmentedRecord& r : per[i]) {
      rows.push_back(to_json(r));
      ++records;
      const auto valid = r.valid_indices();
      records_ok += !valid.empty();
      if (r.kind == "hri" || static_cast<int>(r.gamma.mode) == scs[i].mode_label) {
        labeled_ok = !valid.empty();
        std::vector<StateMatrix> ends;
        const EgoState s0 = r.kind == "hri" ? r.hri.human : r.scene.ego;
        for (int j : valid) ends.push_back(rollout(s0, r.solutions[static_cast<std::size_t>(j)].u).states);
        distinct += distinct_endpoints(ends);
      }
    }
    scenes_ok += labeled_ok;
    auto& f = by_family[family_name(scs[i].family)];
    f.first += labeled_ok;
    ++f.second;
  }
  json family_success = json::object();
  for (const auto& [name, f] : by_family) family_success[name] = double(f.first) / f.second;
  const double n = static_cast<double>(scs.size());
  const json summary = {{"scenes", scs.size()},
                        {"records", records},
                        {"record_success", records ? double(records_ok) / records : 0.0},
                        {"scene_success", scenes_ok / n},
                        {"scene_success_by_family", family_success},
                        {"mean_distinct_valid", distinct / n}};
  run.out.write("records.jsonl", jsonl(rows));
  run.out.write("summary.json", summary.dump(2) + "\n");
  std::cout << "scene success " << scenes_ok / n << "\n";
}

struct TrainArgs {
  std::string stage = "ddpm", records, model;
  int epochs = 500;
  double lr = 3e-4;
  int batch = 128;
  std::uint64_t seed = 0;
  int d = 64, hidden = 256, diffusion_steps = 100;
  std::string noise = "posterior";
  bool no_clip = false;
  int pool = 64, scenes_per_batch = 8, samples_per_scene = 16;
};

void train(const TrainArgs& a, Run& run) {
  run.input("records", a.records);
  const auto records = load_records(a.records);
  std::vector<policy::EpochLog> log;
  policy::PolicyModel m;
  if (a.stage == "ddpm") {
    policy::PolicyConfig cfg;
    cfg.d = a.d;
    cfg.hidden = a.hidden;
    cfg.diffusion_steps = a.diffusion_steps;
    cfg.noise = policy::parse_noise_mode(a.noise);
    cfg.clip_denoised = !a.no_clip;
    m = policy::PolicyModel(cfg, a.seed);
    policy::DdpmTrainOptions opt;
    opt.epochs = a.epochs;
    opt.batch = a.batch;
    opt.lr = a.lr;
    opt.seed = a.seed;
    log = policy::train_ddpm(m, records, opt);
  } else if (a.stage == "refine") {
    if (a.model.empty()) throw DataError("--stage refine needs --model (the ddpm checkpoint)");
    run.input("model", a.model);
    m = policy::PolicyModel::load(a.model);
    policy::RefineTrainOptions opt;
    opt.epochs = a.epochs;
    opt.lr = a.lr;
    opt.seed = a.seed;
    opt.pool = a.pool;
    opt.scenes_per_batch = a.scenes_per_batch;
    opt.samples_per_scene = a.samples_per_scene;
    log = policy::train_refine(m, records, opt);
  } else {
    throw DataError("--stage must be ddpm or refine");
  }
  run.out.write_with("model.ckpt", [&](const std::string& p) { m.save(p, {{"stage", a.stage}, {"epochs", a.epochs}}); });
  std::ostringstream csv;
  csv << "epoch,loss,seconds\n" << std::setprecision(10);
  for (const auto& e : log) csv << e.epoch << ',' << e.loss << ',' << e.seconds << '\n';
  run.out.write("train_log.csv", csv.str());
  if (!log.empty()) std::cout << a.stage << " final loss " << log.back().loss << "\n";
}

struct EvalOpenArgs {
  std::string model, scenarios, calibrated, guidance = "off", refine = "on";
  int samples = 64;
  std::uint64_t seed = 0;
  int guide_steps = 10;
  double guide_lr = 0.05;
};

void eval_open(const EvalOpenArgs& a, Run& run) {
  run.input("model", a.model);
  run.input("scenarios", a.scenarios);
  run.input("calibrated", a.calibrated);
  const policy::PolicyModel m = policy::PolicyModel::load(a.model);
  const auto scs = load_scenarios(a.scenarios);
  const Calibrated cal = load_calibrated(a.calibrated);
  const policy::PlanOptions po = plan_options(a.samples, a.guidance, a.refine, a.guide_steps, a.guide_lr);

  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < scs.size(); ++i)
    if (scs[i].family != Family::Hri) idx.push_back(i);
  if (idx.empty()) throw DataError("no driving scenarios to evaluate");

  std::vector<SceneSamples> samples(idx.size());
  std::vector<json> rows(idx.size());
  std::vector<int> gate_violations(idx.size(), 0), refined(idx.size(), 0);
  parallel_for(idx.size(), [&](std::size_t k) {
    const Scenario& sc = scs[idx[k]];
    const SceneContext c = sc.initial_context();
    const StlParams& g = gamma_for(cal, sc);
    Rng rng = stream_rng(a.seed, "eval-open/" + sc.id);
    json list = json::array();
    for (const policy::PlanSample& s : policy::plan(m, c, g, rng, po)) {
      samples[k].trajectories.push_back(s.traj);
      samples[k].rho.push_back(s.rho);
      if (s.rho_d >= 0.0 && s.u.u != s.u_d.u) ++gate_violations[k];
      refined[k] += s.refined;
      json xy = json::array();
      for (Eigen::Index t = 0; t < s.traj.states.rows(); ++t) xy.push_back({s.traj.states(t, 0), s.traj.states(t, 1)});
      list.push_back({{"rho", s.rho}, {"rho_d", s.rho_d}, {"refined", s.refined}, {"xy", xy}});
    }
    rows[k] = {{"id", sc.id}, {"family", family_name(sc.family)}, {"mode", mode_name(g.mode)}, {"samples", list}};
  });

  const OpenLoopSummary s = summarize(samples);
  json per_family = json::object();
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout}) {
    std::vector<SceneSamples> part;
    for (std::size_t k = 0; k < idx.size(); ++k)
      if (scs[idx[k]].family == f) part.push_back(samples[k]);
    if (part.empty()) continue;
    const OpenLoopSummary ps = summarize(part);
    per_family[family_name(f)] = {{"compliance", ps.compliance}, {"success", ps.success},
                                  {"valid_area", ps.valid_area}, {"entropy", ps.entropy}};
  }
  int violations = 0, n_refined = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) violations += gate_violations[k], n_refined += refined[k];
  const json report = {{"command", "eval-open"},
                       {"guidance", a.guidance},
                       {"refine", a.refine},
                       {"compliance", s.compliance},
                       {"success", s.success},
                       {"valid_area", s.valid_area},
                       {"entropy", s.entropy},
                       {"samples", s.samples},
                       {"scenes", s.scenes},
                       {"refined_samples", n_refined},
                       {"gate_violations", violations},
                       {"area_cell_m", kAreaCell},
                       {"entropy_bins", kEntropyBins},
                       {"per_family", per_family}};
  run.out.write("samples.jsonl", jsonl(rows));
  run.out.write("report.json", report.dump(2) + "\n");
  std::cout << "compliance " << s.compliance << " success " << s.success << " area " << s.valid_area << " entropy "
            << s.entropy << "\n";
}

struct ClosedArgs {
  std::string model, scenarios, calibrated, guidance = "last5", refine = "on";
  int episodes = 20, samples = 64, max_steps = 40;
  std::uint64_t seed = 0;
  double v_max = -1.0;  // < 0: keep the envelope value
  std::string v_max_list = "1,4,6";
  int guide_steps = 10;
  double guide_lr = 0.05;
};

struct ClosedResult {
  std::vector<EpisodeLog> logs;
  std::vector<ClosedLoopMetrics> metrics;
  StlParams gamma;
};

ClosedResult closed_loop(const ClosedArgs& a, const policy::PolicyModel& m, const std::vector<Scenario>& scs,
                         const Calibrated& cal, double v_max) {
  std::vector<StlParams> corpus;
  for (const auto& [id, g] : cal.driving) corpus.push_back(g);
  ClosedResult r;
  r.gamma = envelope(corpus, Mode::LaneKeep);
  if (v_max >= 0.0) r.gamma.v_max = v_max;
  r.gamma.v_min = std::min(r.gamma.v_min, r.gamma.v_max);

  std::vector<const Scenario*> eps;
  for (const Scenario& sc : scs)
    if (sc.family != Family::Hri && static_cast<int>(eps.size()) < a.episodes) eps.push_back(&sc);
  if (eps.empty()) throw DataError("no driving scenarios for closed-loop episodes");

  const policy::PlanOptions po = plan_options(a.samples, a.guidance, a.refine, a.guide_steps, a.guide_lr);
  const Planner planner = policy::make_planner(m, po);
  ClosedLoopOptions opt;
  opt.max_steps = a.max_steps;
  opt.horizon = m.cfg.horizon;
  r.logs.resize(eps.size());
  parallel_for(eps.size(), [&](std::size_t i) { r.logs[i] = run_closed_loop(*eps[i], planner, r.gamma, a.seed, opt); });
  for (const EpisodeLog& log : r.logs) r.metrics.push_back(closed_loop_metrics(log));
  return r;
}

json closed_summary(const ClosedResult& r) {
  double collisions = 0, off = 0, progress = 0;
  json per = json::array();
  for (std::size_t i = 0; i < r.logs.size(); ++i) {
    const ClosedLoopMetrics& mm = r.metrics[i];
    collisions += mm.collision;
    off += mm.out_of_lane;
    progress += mm.progress;
    int valid_steps = 0;
    for (const EpisodeStep& s : r.logs[i].steps) valid_steps += s.chosen_rho >= 0.0;
    per.push_back({{"id", r.logs[i].scenario_id},
                   {"progress", mm.progress},
                   {"termination", termination_name(r.logs[i].termination)},
                   {"steps", r.logs[i].steps.size()},
                   {"compliant_steps", valid_steps}});
  }
  const double n = static_cast<double>(r.logs.size());
  return {{"episodes", r.logs.size()},
          {"collision_rate", collisions / n},
          {"out_of_lane_rate", off / n},
          {"mean_progress", progress / n},
          {"gamma", to_json(r.gamma)},
          {"per_episode", per}};
}

double mean_step_seconds(const ClosedResult& r) {
  double total = 0.0;
  int n = 0;
  for (const EpisodeLog& log : r.logs)
    for (const EpisodeStep& s : log.steps) total += s.plan_seconds, ++n;
  return n ? total / n : 0.0;
}

void eval_closed(const ClosedArgs& a, Run& run) {
  run.input("model", a.model);
  run.input("scenarios", a.scenarios);
  run.input("calibrated", a.calibrated);
  const policy::PolicyModel m = policy::PolicyModel::load(a.model);
  const ClosedResult r = closed_loop(a, m, load_scenarios(a.scenarios), load_calibrated(a.calibrated), a.v_max);

  json report = closed_summary(r);
  report["command"] = "eval-closed";
  report["guidance"] = a.guidance;
  report["refine"] = a.refine;
  std::vector<json> steps;
  for (const EpisodeLog& log : r.logs) {
    for (const EpisodeStep& s : log.steps) {
      json j = to_json(s);
      j["episode"] = log.scenario_id;
      steps.push_back(j);
    }
    steps.push_back({{"episode", log.scenario_id}, {"termination", termination_name(log.termination)}});
  }
  run.out.write("episodes.jsonl", jsonl(steps));
  run.out.write("report.json", report.dump(2) + "\n");
  run.out.write("timing.json", json({{"mean_step_seconds", mean_step_seconds(r)}}).dump(2) + "\n");
  std::cout << "collision " << report["collision_rate"] << " out-of-lane " << report["out_of_lane_rate"]
            << " progress " << report["mean_progress"] << "\n";
}

void sweep_gamma(const ClosedArgs& a, Run& run) {
  run.input("model", a.model);
  run.input("scenarios", a.scenarios);
  run.input("calibrated", a.calibrated);
  const policy::PolicyModel m = policy::PolicyModel::load(a.model);
  const auto scs = load_scenarios(a.scenarios);
  const Calibrated cal = load_calibrated(a.calibrated);
  json report = {{"command", "sweep-gamma"}, {"guidance", a.guidance}, {"refine", a.refine}};
  json runs = json::array();
  for (double v : parse_list(a.v_max_list)) {
    const ClosedResult r = closed_loop(a, m, scs, cal, v);
    json s = closed_summary(r);
    s["v_max"] = v;
    runs.push_back(s);
    std::cout << "v_max " << v << " progress " << s["mean_progress"] << "\n";
  }
  report["runs"] = runs;
  run.out.write("report.json", report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Plots.

struct PlotArgs {
  std::string samples, reports;
  int max_scenes = 8;
};

const char* mode_color(const std::string& mode) {
  if (mode == "left") return "#2ca02c";
  if (mode == "right") return "#d62728";
  return "#1f77b4";
}

std::string fan_svg(const json& scene) {
  double x0 = 1e18, y0 = 1e18, x1 = -1e18, y1 = -1e18;
  for (const json& s : scene.at("samples")) {
    for (const json& p : s.at("xy")) {
      const double x = p.at(0).get<double>(), y = p.at(1).get<double>();
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  const double span = std::max({x1 - x0, y1 - y0, 1.0}), size = 480.0, pad = 10.0;
  auto sx = [&](double x) { return pad + (x - x0) / span * size; };
  auto sy = [&](double y) { return pad + size - (y - y0) / span * size; };
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"500\" height=\"500\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"10\" y=\"16\" font-size=\"12\">" << scene.at("id").get<std::string>() << " ("
      << scene.at("mode").get<std::string>() << ")</text>\n";
  const std::string color = mode_color(scene.at("mode").get<std::string>());
  for (const json& s : scene.at("samples")) {
    const bool ok = s.at("rho").get<double>() >= 0.0;
    svg << "<polyline fill=\"none\" stroke=\"" << (ok ? color : std::string("#bbbbbb")) << "\" stroke-width=\""
        << (ok ? 1.5 : 0.7) << "\" points=\"";
    for (const json& p : s.at("xy")) svg << sx(p.at(0).get<double>()) << ',' << sy(p.at(1).get<double>()) << ' ';
    svg << "\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string bars_svg(const std::vector<std::pair<std::string, double>>& bars, const std::string& title) {
  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  const double w = 80.0, h = 300.0;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 40 + w * bars.size() << "\" height=\"360\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"10\" y=\"16\" font-size=\"12\">" << title << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::clamp(bars[i].second, 0.0, 1.0), x = 30 + w * i;
    svg << "<rect x=\"" << x << "\" y=\"" << 30 + h * (1 - v) << "\" width=\"" << w - 20 << "\" height=\"" << h * v
        << "\" fill=\"#1f77b4\"/>\n"
        << "<text x=\"" << x << "\" y=\"350\" font-size=\"10\">" << bars[i].first << "</text>\n"
        << "<text x=\"" << x << "\" y=\"" << 26 + h * (1 - v) << "\" font-size=\"10\">" << bars[i].second
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void plot(const PlotArgs& a, Run& run) {
  if (a.samples.empty() && a.reports.empty()) throw DataError("plot needs --samples and/or --reports");
  if (!a.samples.empty()) {
    run.input("samples", a.samples);
    const auto scenes = read_jsonl(a.samples);
    std::ostringstream csv;
    csv << "scene,sample,step,x,y,rho\n" << std::setprecision(10);
    // Fans: one scene per (family, mode) first, then in file order.
    std::vector<std::size_t> pick;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      if (seen.insert(scenes[i].value("family", "") + "/" + scenes[i].value("mode", "")).second) pick.push_back(i);
    for (std::size_t i = 0; i < scenes.size(); ++i)
      if (std::find(pick.begin(), pick.end(), i) == pick.end()) pick.push_back(i);
    if (pick.size() > static_cast<std::size_t>(std::max(a.max_scenes, 0))) pick.resize(std::max(a.max_scenes, 0));
    std::sort(pick.begin(), pick.end());
    for (const json& scene : scenes) {
      const std::string id = scene.at("id").get<std::string>();
      int j = 0;
      for (const json& s : scene.at("samples")) {
        int t = 0;
        for (const json& p : s.at("xy")) csv << id << ',' << j << ',' << t++ << ',' << p.at(0) << ',' << p.at(1) << ','
                                            << s.at("rho") << '\n';
        ++j;
      }
    }
    for (std::size_t i : pick) {
      const json& scene = scenes[i];
      run.out.write("fan_" + scene.at("id").get<std::string>() + ".svg", fan_svg(scene));
    }
    run.out.write("trajectories.csv", csv.str());
  }
  if (!a.reports.empty()) {
    std::stringstream list(a.reports);
    std::string path;
    std::vector<std::pair<std::string, double>> bars;
    std::ostringstream csv;
    csv << "report,guidance,refine,compliance,success,valid_area,entropy\n" << std::setprecision(10);
    int i = 0;
    while (std::getline(list, path, ',')) {
      run.input("report" + std::to_string(i++), path);
      const json r = read_json(path);
      const std::string label = r.value("guidance", "?") + "/" + r.value("refine", "?");
      csv << path << ',' << r.value("guidance", "") << ',' << r.value("refine", "") << ',' << r.value("compliance", 0.0)
          << ',' << r.value("success", 0.0) << ',' << r.value("valid_area", 0.0) << ',' << r.value("entropy", 0.0)
          << '\n';
      bars.emplace_back(label, r.value("compliance", 0.0));
    }
    run.out.write("metrics.csv", csv.str());
    run.out.write("compliance.svg", bars_svg(bars, "compliance"));
  }
}

// ---------------------------------------------------------------------------
// Parsing.

std::uint64_t& seed_option(CLI::App* sub, std::uint64_t& seed) {
  sub->add_option("--seed", seed, "random seed")->required();
  return seed;
}

/// Effective values of every option of a subcommand, for the manifest.
json effective_params(const CLI::App* sub) {
  json p = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const std::string name = o->get_single_name();
    if (name.empty() || name == "help" || name == "config" || name == "out") continue;
    if (o->get_expected_max() == 0) {
      p[name] = o->count() > 0;
    } else {
      const std::string v = o->as<std::string>();
      if (!v.empty()) p[name] = v;
    }
  }
  return p;
}

int execute(const std::vector<std::string>& args, bool replay);

struct ExitWith {
  int code;
};

int execute(const std::vector<std::string>& args, bool replay) {
  CLI::App app{"Rule-conditioned diffusion planning pipeline", "stldp"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file; [section] per subcommand, keys are flag names");
  // Config sections are applied to every subcommand, invoked or not, so no
  // two subcommands may share storage.
  struct Common {
    std::string out_dir;
    bool strict = false;
  };
  std::map<const CLI::App*, Common> commons;

  auto common = [&](CLI::App* sub) {
    sub->fallthrough();
    Common& c = commons[sub];
    sub->add_option("--out", c.out_dir, "output directory")->required();
    sub->add_flag("--strict-order", c.strict, "single worker, fixed evaluation order");
  };

  GenArgs gen;
  auto* s_gen = app.add_subcommand("gen-scenarios", "generate scenario corpora with expert demos");
  common(s_gen);
  s_gen->add_option("--straight", gen.straight)->capture_default_str();
  s_gen->add_option("--curve", gen.curve)->capture_default_str();
  s_gen->add_option("--roundabout", gen.roundabout)->capture_default_str();
  s_gen->add_option("--hri", gen.hri)->capture_default_str();
  s_gen->add_option("--horizon", gen.horizon)->capture_default_str();
  s_gen->add_option("--episode-steps", gen.episode_steps)->capture_default_str();
  seed_option(s_gen, gen.seed);

  CalibrateArgs cal;
  auto* s_cal = app.add_subcommand("calibrate", "fit rule parameters to each demo");
  common(s_cal);
  s_cal->add_option("--scenarios", cal.scenarios)->required();

  AugmentArgs aug;
  auto* s_aug = app.add_subcommand("augment", "trajectory optimization from uniform restarts, every mode");
  common(s_aug);
  s_aug->add_option("--scenarios", aug.scenarios)->required();
  s_aug->add_option("--calibrated", aug.calibrated)->required();
  s_aug->add_option("--k", aug.k, "restarts per mode")->capture_default_str();
  s_aug->add_option("--iters", aug.iters)->capture_default_str();
  s_aug->add_option("--lr", aug.lr)->capture_default_str();
  s_aug->add_option("--margin", aug.margin)->capture_default_str();
  seed_option(s_aug, aug.seed);

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "train the diffusion model or the refinement net");
  common(s_tr);
  s_tr->add_option("--stage", tr.stage)->required()->check(CLI::IsMember({"ddpm", "refine"}));
  s_tr->add_option("--records", tr.records)->required();
  s_tr->add_option("--model", tr.model, "ddpm checkpoint (refine stage)");
  s_tr->add_option("--epochs", tr.epochs)->capture_default_str();
  s_tr->add_option("--lr", tr.lr)->capture_default_str();
  s_tr->add_option("--batch", tr.batch)->capture_default_str();
  s_tr->add_option("--d", tr.d)->capture_default_str();
  s_tr->add_option("--hidden", tr.hidden)->capture_default_str();
  s_tr->add_option("--diffusion-steps", tr.diffusion_steps)->capture_default_str();
  s_tr->add_option("--noise", tr.noise)->capture_default_str()->check(CLI::IsMember({"posterior", "unit"}));
  s_tr->add_flag("--no-clip", tr.no_clip, "plain noise-estimate update without clipping the clean estimate");
  s_tr->add_option("--pool", tr.pool)->capture_default_str();
  s_tr->add_option("--scenes-per-batch", tr.scenes_per_batch)->capture_default_str();
  s_tr->add_option("--samples-per-scene", tr.samples_per_scene)->capture_default_str();
  seed_option(s_tr, tr.seed);

  EvalOpenArgs eo;
  auto* s_eo = app.add_subcommand("eval-open", "open-loop sampling metrics");
  common(s_eo);
  s_eo->add_option("--model", eo.model)->required();
  s_eo->add_option("--scenarios", eo.scenarios)->required();
  s_eo->add_option("--calibrated", eo.calibrated)->required();
  s_eo->add_option("--guidance", eo.guidance)->capture_default_str()->check(CLI::IsMember({"off", "last5", "every"}));
  s_eo->add_option("--refine", eo.refine)->capture_default_str()->check(CLI::IsMember({"on", "off"}));
  s_eo->add_option("--samples", eo.samples)->capture_default_str();
  s_eo->add_option("--guide-steps", eo.guide_steps)->capture_default_str();
  s_eo->add_option("--guide-lr", eo.guide_lr)->capture_default_str();
  seed_option(s_eo, eo.seed);

  ClosedArgs cl, sw;
  auto closed_options = [&](CLI::App* sub, ClosedArgs& cl) {
    common(sub);
    sub->add_option("--model", cl.model)->required();
    sub->add_option("--scenarios", cl.scenarios)->required();
    sub->add_option("--calibrated", cl.calibrated, "training corpus parameters (the rule envelope)")->required();
    sub->add_option("--guidance", cl.guidance)->capture_default_str()->check(CLI::IsMember({"off", "last5", "every"}));
    sub->add_option("--refine", cl.refine)->capture_default_str()->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--episodes", cl.episodes)->capture_default_str();
    sub->add_option("--samples", cl.samples)->capture_default_str();
    sub->add_option("--max-steps", cl.max_steps)->capture_default_str();
    sub->add_option("--guide-steps", cl.guide_steps)->capture_default_str();
    sub->add_option("--guide-lr", cl.guide_lr)->capture_default_str();
    seed_option(sub, cl.seed);
  };
  auto* s_cl = app.add_subcommand("eval-closed", "receding-horizon episodes");
  closed_options(s_cl, cl);
  s_cl->add_option("--v-max", cl.v_max, "override the speed limit");
  auto* s_sw = app.add_subcommand("sweep-gamma", "closed-loop episodes under several speed limits");
  closed_options(s_sw, sw);
  s_sw->add_option("--v-max-list", sw.v_max_list)->capture_default_str();

  PlotArgs pl;
  auto* s_pl = app.add_subcommand("plot", "SVG trajectory fans and metric charts with CSV data");
  common(s_pl);
  s_pl->add_option("--samples", pl.samples, "samples.jsonl from eval-open");
  s_pl->add_option("--reports", pl.reports, "comma-separated eval-open report.json files");
  s_pl->add_option("--max-scenes", pl.max_scenes)->capture_default_str();

  std::string manifest_path;
  auto* s_re = app.add_subcommand("rerun", "repeat a run from its manifest");
  s_re->add_option("--manifest", manifest_path)->required();
  common(s_re);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string out_dir = commons[sub].out_dir;
  const bool strict = commons[sub].strict;

  if (sub == s_re) {
    if (replay) throw DataError("a manifest cannot point at another rerun");
    const json m = read_json(manifest_path);
    if (m.value("version", 0) != kManifestVersion) throw DataError("unsupported manifest version");
    for (const auto& [name, in] : m.at("inputs").items()) {
      const std::string path = in.at("path").get<std::string>();
      if (content_hash(read_file(path)) != in.at("hash").get<std::string>()) {
        throw DataError("input " + name + " (" + path + ") changed since the manifest was written");
      }
    }
    std::vector<std::string> replay_args{m.at("command").get<std::string>()};
    for (const auto& [k, v] : m.at("params").items()) {
      if (v.is_boolean()) {
        if (v.get<bool>()) replay_args.push_back("--" + k);
      } else {
        replay_args.push_back("--" + k);
        replay_args.push_back(v.get<std::string>());
      }
    }
    if (strict && std::find(replay_args.begin(), replay_args.end(), "--strict-order") == replay_args.end())
      replay_args.push_back("--strict-order");
    replay_args.push_back("--out");
    replay_args.push_back(out_dir);
    return execute(replay_args, true);
  }

  if (strict) set_strict_order(true);
  Outputs outputs(out_dir);
  json inputs = json::object();
  Run run{outputs, inputs};
  try {
    const std::string name = sub->get_name();
    if (name == "gen-scenarios") gen_scenarios(gen, run);
    else if (name == "calibrate") calibrate(cal, run);
    else if (name == "augment") augment(aug, run);
    else if (name == "train") train(tr, run);
    else if (name == "eval-open") eval_open(eo, run);
    else if (name == "eval-closed") eval_closed(cl, run);
    else if (name == "sweep-gamma") sweep_gamma(sw, run);
    else if (name == "plot") plot(pl, run);

    const json manifest = {{"version", kManifestVersion},
                           {"command", name},
                           {"params", effective_params(sub)},
                           {"inputs", inputs},
                           {"outputs", outputs.names()},
                           {"threads", strict ? 1u : worker_count()}};
    outputs.write("manifest.json", manifest.dump(2) + "\n");
  } catch (...) {
    outputs.discard();
    if (strict) set_strict_order(false);
    throw;
  }
  if (strict) set_strict_order(false);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  try {
    return execute(args, false);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace stldp::cli
