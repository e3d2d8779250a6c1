// Experiment driver: generation, training, evaluation, sweeps, pipeline
// simulation, gradient checks and report emission.

#include <CLI11.hpp>
#include <json.hpp>

#include "memwarp/model.hpp"
#include "memwarp/pipeline.hpp"
#include "memwarp/training.hpp"
#include "memwarp/worldgen.hpp"

#include "memwarp/gradcheck.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace memwarp;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kDataError = 3;
constexpr int kCheckFailed = 4;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw FormatError("bad json in " + p.string() + ": " + e.what());
  }
  return j;
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << "\n";
  if (!os) throw FormatError("cannot write " + p.string());
}

// --- gen --------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::string config;
  int count = 8;
  int length = 24;
  unsigned seed = 1;
  int image_size = 32;
  std::string occlusion = "high";  // none | low | high
  double max_speed = 1.1;
  int occ_min = 4, occ_max = 6;
};

int cmd_gen(const GenArgs& a) {
  std::vector<SequenceRecord> seqs;
  std::mt19937 rng(a.seed);
  if (!a.config.empty()) {
    const SceneSpec spec = scene_spec_from_json(read_json_file(a.config));
    for (int i = 0; i < a.count; ++i)
      seqs.push_back(generate(spec, a.length, a.seed + i));
  } else {
    RandomSceneOptions opt;
    opt.image_size = a.image_size;
    opt.max_speed = a.max_speed;
    opt.occlusion_min = a.occ_min;
    opt.occlusion_max = a.occ_max;
    if (a.occlusion == "none")
      opt.occlusion_fraction = 0;
    else if (a.occlusion == "low")
      opt.occlusion_fraction = 0.5;
    else if (a.occlusion != "high")
      throw UsageError("gen: --occlusion must be none, low or high");
    for (int i = 0; i < a.count; ++i)
      seqs.push_back(generate(random_scene(a.length, rng, opt), a.length,
                              a.seed * 1000 + i));
  }
  save_dataset(seqs, a.out);

  int occluded = 0, frames = 0;
  for (const auto& rec : seqs)
    for (int t = 0; t < rec.length(); ++t) {
      ++frames;
      for (const auto& o : rec.spec.objects)
        if (genimpl::occluded_at(o, t)) {
          ++occluded;
          break;
        }
    }
  std::cout << "wrote " << seqs.size() << " sequences x " << a.length
            << " frames to " << a.out << " (occluded-frame fraction "
            << double(occluded) / frames << ")\n";
  return kOk;
}

// --- train ------------------------------------------------------------

struct TrainArgs {
  std::string data, out, config, val_data;
  std::string variant = "memnet";
  std::string aggregation = "average";
  std::string flow = "gt";
  std::vector<int> axes;
  int feat = 16, mid = 12;
  TrainConfig tc;
  bool fused = false;
  std::string strong;  // checkpoint feeding the fused model
  int strong_period = 4;
};

ModelConfig model_config_from(const TrainArgs& a) {
  ModelConfig cfg;
  cfg.variant = model_variant_from(a.variant);
  cfg.feat_channels = a.feat;
  cfg.mid_channels = a.mid;
  if (a.aggregation == "average")
    cfg.aggregation = AggregationKind::Average;
  else if (a.aggregation == "learned")
    cfg.aggregation = AggregationKind::LearnedWeighting;
  else
    throw UsageError("train: --aggregation must be average or learned");
  if (a.flow == "gt")
    cfg.flow = FlowKind::GroundTruth;
  else if (a.flow == "toy")
    cfg.flow = FlowKind::ToyEstimator;
  else
    throw UsageError("train: --flow must be gt or toy");
  if (!a.axes.empty()) {
    if (cfg.variant != ModelVariant::ClockNet)
      throw UsageError("train: --axes only applies to the clocknet variant");
    cfg.clock_axes = a.axes;
  }
  if (a.fused) {
    if (cfg.variant != ModelVariant::PerFrame)
      throw UsageError("train: --fused needs --variant perframe");
    if (a.strong.empty())
      throw UsageError("train: --fused needs --strong CKPT");
    cfg.fuse_side = true;
  }
  return cfg;
}

int cmd_train(TrainArgs a) {
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    if (j.contains("variant")) a.variant = j["variant"];
    if (j.contains("aggregation")) a.aggregation = j["aggregation"];
    if (j.contains("flow")) a.flow = j["flow"];
    if (j.contains("clock_axes")) a.axes = j["clock_axes"].get<std::vector<int>>();
    if (j.contains("feat_channels")) a.feat = j["feat_channels"];
    if (j.contains("mid_channels")) a.mid = j["mid_channels"];
    const json t = j.value("train", json::object());
    if (t.contains("sequence_length")) a.tc.sequence_length = t["sequence_length"];
    if (t.contains("evidence_dropout")) a.tc.evidence_dropout = t["evidence_dropout"];
    if (t.contains("learning_rate")) a.tc.learning_rate = t["learning_rate"];
    if (t.contains("epochs")) a.tc.epochs = t["epochs"];
    if (t.contains("seed")) a.tc.seed = t["seed"];
  }
  auto dataset = load_dataset(a.data);

  DetectionModel<float> model;
  model.cfg = model_config_from(a);
  model.init(a.tc.seed);

  std::vector<SequenceRecord> val;
  if (!a.val_data.empty()) val = load_dataset(a.val_data);

  fs::create_directories(a.out);
  std::ofstream metrics(fs::path(a.out) / "metrics.log");

  std::optional<DetectionModel<float>> strong;
  if (model.cfg.fuse_side) {
    strong = load_model<float>(a.strong);
    if (strong->cfg.feat_channels != model.cfg.feat_channels)
      throw UsageError("train: strong/fused feature widths must match");
    PipelineConfig pcfg;
    pcfg.strong_update_period = a.strong_period;
    auto stats = train_fused(model, dataset, *strong, pcfg, a.tc, &metrics);
    metrics << "final loss=" << stats.final_loss << "\n";
  } else {
    std::function<double(const DetectionModel<float>&)> val_fn;
    if (!val.empty())
      val_fn = [&](const DetectionModel<float>& m) {
        return evaluate_model(m, val).mean;
      };
    auto stats = train(model, dataset, a.tc, &metrics,
                       val_fn ? &val_fn : nullptr);
    metrics << "final loss=" << stats.final_loss << "\n";
  }

  save_model(model, a.out);
  if (!val.empty())
    std::cout << "val map " << evaluate_model(model, val).mean << "\n";
  std::cout << "checkpoint written to " << a.out << "\n";
  return kOk;
}

// --- eval / sweeps ------------------------------------------------------

struct EvalArgs {
  std::string model, data, out;
  int delta = -1;
  std::string mode = "feature";
};

int cmd_eval(const EvalArgs& a) {
  auto model = load_model<float>(a.model);
  auto dataset = load_dataset(a.data);
  json summary;
  summary["model"] = to_string(model.cfg.variant);
  if (a.delta >= 0) {
    if (model.cfg.variant == ModelVariant::PerFrame)
      throw UsageError(
          "eval: delta evaluation needs a memory model (propagation has "
          "nothing to warp in a per-frame detector)");
    const auto mode = a.mode == "box" ? PropagationMode::BoxProp
                                      : PropagationMode::FeatureProp;
    auto rows = evaluate_propagation(model, dataset, {a.delta}, mode);
    summary["delta"] = a.delta;
    summary["mode"] = rows[0].mode;
    summary["map"] = rows[0].map;
  } else {
    auto res = evaluate_model(model, dataset);
    summary["map"] = res.mean;
    for (const auto& [cls, ap] : res.per_class)
      summary["per_class"][std::to_string(cls)] = ap;
  }
  if (!a.out.empty())
    write_json_file(a.out, summary);
  else
    std::cout << summary.dump(2) << "\n";
  return kOk;
}

struct SweepArgs {
  std::string model, data, out;
  std::vector<int> deltas{0, 4, 8};
  std::string mode = "feature";
};

void write_sweep_csv(const fs::path& p, const std::vector<SweepRow>& rows) {
  std::ofstream os(p);
  os << "delta,map,mode,cost_proxy\n";
  for (const auto& r : rows)
    os << r.delta << ',' << r.map << ',' << r.mode << ',' << r.cost_proxy
       << "\n";
  if (!os) throw FormatError("cannot write " + p.string());
}

int cmd_sweep(const SweepArgs& a, bool anticipation) {
  auto model = load_model<float>(a.model);
  auto dataset = load_dataset(a.data);
  std::vector<SweepRow> rows;
  if (anticipation)
    rows = evaluate_anticipation(model, dataset, a.deltas);
  else
    rows = evaluate_propagation(model, dataset, a.deltas,
                                a.mode == "box" ? PropagationMode::BoxProp
                                                : PropagationMode::FeatureProp);
  write_sweep_csv(a.out, rows);
  for (const auto& r : rows)
    std::cout << "delta " << r.delta << " map " << r.map << " (" << r.mode
              << ")\n";
  return kOk;
}

// --- pipeline-sim --------------------------------------------------------

struct SimArgs {
  std::string fast, fused, strong, data, out, config;
  std::string alignment = "feature";
  PipelineConfig cfg;
  bool threaded = false;
  bool split_baseline = false;
};

int cmd_pipeline_sim(SimArgs a) {
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    if (j.contains("frame_period_ms")) a.cfg.frame_period_ms = j["frame_period_ms"];
    if (j.contains("fast_latency_ms")) a.cfg.fast_latency_ms = j["fast_latency_ms"];
    if (j.contains("strong_latency_ms"))
      a.cfg.strong_latency_ms = j["strong_latency_ms"];
    if (j.contains("strong_update_period"))
      a.cfg.strong_update_period = j["strong_update_period"];
    if (j.contains("alignment")) a.alignment = j["alignment"];
  }
  if (a.alignment == "feature")
    a.cfg.alignment = AlignmentMode::FeatureProp;
  else if (a.alignment == "box")
    a.cfg.alignment = AlignmentMode::BoxProp;
  else if (a.alignment == "none")
    a.cfg.alignment = AlignmentMode::None;
  else
    throw UsageError("pipeline-sim: --alignment must be feature, box or none");

  auto fast = load_model<float>(a.fast);
  auto strong = load_model<float>(a.strong);
  std::optional<DetectionModel<float>> fused;
  if (!a.fused.empty()) fused = load_model<float>(a.fused);
  PipelineModels<float> models{&fast, fused ? &*fused : nullptr, &strong};

  auto dataset = load_dataset(a.data);
  fs::create_directories(a.out);
  std::ofstream trace_os(fs::path(a.out) / "trace.txt");

  std::vector<std::vector<Box>> dets, gts;
  double max_latency = 0;
  bool causal = true;
  int warmup_frames = 0, frames = 0;
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    auto res = a.threaded ? simulate_threaded(models, dataset[s], a.cfg)
                          : simulate(models, dataset[s], a.cfg);
    for (const auto& row : res.trace) {
      trace_os << "seq=" << s << " frame=" << row.frame
               << " arrival_ms=" << row.arrival_ms << " emit_ms=" << row.emit_ms
               << " strong_frame=" << row.strong_frame << " mode=" << row.mode
               << (row.warmup ? " warmup=1" : " warmup=0") << "\n";
      max_latency = std::max(max_latency, row.emit_ms - row.arrival_ms);
      causal = causal && row.strong_frame <= row.frame &&
               row.emit_ms >= row.arrival_ms;
      warmup_frames += row.warmup ? 1 : 0;
      ++frames;
    }
    for (int t = 0; t < dataset[s].length(); ++t) {
      dets.push_back(std::move(res.detections[t]));
      gts.push_back(dataset[s].boxes[t]);
    }
  }
  const double map = average_precision(dets, gts, 0.5).mean;

  json summary;
  summary["map"] = map;
  summary["delta"] = a.cfg.delta();
  summary["alignment"] = to_string(a.cfg.alignment);
  summary["max_latency_ms"] = max_latency;
  summary["latency_bound_ms"] = a.cfg.fast_latency_ms + a.cfg.tick_ms;
  summary["causality_ok"] = causal;
  summary["warmup_frames"] = warmup_frames;
  summary["frames"] = frames;
  summary["threaded"] = a.threaded;
  if (a.split_baseline) {
    auto split = evaluate_split(strong, dataset);
    summary["split_strong_map"] = split.mean;
    auto split_fast = evaluate_split(fast, dataset);
    summary["split_fast_map"] = split_fast.mean;
  }
  write_json_file(fs::path(a.out) / "summary.json", summary);
  std::cout << summary.dump(2) << "\n";

  if (!causal) {
    std::cerr << "causality violated in trace\n";
    return kCheckFailed;
  }
  if (max_latency > a.cfg.fast_latency_ms + a.cfg.tick_ms) {
    std::cerr << "latency bound violated\n";
    return kCheckFailed;
  }
  return kOk;
}

// --- report ---------------------------------------------------------------

struct ReportArgs {
  std::string dir;
  std::string out;
};

struct Check {
  std::string name;
  bool ok = false;
  std::string detail;
};

std::vector<SweepRow> read_sweep_csv(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  std::string line;
  std::getline(is, line);  // header
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    SweepRow r;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    if (!(ss >> r.delta >> r.map >> r.mode >> r.cost_proxy))
      throw FormatError("bad sweep row in " + p.string());
    rows.push_back(r);
  }
  return rows;
}

int cmd_report(const ReportArgs& a) {
  const fs::path dir = a.dir;
  std::vector<Check> checks;
  auto have = [&](const char* name) { return fs::exists(dir / name); };

  std::optional<std::vector<SweepRow>> prop_mem, prop_clock, box_mem, box_clock;
  if (have("prop_memnet.csv")) prop_mem = read_sweep_csv(dir / "prop_memnet.csv");
  if (have("prop_clocknet.csv"))
    prop_clock = read_sweep_csv(dir / "prop_clocknet.csv");
  if (have("boxprop_memnet.csv"))
    box_mem = read_sweep_csv(dir / "boxprop_memnet.csv");
  if (have("boxprop_clocknet.csv"))
    box_clock = read_sweep_csv(dir / "boxprop_clocknet.csv");

  auto monotone = [&](const char* name, const std::vector<SweepRow>& rows) {
    Check c{name};
    c.ok = true;
    std::ostringstream d;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i && rows[i].map > rows[i - 1].map + 1e-12) c.ok = false;
      d << "map(" << rows[i].delta << ")=" << rows[i].map << " ";
    }
    c.detail = d.str();
    checks.push_back(c);
  };
  if (prop_mem) monotone("monotone_degradation_memnet", *prop_mem);
  if (prop_clock) monotone("monotone_degradation_clocknet", *prop_clock);

  if (prop_mem && prop_clock && prop_mem->size() == prop_clock->size() &&
      prop_mem->size() >= 2) {
    Check c{"clock_gap_grows_with_delta"};
    const double gap0 = prop_clock->front().map - prop_mem->front().map;
    const double gapN = prop_clock->back().map - prop_mem->back().map;
    c.ok = gapN >= gap0 - 1e-12;
    c.detail = "gap(delta_min)=" + std::to_string(gap0) +
               " gap(delta_max)=" + std::to_string(gapN);
    checks.push_back(c);
  }

  auto feature_vs_box = [&](const char* name,
                            const std::vector<SweepRow>& feat,
                            const std::vector<SweepRow>& box) {
    Check c{name};
    c.ok = true;
    std::ostringstream d;
    for (const auto& f : feat) {
      if (f.delta == 0) continue;
      for (const auto& b : box)
        if (b.delta == f.delta) {
          if (f.map < b.map - 1e-12) c.ok = false;
          d << "delta " << f.delta << ": feature=" << f.map << " box=" << b.map
            << " ";
        }
    }
    c.detail = d.str();
    checks.push_back(c);
  };
  if (prop_mem && box_mem)
    feature_vs_box("featureprop_ge_boxprop_memnet", *prop_mem, *box_mem);
  if (prop_clock && box_clock)
    feature_vs_box("featureprop_ge_boxprop_clocknet", *prop_clock, *box_clock);

  if (have("eval_fast.json") && have("eval_fused.json") &&
      have("eval_strong.json")) {
    const double fast = read_json_file(dir / "eval_fast.json").at("map");
    const double fused = read_json_file(dir / "eval_fused.json").at("map");
    const double strong = read_json_file(dir / "eval_strong.json").at("map");
    Check c{"fusion_sandwich"};
    c.ok = fast <= fused + 1e-12 && fused <= strong + 1e-12;
    c.detail = "fast=" + std::to_string(fast) + " fused=" + std::to_string(fused) +
               " strong=" + std::to_string(strong);
    checks.push_back(c);
  }

  if (checks.empty())
    throw FormatError("report: no recognizable inputs in " + dir.string());

  const fs::path out = a.out.empty() ? dir / "report.txt" : fs::path(a.out);
  std::ofstream os(out);
  const std::time_t now = std::time(nullptr);
  char stamp[64];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
  os << "# generated " << stamp << "\n";
  bool all_ok = true;
  json jout;
  for (const auto& c : checks) {
    os << (c.ok ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    std::cout << (c.ok ? "PASS " : "FAIL ") << c.name << ": " << c.detail
              << "\n";
    jout[c.name] = c.ok;
    all_ok = all_ok && c.ok;
  }
  write_json_file(out.parent_path() / "report.json", jout);
  return all_ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"warped feature-memory video detection workbench"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* cgen = app.add_subcommand("gen", "generate a synthetic dataset");
  cgen->add_option("--out", gen.out, "output dataset directory")->required();
  cgen->add_option("--config", gen.config, "scene spec json (one spec for all)");
  cgen->add_option("--count", gen.count, "number of sequences");
  cgen->add_option("--length", gen.length, "frames per sequence");
  cgen->add_option("--seed", gen.seed, "generator seed");
  cgen->add_option("--image-size", gen.image_size, "square image size");
  cgen->add_option("--occlusion", gen.occlusion, "none | low | high");
  cgen->add_option("--max-speed", gen.max_speed, "max object speed, px/frame");
  cgen->add_option("--occ-min", gen.occ_min, "shortest occlusion, frames");
  cgen->add_option("--occ-max", gen.occ_max, "longest occlusion, frames");

  TrainArgs tr;
  auto* ctr = app.add_subcommand("train", "train a detector");
  ctr->add_option("--data", tr.data, "training dataset")->required();
  ctr->add_option("--out", tr.out, "checkpoint directory")->required();
  ctr->add_option("--config", tr.config, "experiment config json");
  ctr->add_option("--val-data", tr.val_data, "validation dataset");
  ctr->add_option("--variant", tr.variant, "perframe | memnet | clocknet");
  ctr->add_option("--aggregation", tr.aggregation, "average | learned");
  ctr->add_option("--flow", tr.flow, "gt | toy");
  ctr->add_option("--axes", tr.axes, "clocknet time axes, e.g. 1,2,3")
      ->delimiter(',');
  ctr->add_option("--feat", tr.feat, "feature channels");
  ctr->add_option("--mid", tr.mid, "extractor mid channels");
  ctr->add_option("--epochs", tr.tc.epochs, "training epochs");
  ctr->add_option("--seq-len", tr.tc.sequence_length, "window length");
  ctr->add_option("--dropout", tr.tc.evidence_dropout, "evidence dropout");
  ctr->add_option("--lr", tr.tc.learning_rate, "initial learning rate");
  ctr->add_option("--seed", tr.tc.seed, "training seed");
  ctr->add_flag("--fused", tr.fused, "train the fused-input fast detector");
  ctr->add_option("--strong", tr.strong, "strong checkpoint for --fused");
  ctr->add_option("--strong-period", tr.strong_period,
                  "strong evidence cadence for --fused");

  EvalArgs ev;
  auto* cev = app.add_subcommand("eval", "evaluate a checkpoint");
  cev->add_option("--model", ev.model, "checkpoint directory")->required();
  cev->add_option("--data", ev.data, "dataset")->required();
  cev->add_option("--out", ev.out, "summary json path");
  cev->add_option("--delta", ev.delta, "propagation gap (memory models only)");
  cev->add_option("--mode", ev.mode, "feature | box (with --delta)");

  SweepArgs swp;
  auto* csp = app.add_subcommand("sweep-propagation",
                                 "map propagation quality over deltas");
  csp->add_option("--model", swp.model)->required();
  csp->add_option("--data", swp.data)->required();
  csp->add_option("--out", swp.out, "output csv")->required();
  csp->add_option("--deltas", swp.deltas, "e.g. 0,4,8")->delimiter(',');
  csp->add_option("--mode", swp.mode, "feature | box");

  SweepArgs ant;
  auto* can = app.add_subcommand("sweep-anticipation",
                                 "map anticipation quality over deltas");
  can->add_option("--model", ant.model)->required();
  can->add_option("--data", ant.data)->required();
  can->add_option("--out", ant.out, "output csv")->required();
  can->add_option("--deltas", ant.deltas, "e.g. 4,8")->delimiter(',');

  SimArgs sim;
  auto* csm = app.add_subcommand("pipeline-sim",
                                 "two-thread fast/strong pipeline simulation");
  csm->add_option("--fast", sim.fast, "fast checkpoint")->required();
  csm->add_option("--fused", sim.fused, "fused-head checkpoint");
  csm->add_option("--strong", sim.strong, "strong checkpoint")->required();
  csm->add_option("--data", sim.data)->required();
  csm->add_option("--out", sim.out, "output directory")->required();
  csm->add_option("--config", sim.config, "pipeline config json");
  csm->add_option("--alignment", sim.alignment, "feature | box | none");
  csm->add_option("--frame-period", sim.cfg.frame_period_ms, "ms per frame");
  csm->add_option("--fast-latency", sim.cfg.fast_latency_ms, "fast path ms");
  csm->add_option("--strong-latency", sim.cfg.strong_latency_ms,
                  "strong path ms");
  csm->add_option("--strong-period", sim.cfg.strong_update_period,
                  "strong evidence cadence in frames");
  csm->add_flag("--threaded", sim.threaded, "run on real worker threads");
  csm->add_flag("--split-baseline", sim.split_baseline,
                "also score the split-halves two-worker baseline");

  unsigned gseed = 7;
  auto* cgc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  cgc->add_option("--seed", gseed, "seed for the random instances");

  ReportArgs rep;
  auto* crp = app.add_subcommand("report", "paper-pattern pass/fail report");
  crp->add_option("--dir", rep.dir, "directory of sweep csvs and eval jsons")
      ->required();
  crp->add_option("--out", rep.out, "report path (default <dir>/report.txt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (app.got_subcommand(cgen)) return cmd_gen(gen);
    if (app.got_subcommand(ctr)) return cmd_train(tr);
    if (app.got_subcommand(cev)) return cmd_eval(ev);
    if (app.got_subcommand(csp)) return cmd_sweep(swp, false);
    if (app.got_subcommand(can)) return cmd_sweep(ant, true);
    if (app.got_subcommand(csm)) return cmd_pipeline_sim(sim);
    if (app.got_subcommand(cgc))
      return run_gradient_checks(gseed, std::cout) ? kOk : kCheckFailed;
    if (app.got_subcommand(crp)) return cmd_report(rep);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}
