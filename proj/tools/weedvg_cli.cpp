// weedvg: build -> train -> predict -> eval on synthetic scenes.
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "weedvg/config.hpp"
#include "weedvg/errors.hpp"
#include "weedvg/eval.hpp"
#include "weedvg/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace weedvg;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::vector<std::string> ablate;
  std::string stage = "both";
  bool strict_negatives = false;
  std::string format = "table";
  std::string split = "test";
  bool gate_level0 = false;
  int verbosity = -1;
};

const char* kSplits[] = {"train", "val", "test"};

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) cfg.set_seed(*o.seed);
  for (const auto& a : o.ablate) cfg.train.ablation.enable(a);
  if (o.strict_negatives) cfg.eval.strict_negatives = true;
  if (o.verbosity >= 0) cfg.verbosity = o.verbosity;
  cfg.validate();
  return cfg;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write-test";
  {
    std::ofstream f(probe);
    if (!f) throw Error("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("write failed for " + path.string());
}

fs::path dataset_path(const fs::path& out, const std::string& split) {
  return out / (split + ".jsonl");
}

Dataset load_split(const fs::path& out, const std::string& split, const RunConfig& cfg) {
  const fs::path p = dataset_path(out, split);
  if (!fs::exists(p)) throw Error("missing dataset " + p.string() + " (run build first)");
  return read_dataset(p.string(), cfg.synth.datagen);
}

// Encoders are keyed on the seed the dataset was generated with.
SynthConfig synth_for(const RunConfig& cfg, const Dataset& ds) {
  SynthConfig s = cfg.synth;
  s.seed = ds.seed;
  return s;
}

json split_stats(const Dataset& ds) {
  json j;
  std::size_t instances = 0, pos = 0, neg = 0, img = 0;
  json types = json::object();
  for (ImageType t : kAllImageTypes) types[std::string(to_string(t))] = 0;
  for (const auto& s : ds.scenes) {
    instances += s.instances.size();
    types[std::string(to_string(s.image_type))] = types[std::string(to_string(s.image_type))].get<int>() + 1;
  }
  for (const auto& e : ds.expressions) {
    if (e.level == Level::Image) ++img;
    else if (e.polarity == Polarity::Positive) ++pos;
    else ++neg;
  }
  j["scenes"] = ds.scenes.size();
  j["instances"] = instances;
  j["expressions"] = ds.expressions.size();
  j["positive_instance_expressions"] = pos;
  j["negative_instance_expressions"] = neg;
  j["image_level_expressions"] = img;
  j["image_types"] = types;
  return j;
}

json histograms(const std::vector<const Dataset*>& splits) {
  json scale = json::object();
  for (SizeBin b : kAllSizeBins) {
    scale[std::string(to_string(b))] = {{"crop", 0}, {"weed", 0}};
  }
  json density = json::object();
  for (int b = 0; b < kNumDensityBuckets; ++b) density[std::string(density_bucket_name(b))] = 0;
  std::size_t empty = 0;
  for (const Dataset* ds : splits) {
    for (const auto& s : ds->scenes) {
      if (s.instances.empty()) {
        ++empty;
        continue;
      }
      auto& d = density[std::string(density_bucket_name(density_bucket(s.instances.size())))];
      d = d.get<int>() + 1;
      for (const auto& i : s.instances) {
        auto& c = scale[std::string(to_string(i.size_bin))][is_crop(i.category) ? "crop" : "weed"];
        c = c.get<int>() + 1;
      }
    }
  }
  return {{"instance_scale", scale}, {"scene_density", density}, {"empty_scenes", empty}};
}

int cmd_build(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out(o.out);
  ensure_dir(out);
  const SynthDataset data = gen_scenes(cfg.synth);
  const Dataset* parts[] = {&data.train, &data.val, &data.test};
  json stats;
  stats["seed"] = cfg.synth.seed;
  stats["config_hash"] = data.train.config_hash;
  for (int i = 0; i < 3; ++i) {
    write_dataset(*parts[i], dataset_path(out, kSplits[i]).string());
    stats["splits"][kSplits[i]] = split_stats(*parts[i]);
  }
  stats["histograms"] = histograms({parts[0], parts[1], parts[2]});
  json negs = json::array();
  for (const auto& st : data.negatives.stats) {
    negs.push_back({{"kind", std::string(to_string(st.kind))},
                    {"candidates", st.candidates},
                    {"requested", st.requested},
                    {"produced", st.produced},
                    {"skipped", st.skipped},
                    {"shortfall", st.shortfall()}});
  }
  stats["test_negatives"] = negs;
  write_text(out / "stats.json", stats.dump(2) + "\n");
  write_text(out / "config.json", run_config_json(cfg));
  if (cfg.verbosity > 0) {
    std::cerr << "built " << data.train.scenes.size() << "/" << data.val.scenes.size() << "/"
              << data.test.scenes.size() << " train/val/test scenes in " << out.string() << "\n";
  }
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out(o.out);
  const Dataset train = load_split(out, "train", cfg);
  ensure_dir(out);
  const SynthConfig scfg = synth_for(cfg, train);

  StageSelect stages = StageSelect::Both;
  if (o.stage == "1") stages = StageSelect::One;
  else if (o.stage == "2") stages = StageSelect::Two;

  std::optional<BoxHead> box;
  if (stages == StageSelect::Two) {
    const fs::path p = out / "box_head.json";
    if (!fs::exists(p)) throw Error("stage 2 needs " + p.string() + " (run stage 1 first)");
    box = BoxHead::load(p.string());
  }
  const auto t0 = std::chrono::steady_clock::now();
  ProgressFn progress;
  if (cfg.verbosity > 0) {
    progress = [](const LogRow& r) {
      std::cerr << "stage " << r.stage << " epoch " << r.epoch << " loss " << r.loss_total << "\n";
    };
  }
  const TrainResult res =
      train_two_stage(train, scfg, cfg.train, stages, box ? &*box : nullptr, progress);
  if (stages != StageSelect::Two) res.box.save((out / "box_head.json").string(), cfg.train.seed);
  if (stages != StageSelect::One) {
    res.hrs.save((out / "hrs.json").string(), cfg.train.seed, cfg.train.ablation);
  }
  write_text(out / "train_log.csv",
             "# seed: " + std::to_string(cfg.train.seed) + "\n" + log_to_csv(res.log));
  if (cfg.verbosity > 0) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "trained (" << cfg.train.ablation.describe() << ") in " << secs << " s\n";
  }
  if (res.aborted) {
    std::cerr << "training aborted: " << res.abort_reason << "\n";
    return 3;
  }
  return 0;
}

int cmd_predict(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out(o.out);
  for (const char* f : {"hrs.json", "box_head.json"}) {
    if (!fs::exists(out / f)) throw Error("missing checkpoint " + (out / f).string());
  }
  Ablation ablation;
  const HrsParams hrs = HrsParams::load((out / "hrs.json").string(), &ablation);
  const BoxHead box = BoxHead::load((out / "box_head.json").string());
  for (const char* split : {"val", "test"}) {
    const Dataset ds = load_split(out, split, cfg);
    const SynthConfig scfg = synth_for(cfg, ds);
    if (hrs.dims().d_v != scfg.d_v || hrs.dims().d_t != scfg.d_t) {
      throw ShapeError("checkpoint widths (" + std::to_string(hrs.dims().d_v) + ", " +
                       std::to_string(hrs.dims().d_t) + ") do not match the dataset encoders (" +
                       std::to_string(scfg.d_v) + ", " + std::to_string(scfg.d_t) + ")");
    }
    PredictionFile file;
    file.seed = ds.seed;
    file.dataset_hash = ds.config_hash;
    file.predictions = predict(ds, scfg, hrs, box, ablation, o.gate_level0);
    write_predictions(file, (out / ("predictions_" + std::string(split) + ".jsonl")).string());
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = resolve(o);
  const fs::path out(o.out);
  const Dataset ds = load_split(out, o.split, cfg);
  const fs::path pp = out / ("predictions_" + o.split + ".jsonl");
  if (!fs::exists(pp)) throw Error("missing predictions " + pp.string());
  const PredictionFile preds = read_predictions(pp.string());
  if (preds.dataset_hash != ds.config_hash) {
    throw Error("predictions were made for dataset " + preds.dataset_hash + ", not " +
                ds.config_hash);
  }
  const EvalReport report = stratify(preds.predictions, ds, cfg.eval);
  json j = json::parse(report_json(report));
  j["seed"] = ds.seed;
  j["split"] = o.split;
  j["strict_negatives"] = cfg.eval.strict_negatives;
  const std::string table = "seed " + std::to_string(ds.seed) + ", split " + o.split + "\n\n" +
                            report_table(report);
  write_text(out / ("report_" + o.split + ".json"), j.dump(2) + "\n");
  write_text(out / ("report_" + o.split + ".txt"), table);
  std::cout << (o.format == "json" ? j.dump(2) + "\n" : table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical visual grounding on synthetic crop/weed scenes"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "overrides synth.seed and train.seed");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("-v,--verbosity", o.verbosity, "0 silences progress output");
  };
  auto* build = app.add_subcommand("build", "generate train/val/test datasets and stats");
  auto* train = app.add_subcommand("train", "train the box head and the HRS head");
  auto* pred = app.add_subcommand("predict", "score proposals for the val and test splits");
  auto* eval = app.add_subcommand("eval", "compute the grounding report");
  for (auto* s : {build, train, pred, eval}) common(s);
  train->add_option("--ablate", o.ablate,
                    "sentence-only, word-only, no-projection, no-constraint, no-interp-iou")
      ->take_all();
  train->add_option("--stage", o.stage, "1, 2 or both")
      ->check(CLI::IsMember({"1", "2", "both"}))
      ->capture_default_str();
  pred->add_flag("--gate-level0", o.gate_level0,
                 "scale instance scores by the level-0 presence probability");
  eval->add_flag("--strict-negatives", o.strict_negatives, "judge every proposal for Neg-Acc");
  eval->add_option("--format", o.format, "stdout format")
      ->check(CLI::IsMember({"json", "table"}))
      ->capture_default_str();
  eval->add_option("--split", o.split, "val or test")
      ->check(CLI::IsMember({"val", "test"}))
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (build->parsed()) return cmd_build(o);
    if (train->parsed()) return cmd_train(o);
    if (pred->parsed()) return cmd_predict(o);
    if (eval->parsed()) return cmd_eval(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
