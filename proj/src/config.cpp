#include "weedvg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "weedvg/errors.hpp"

namespace weedvg {

using nlohmann::json;

namespace {

// Reads or writes the fields of one section; `reading` picks the direction.
class Section {
 public:
  Section(json& node, std::string name, bool reading)
      : node_(node), name_(std::move(name)), reading_(reading) {
    if (reading_ && !node_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
  }

  template <typename T>
  Section& field(const std::string& key, T& value) {
    known_.insert(key);
    if (!reading_) {
      node_[key] = value;
    } else if (node_.contains(key)) {
      try {
        value = node_.at(key).get<T>();
      } catch (const json::exception& e) {
        throw ConfigError("bad value for " + name_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  // Enum stored by name.
  template <typename T, typename Parse, typename Show>
  Section& named(const std::string& key, T& value, Parse parse, Show show) {
    known_.insert(key);
    if (!reading_) {
      node_[key] = show(value);
    } else if (node_.contains(key)) {
      const auto v = parse(node_.at(key).get<std::string>());
      if (!v) throw ConfigError("bad value for " + name_ + "." + key);
      value = *v;
    }
    return *this;
  }

  void finish() const {
    if (!reading_) return;
    for (const auto& [key, _] : node_.items()) {
      if (!known_.count(key)) throw ConfigError("unknown config key " + name_ + "." + key);
    }
  }

 private:
  json& node_;
  std::string name_;
  bool reading_;
  std::set<std::string> known_;
};

json& child(json& root, const char* key, bool reading) {
  if (!reading) return root[key];
  static json empty = json::object();
  if (!root.contains(key)) {
    empty = json::object();
    return empty;
  }
  return root[key];
}

void bind(json& root, RunConfig& c, bool reading) {
  if (reading && !root.is_object()) throw ConfigError("config must be a JSON object");
  if (reading) {
    for (const auto& [key, _] : root.items()) {
      if (key != "synth" && key != "datagen" && key != "train" && key != "eval" &&
          key != "verbosity") {
        throw ConfigError("unknown config section " + key);
      }
    }
  }
  if (!reading) root["verbosity"] = c.verbosity;
  else if (root.contains("verbosity")) c.verbosity = root["verbosity"].get<int>();

  SynthConfig& s = c.synth;
  Section(child(root, "synth", reading), "synth", reading)
      .field("seed", s.seed)
      .field("num_scenes", s.num_scenes)
      .field("image_width", s.image_width)
      .field("image_height", s.image_height)
      .field("image_type_mix", s.image_type_mix)
      .field("density_mix", s.density_mix)
      .field("size_mix", s.size_mix)
      .field("weed_share_mixed", s.weed_share_mixed)
      .field("feature_noise", s.feature_noise)
      .field("context_strength", s.context_strength)
      .field("distractors_min", s.distractors_min)
      .field("distractors_max", s.distractors_max)
      .field("distractor_attributes", s.distractor_attributes)
      .field("centre_jitter", s.centre_jitter)
      .field("scale_jitter", s.scale_jitter)
      .field("evidence_noise", s.evidence_noise)
      .field("max_tokens", s.max_tokens)
      .field("d_v", s.d_v)
      .field("d_t", s.d_t)
      .field("placement_attempts", s.placement_attempts)
      .finish();

  DatagenConfig& d = c.synth.datagen;
  Section(child(root, "datagen", reading), "datagen", reading)
      .field("min_area_px", d.min_area_px)
      .field("size_thresholds", d.size_thresholds)
      .field("instance_template", d.instance_template)
      .field("negative_fraction", d.negative_fraction)
      .field("split_ratios", d.split_ratios)
      .finish();

  TrainConfig& t = c.train;
  auto parse_ablation = [](const std::string& s) -> std::optional<Ablation> {
    Ablation a;
    std::istringstream in(s);
    for (std::string part; std::getline(in, part, '+');) {
      try {
        a.enable(part);
      } catch (const ConfigError&) {
        return std::nullopt;
      }
    }
    return a;
  };
  Section(child(root, "train", reading), "train", reading)
      .field("seed", t.seed)
      .field("stage1_epochs", t.stage1_epochs)
      .field("stage2_epochs", t.stage2_epochs)
      .field("batch_size", t.batch_size)
      .field("lr_stage1", t.lr_stage1)
      .field("lr_stage2", t.lr_stage2)
      .field("adam_beta1", t.adam.beta1)
      .field("adam_beta2", t.adam.beta2)
      .field("adam_eps", t.adam.eps)
      .field("weight_decay", t.adam.weight_decay)
      .field("tau_init", t.tau_init)
      .field("d", t.dims.d)
      .field("heads", t.dims.heads)
      .field("d_ff", t.dims.d_ff)
      .field("d_h", t.dims.d_h)
      .field("alpha", t.interp.alpha)
      .field("lambda_centre", t.match.lambda_centre)
      .field("lambda_size", t.match.lambda_size)
      .field("hmce_mixed", t.hmce.mixed)
      .field("hmce_single", t.hmce.single)
      .field("hmce_empty", t.hmce.empty)
      .named("ablation", t.ablation, parse_ablation, [](const Ablation& a) { return a.describe(); })
      .field("copy_paste_prob", t.copy_paste_prob)
      .field("max_expressions_per_image", t.max_expressions_per_image)
      .finish();
  if (reading) {
    t.dims.d_v = s.d_v;
    t.dims.d_t = s.d_t;
  }

  Section(child(root, "eval", reading), "eval", reading)
      .field("strict_negatives", c.eval.strict_negatives)
      .finish();
}

}  // namespace

void RunConfig::set_seed(std::uint64_t seed) {
  synth.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  synth.validate();
  train.validate();
  if (train.dims.d_v != synth.d_v || train.dims.d_t != synth.d_t) {
    throw ConfigError("HRS input widths must equal the synthetic feature widths");
  }
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  bind(root, c, true);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string run_config_json(const RunConfig& cfg) {
  json root = json::object();
  RunConfig copy = cfg;
  bind(root, copy, false);
  return root.dump(2) + "\n";
}

}  // namespace weedvg
