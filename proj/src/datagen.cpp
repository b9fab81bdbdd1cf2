#include "weedvg/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "weedvg/errors.hpp"
#include "weedvg/io.hpp"

namespace weedvg {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

// 1/3 and 2/3 boundaries; on-boundary values go to the lower bin.
int third_of(double v) {
  if (v <= 1.0 / 3.0) return 0;
  if (v <= 2.0 / 3.0) return 1;
  return 2;
}

}  // namespace

void DatagenConfig::validate() const {
  if (!(min_area_px >= 0.0)) throw ConfigError("min_area_px must be non-negative");
  if (!(size_thresholds[0] > 0.0 && size_thresholds[0] < size_thresholds[1] &&
        size_thresholds[1] < size_thresholds[2])) {
    throw ConfigError("size thresholds must be positive and strictly increasing");
  }
  for (const char* key : {"{size}", "{category}", "{cell}"}) {
    if (instance_template.find(key) == std::string::npos) {
      throw ConfigError(std::string("instance template lacks ") + key);
    }
  }
  if (!(negative_fraction > 0.0 && negative_fraction <= 1.0)) {
    throw ConfigError("negative_fraction must lie in (0, 1]");
  }
  double total = 0.0;
  for (double r : split_ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

std::string DatagenConfig::hash() const {
  std::ostringstream os;
  os << "min_area_px=" << fmt_double(min_area_px);
  for (double t : size_thresholds) os << ";size=" << fmt_double(t);
  os << ";template=" << instance_template << ";negative_fraction=" << fmt_double(negative_fraction);
  for (double r : split_ratios) os << ";split=" << fmt_double(r);
  return io::fnv1a_hex(os.str());
}

double InstanceAnnotation::area_px() const {
  return (bbox_xyxy_px[2] - bbox_xyxy_px[0]) * (bbox_xyxy_px[3] - bbox_xyxy_px[1]);
}

const InstanceAnnotation* SceneAnnotation::find(int instance_id) const {
  for (const auto& inst : instances)
    if (inst.instance_id == instance_id) return &inst;
  return nullptr;
}

// ---- attributes ------------------------------------------------------------

ImageType classify_image(const std::vector<InstanceAnnotation>& instances) {
  bool crop = false, weed = false;
  for (const auto& inst : instances) (is_crop(inst.category) ? crop : weed) = true;
  if (crop && weed) return ImageType::Mixed;
  if (crop) return ImageType::CropOnly;
  if (weed) return ImageType::WeedOnly;
  return ImageType::Empty;
}

GridCell grid_cell(const Box& b) {
  return static_cast<GridCell>(3 * third_of(b.cy) + third_of(b.cx));
}

SizeBin size_bin(double box_w_px, double box_h_px, double image_w, double image_h,
                 const DatagenConfig& cfg) {
  const double r = std::sqrt(box_w_px * box_h_px) / std::sqrt(image_w * image_h);
  if (r < cfg.size_thresholds[0]) return SizeBin::Tiny;
  if (r < cfg.size_thresholds[1]) return SizeBin::Small;
  if (r < cfg.size_thresholds[2]) return SizeBin::Medium;
  return SizeBin::Large;
}

InstanceAnnotation make_instance(int instance_id, Category category, double x1, double y1,
                                 double x2, double y2, int image_w, int image_h,
                                 const DatagenConfig& cfg) {
  if (image_w <= 0 || image_h <= 0) throw DomainError("image dimensions must be positive");
  if (!(x2 >= x1 && y2 >= y1)) throw DomainError("box corners are inverted");
  InstanceAnnotation inst;
  inst.instance_id = instance_id;
  inst.category = category;
  inst.bbox_xyxy_px = {x1, y1, x2, y2};
  inst.box = Box::from_corners(x1 / image_w, y1 / image_h, x2 / image_w, y2 / image_h);
  inst.size_bin = size_bin(x2 - x1, y2 - y1, image_w, image_h, cfg);
  inst.grid_cell = grid_cell(inst.box);
  return inst;
}

SceneAnnotation filter_instances(SceneAnnotation raw, const DatagenConfig& cfg) {
  std::erase_if(raw.instances,
                [&](const InstanceAnnotation& inst) { return inst.area_px() < cfg.min_area_px; });
  raw.image_type = classify_image(raw.instances);
  return raw;
}

// ---- expressions -----------------------------------------------------------

std::string render_instance_text(Category c, SizeBin s, GridCell g, const DatagenConfig& cfg) {
  std::string text = cfg.instance_template;
  replace_all(text, "{size}", to_string(s));
  replace_all(text, "{category}", to_string(c));
  replace_all(text, "{cell}", to_string(g));
  return text;
}

std::string render_image_text(ImageSubject subject) {
  return "there is no " + std::string(to_string(subject)) + " in the image";
}

bool matches(const InstanceAnnotation& inst, const Attributes& a) {
  if (a.category && inst.category != *a.category) return false;
  if (a.subject) {
    if (*a.subject == ImageSubject::Crop && !is_crop(inst.category)) return false;
    if (*a.subject == ImageSubject::Weed && is_crop(inst.category)) return false;
  }
  if (a.size_bin && inst.size_bin != *a.size_bin) return false;
  if (a.grid_cell && inst.grid_cell != *a.grid_cell) return false;
  return true;
}

std::vector<int> matching_instances(const SceneAnnotation& scene, const Attributes& attrs) {
  std::vector<int> ids;
  for (const auto& inst : scene.instances)
    if (matches(inst, attrs)) ids.push_back(inst.instance_id);
  return ids;
}

namespace {

Attributes triple_of(const InstanceAnnotation& inst) {
  return {inst.category, std::nullopt, inst.size_bin, inst.grid_cell};
}

Expression instance_expression(const std::string& id, const SceneAnnotation& scene,
                               const Attributes& attrs, const DatagenConfig& cfg) {
  Expression e;
  e.expression_id = id;
  e.image_id = scene.image_id;
  e.text = render_instance_text(*attrs.category, *attrs.size_bin, *attrs.grid_cell, cfg);
  e.attributes = attrs;
  e.target_ids = matching_instances(scene, attrs);
  e.polarity = e.target_ids.empty() ? Polarity::Negative : Polarity::Positive;
  return e;
}

}  // namespace

Expression gen_instance_expression(const InstanceAnnotation& inst, const SceneAnnotation& scene,
                                   const DatagenConfig& cfg) {
  return instance_expression(scene.image_id + "/pos", scene, triple_of(inst), cfg);
}

std::vector<Expression> gen_instance_expressions(const SceneAnnotation& scene,
                                                 const DatagenConfig& cfg) {
  std::vector<Expression> out;
  std::vector<Attributes> seen;
  for (const auto& inst : scene.instances) {
    const Attributes attrs = triple_of(inst);
    if (std::find(seen.begin(), seen.end(), attrs) != seen.end()) continue;
    seen.push_back(attrs);
    out.push_back(instance_expression(scene.image_id + "/pos-" + std::to_string(out.size()), scene,
                                      attrs, cfg));
  }
  return out;
}

std::vector<Expression> gen_image_negatives(const SceneAnnotation& scene) {
  std::optional<ImageSubject> subject;
  switch (classify_image(scene.instances)) {
    case ImageType::CropOnly: subject = ImageSubject::Weed; break;
    case ImageType::WeedOnly: subject = ImageSubject::Crop; break;
    case ImageType::Empty: subject = ImageSubject::Vegetation; break;
    case ImageType::Mixed: return {};
  }
  Expression e;
  e.expression_id = scene.image_id + "/img";
  e.image_id = scene.image_id;
  e.text = render_image_text(*subject);
  e.level = Level::Image;
  e.polarity = Polarity::Negative;
  e.attributes.subject = subject;
  return {e};
}

TestNegatives gen_test_negatives(const std::vector<SceneAnnotation>& scenes,
                                 const std::vector<Expression>& positives, std::uint64_t seed,
                                 const DatagenConfig& cfg) {
  cfg.validate();
  std::map<std::string, const SceneAnnotation*> by_id;
  for (const auto& s : scenes) by_id[s.image_id] = &s;

  std::vector<const Expression*> pool;
  for (const auto& e : positives) {
    if (e.level == Level::Instance && e.polarity == Polarity::Positive && by_id.count(e.image_id))
      pool.push_back(&e);
  }

  constexpr std::array<NegativeKind, 3> kinds = {
      NegativeKind::ReplaceCategory, NegativeKind::SwapSize, NegativeKind::SwapPosition};
  TestNegatives out;
  // (image, category, size, cell) already emitted as a negative
  std::set<std::tuple<std::string, int, int, int>> used;
  std::map<std::string, int> per_image;

  for (std::size_t k = 0; k < kinds.size(); ++k) {
    NegativeStats& st = out.stats[k];
    st.kind = kinds[k];
    st.candidates = pool.size();
    st.requested = static_cast<std::size_t>(
        std::llround(static_cast<double>(pool.size()) * cfg.negative_fraction));

    std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ull * (k + 1));
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t idx : order) {
      if (st.produced == st.requested) break;
      const Expression& cand = *pool[idx];
      const SceneAnnotation& scene = *by_id.at(cand.image_id);
      const Attributes base = cand.attributes;

      auto admissible = [&](const Attributes& a) {
        return matching_instances(scene, a).empty() &&
               !used.count({scene.image_id, static_cast<int>(*a.category),
                            static_cast<int>(*a.size_bin), static_cast<int>(*a.grid_cell)});
      };

      // Swaps prefer values held by other instances of the same category.
      std::vector<Attributes> preferred, fallback;
      if (kinds[k] == NegativeKind::ReplaceCategory) {
        for (Category c : kAllCategories) {
          if (c == *base.category) continue;
          Attributes a = base;
          a.category = c;
          if (admissible(a)) fallback.push_back(a);
        }
      } else {
        const bool size = kinds[k] == NegativeKind::SwapSize;
        const int n_values = size ? kNumSizeBins : kNumGridCells;
        for (int v = 0; v < n_values; ++v) {
          Attributes a = base;
          if (size) {
            if (v == static_cast<int>(*base.size_bin)) continue;
            a.size_bin = static_cast<SizeBin>(v);
          } else {
            if (v == static_cast<int>(*base.grid_cell)) continue;
            a.grid_cell = static_cast<GridCell>(v);
          }
          if (!admissible(a)) continue;
          const bool held = std::any_of(
              scene.instances.begin(), scene.instances.end(), [&](const InstanceAnnotation& i) {
                return i.category == *base.category &&
                       (size ? i.size_bin == *a.size_bin : i.grid_cell == *a.grid_cell);
              });
          (held ? preferred : fallback).push_back(a);
        }
      }
      const auto& choices = preferred.empty() ? fallback : preferred;
      if (choices.empty()) {
        ++st.skipped;
        continue;
      }
      std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
      const Attributes chosen = choices[pick(rng)];
      used.insert({scene.image_id, static_cast<int>(*chosen.category),
                   static_cast<int>(*chosen.size_bin), static_cast<int>(*chosen.grid_cell)});

      Expression e = instance_expression(
          scene.image_id + "/neg-" + std::to_string(per_image[scene.image_id]++), scene, chosen,
          cfg);
      e.negative_kind = kinds[k];
      out.expressions.push_back(std::move(e));
      ++st.produced;
    }
  }
  return out;
}

// ---- splits ----------------------------------------------------------------

std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& ratios) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

  constexpr double kEps = 1e-9;
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = static_cast<double>(n) * ratios[i];
    const double fl = std::floor(exact + kEps);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = std::max(0.0, exact - fl);
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + kEps; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 3, ++assigned) ++counts[order[i]];
  return counts;
}

Splits stratified_split(const std::vector<SceneAnnotation>& scenes, std::uint64_t seed,
                        const DatagenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::array<std::vector<std::size_t>, 3> parts;
  for (ImageType t : kAllImageTypes) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      if (scenes[i].image_type == t) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto counts = apportion(idx.size(), cfg.split_ratios);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t c = 0; c < counts[s]; ++c) parts[s].push_back(idx[pos++]);
  }
  Splits out;
  std::array<std::vector<SceneAnnotation>*, 3> dst = {&out.train, &out.val, &out.test};
  for (std::size_t s = 0; s < 3; ++s) {
    std::sort(parts[s].begin(), parts[s].end());
    for (std::size_t i : parts[s]) dst[s]->push_back(scenes[i]);
  }
  return out;
}

// ---- dataset ---------------------------------------------------------------

const SceneAnnotation* Dataset::scene(const std::string& image_id) const {
  for (const auto& s : scenes)
    if (s.image_id == image_id) return &s;
  return nullptr;
}

Dataset annotate(std::vector<SceneAnnotation> raw, bool with_test_negatives, std::uint64_t seed,
                 const DatagenConfig& cfg, TestNegatives* negatives_out) {
  cfg.validate();
  Dataset ds;
  ds.config_hash = cfg.hash();
  ds.seed = seed;
  std::map<std::string, std::size_t> scene_pos;
  for (auto& s : raw) {
    scene_pos[s.image_id] = ds.scenes.size();
    ds.scenes.push_back(filter_instances(std::move(s), cfg));
  }
  for (const auto& s : ds.scenes) {
    for (auto& e : gen_instance_expressions(s, cfg)) ds.expressions.push_back(std::move(e));
    for (auto& e : gen_image_negatives(s)) ds.expressions.push_back(std::move(e));
  }
  if (with_test_negatives) {
    TestNegatives neg = gen_test_negatives(ds.scenes, ds.expressions, seed, cfg);
    for (const auto& e : neg.expressions) ds.expressions.push_back(e);
    if (negatives_out) *negatives_out = std::move(neg);
  }
  std::stable_sort(ds.expressions.begin(), ds.expressions.end(),
                   [&](const Expression& a, const Expression& b) {
                     return scene_pos.at(a.image_id) < scene_pos.at(b.image_id);
                   });
  return ds;
}

namespace {

json attributes_json(const Attributes& a) {
  json j = json::object();
  if (a.category) j["category"] = to_string(*a.category);
  if (a.subject) j["subject"] = to_string(*a.subject);
  if (a.size_bin) j["size_bin"] = to_string(*a.size_bin);
  if (a.grid_cell) j["grid_cell"] = to_string(*a.grid_cell);
  return j;
}

template <typename Parser>
auto parse_enum(const json& j, const char* key, Parser parser, std::size_t line) {
  const std::string s = j.at(key).get<std::string>();
  auto v = parser(s);
  if (!v) throw ParseError(line, std::string("unknown ") + key + " '" + s + "'");
  return *v;
}

SceneAnnotation parse_scene(const json& j, std::size_t line, const DatagenConfig& cfg) {
  SceneAnnotation s;
  s.image_id = j.at("image_id").get<std::string>();
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  if (s.width <= 0 || s.height <= 0) throw ParseError(line, "image dimensions must be positive");
  s.image_type = parse_enum(j, "image_type", parse_image_type, line);
  for (const auto& ji : j.at("instances")) {
    const auto xyxy = ji.at("bbox_xyxy_px").get<std::vector<double>>();
    if (xyxy.size() != 4) throw ParseError(line, "bbox_xyxy_px needs four values");
    InstanceAnnotation inst;
    try {
      inst = make_instance(ji.at("instance_id").get<int>(),
                           parse_enum(ji, "category", parse_category, line), xyxy[0], xyxy[1],
                           xyxy[2], xyxy[3], s.width, s.height, cfg);
    } catch (const DomainError& e) {
      throw ParseError(line, e.what());
    }
    inst.size_bin = parse_enum(ji, "size_bin", parse_size_bin, line);
    inst.grid_cell = parse_enum(ji, "grid_cell", parse_grid_cell, line);
    s.instances.push_back(inst);
  }
  if (classify_image(s.instances) != s.image_type) {
    throw ParseError(line, "image_type disagrees with the instance categories");
  }
  return s;
}

Expression parse_expression(const json& j, std::size_t line) {
  Expression e;
  e.expression_id = j.at("expression_id").get<std::string>();
  e.image_id = j.at("image_id").get<std::string>();
  e.text = j.at("text").get<std::string>();
  e.level = parse_enum(j, "level", parse_level, line);
  e.polarity = parse_enum(j, "polarity", parse_polarity, line);
  e.negative_kind = parse_enum(j, "negative_kind", parse_negative_kind, line);
  const json& a = j.at("attributes");
  if (a.contains("category")) e.attributes.category = parse_enum(a, "category", parse_category, line);
  if (a.contains("subject"))
    e.attributes.subject = parse_enum(a, "subject", parse_image_subject, line);
  if (a.contains("size_bin")) e.attributes.size_bin = parse_enum(a, "size_bin", parse_size_bin, line);
  if (a.contains("grid_cell"))
    e.attributes.grid_cell = parse_enum(a, "grid_cell", parse_grid_cell, line);
  e.target_ids = j.at("target_ids").get<std::vector<int>>();
  if ((e.polarity == Polarity::Negative) != e.target_ids.empty()) {
    throw ParseError(line, "negative expressions have no targets, positives at least one");
  }
  return e;
}

void check_header(const json& j, std::size_t line) {
  if (j.value("format", std::string()) != kDatasetFormat) {
    throw ParseError(line, std::string("dataset format is not ") + kDatasetFormat);
  }
  if (!j.contains("version") || !j["version"].is_number_integer() ||
      j["version"].get<int>() != kDatasetVersion) {
    throw ParseError(line, "unsupported dataset version " +
                               (j.contains("version") ? j["version"].dump() : "<missing>") +
                               ", expected " + std::to_string(kDatasetVersion));
  }
}

}  // namespace

std::string serialize_dataset(const Dataset& ds) {
  std::string out;
  json header = {{"format", kDatasetFormat},
                 {"version", kDatasetVersion},
                 {"config_hash", ds.config_hash},
                 {"seed", ds.seed}};
  out += header.dump() + '\n';
  for (const auto& s : ds.scenes) {
    json inst = json::array();
    for (const auto& i : s.instances) {
      inst.push_back({{"instance_id", i.instance_id},
                      {"category", to_string(i.category)},
                      {"bbox_xyxy_px", i.bbox_xyxy_px},
                      {"size_bin", to_string(i.size_bin)},
                      {"grid_cell", to_string(i.grid_cell)}});
    }
    json j = {{"image_id", s.image_id},         {"width", s.width},
              {"height", s.height},             {"image_type", to_string(s.image_type)},
              {"instances", std::move(inst)}};
    out += j.dump() + '\n';
  }
  for (const auto& e : ds.expressions) {
    json j = {{"expression_id", e.expression_id},
              {"image_id", e.image_id},
              {"level", to_string(e.level)},
              {"polarity", to_string(e.polarity)},
              {"negative_kind", to_string(e.negative_kind)},
              {"text", e.text},
              {"attributes", attributes_json(e.attributes)},
              {"target_ids", e.target_ids}};
    out += j.dump() + '\n';
  }
  return out;
}

Dataset parse_dataset(const std::string& text, const DatagenConfig& cfg) {
  Dataset ds;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.empty()) continue;
    json j;
    try {
      j = json::parse(raw);
    } catch (const json::exception& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line, "record is not a JSON object");
    try {
      if (j.contains("format") || j.contains("version")) {
        check_header(j, line);
        if (have_header) throw ParseError(line, "duplicate dataset header");
        have_header = true;
        ds.config_hash = j.value("config_hash", std::string());
        ds.seed = j.value("seed", std::uint64_t{0});
        continue;
      }
      if (!have_header) throw ParseError(line, "dataset header missing");
      if (j.contains("expression_id")) {
        ds.expressions.push_back(parse_expression(j, line));
      } else {
        ds.scenes.push_back(parse_scene(j, line, cfg));
      }
    } catch (const json::exception& e) {
      throw ParseError(line, std::string("malformed record: ") + e.what());
    }
  }
  if (!have_header) throw ParseError(line == 0 ? 1 : line, "dataset header missing");
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path);
  out << serialize_dataset(ds);
  if (!out) throw Error("failed writing dataset " + path);
}

Dataset read_dataset(const std::string& path, const DatagenConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str(), cfg);
}

}  // namespace weedvg
