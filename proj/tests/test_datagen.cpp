#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "weedvg/datagen.hpp"
#include "weedvg/errors.hpp"

namespace weedvg {
namespace {

SceneAnnotation scene_of(std::string id, std::vector<InstanceAnnotation> inst, int w = 1000,
                         int h = 1000) {
  SceneAnnotation s;
  s.image_id = std::move(id);
  s.width = w;
  s.height = h;
  s.instances = std::move(inst);
  s.image_type = classify_image(s.instances);
  return s;
}

// Raw scenes with a few categories packed into few cells, so attribute triples collide.
std::vector<SceneAnnotation> random_scenes(std::uint64_t seed, int n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(0, 9), cat(0, 3), cell(0, 2);
  std::uniform_real_distribution<double> side(8.0, 300.0), jitter(0.0, 1.0);
  std::vector<SceneAnnotation> out;
  for (int s = 0; s < n; ++s) {
    std::vector<InstanceAnnotation> inst;
    const int k = count(rng);
    const bool crops = s % 4 != 1, weeds = s % 4 != 0;
    for (int i = 0; i < k; ++i) {
      Category c = cat(rng) == 0 && weeds ? Category::Weed
                                          : (crops ? kAllCategories[cat(rng) % 3] : Category::Weed);
      if (!crops && !weeds) break;
      const double w = side(rng), h = side(rng);
      const double cx = (cell(rng) + jitter(rng)) / 3.0 * 1000.0, cy = (cell(rng) + jitter(rng)) / 3.0 * 1000.0;
      const double x1 = std::clamp(cx - w / 2, 0.0, 999.0), y1 = std::clamp(cy - h / 2, 0.0, 999.0);
      const double x2 = std::clamp(cx + w / 2, x1 + 1.0, 1000.0), y2 = std::clamp(cy + h / 2, y1 + 1.0, 1000.0);
      inst.push_back(make_instance(i, c, x1, y1, x2, y2, 1000, 1000));
    }
    if (s % 7 == 3) inst.clear();
    out.push_back(scene_of("img" + std::to_string(s), std::move(inst)));
  }
  return out;
}

// Independent oracle: instances whose full triple equals (c, s, g).
std::set<int> scan(const SceneAnnotation& scene, Category c, SizeBin s, GridCell g) {
  std::set<int> ids;
  for (const auto& i : scene.instances)
    if (i.category == c && i.size_bin == s && i.grid_cell == g) ids.insert(i.instance_id);
  return ids;
}

// ---- attributes -------------------------------------------------------------

TEST(DatagenAttributes, AreaFilterExamples) {
  SceneAnnotation raw = scene_of("a", {make_instance(0, Category::Maize, 0, 0, 15, 20, 1000, 1000),
                                       make_instance(1, Category::Weed, 100, 100, 110, 110, 1000, 1000)});
  EXPECT_EQ(raw.image_type, ImageType::Mixed);
  const SceneAnnotation kept = filter_instances(raw);
  ASSERT_EQ(kept.instances.size(), 1u);
  EXPECT_EQ(kept.instances[0].instance_id, 0);
  EXPECT_EQ(kept.image_type, ImageType::CropOnly);

  SceneAnnotation tiny = scene_of("b", {make_instance(0, Category::Weed, 0, 0, 10, 10, 1000, 1000)});
  EXPECT_EQ(filter_instances(tiny).image_type, ImageType::Empty);
  // exactly 16 x 16 stays
  EXPECT_EQ(filter_instances(scene_of("c", {make_instance(0, Category::Pea, 5, 5, 21, 21, 100, 100)}))
                .instances.size(),
            1u);
}

TEST(DatagenAttributes, GridCellExamples) {
  EXPECT_EQ(grid_cell(Box{0.1, 0.2, 0.05, 0.05}), GridCell::TopLeft);
  EXPECT_EQ(grid_cell(Box{0.5, 0.5, 0.05, 0.05}), GridCell::Centre);
  EXPECT_EQ(grid_cell(Box{1.0 / 3.0, 0.5, 0.05, 0.05}), GridCell::MiddleLeft);
  EXPECT_EQ(grid_cell(Box{2.0 / 3.0, 2.0 / 3.0, 0.05, 0.05}), GridCell::Centre);
  EXPECT_EQ(grid_cell(Box{0.9, 0.95, 0.05, 0.05}), GridCell::BottomRight);
  EXPECT_EQ(to_string(GridCell::Centre), "centre");
}

TEST(DatagenAttributes, SizeBinExamples) {
  EXPECT_EQ(size_bin(16, 16, 1445, 1445), SizeBin::Tiny);
  EXPECT_NEAR(16.0 / 1445.0, 0.0111, 1e-4);
  EXPECT_EQ(size_bin(1402, 1402, 1445, 1445), SizeBin::Large);
  EXPECT_NEAR(1402.0 / 1445.0, 0.97, 5e-3);
  EXPECT_EQ(size_bin(12, 12, 100, 100), SizeBin::Medium);  // r = 0.12 exactly
  EXPECT_EQ(size_bin(5, 5, 100, 100), SizeBin::Small);     // r = 0.05 exactly
  EXPECT_EQ(size_bin(30, 30, 100, 100), SizeBin::Large);   // r = 0.30 exactly
  EXPECT_EQ(size_bin(4, 4, 100, 100), SizeBin::Tiny);
}

TEST(DatagenAttributes, ClassifyImage) {
  EXPECT_EQ(classify_image({}), ImageType::Empty);
  auto one = [](Category c) { return make_instance(0, c, 0, 0, 50, 50, 100, 100); };
  EXPECT_EQ(classify_image({one(Category::Soy), one(Category::Bean)}), ImageType::CropOnly);
  EXPECT_EQ(classify_image({one(Category::Weed)}), ImageType::WeedOnly);
  EXPECT_EQ(classify_image({one(Category::Weed), one(Category::Potato)}), ImageType::Mixed);
}

TEST(DatagenAttributes, MakeInstanceNormalisesAndRejectsBadBoxes) {
  const InstanceAnnotation i = make_instance(3, Category::Sunflower, 100, 200, 300, 600, 1000, 800);
  EXPECT_NEAR(i.box.cx, 0.2, 1e-15);
  EXPECT_NEAR(i.box.cy, 0.5, 1e-15);
  EXPECT_NEAR(i.box.w, 0.2, 1e-15);
  EXPECT_NEAR(i.box.h, 0.5, 1e-15);
  EXPECT_EQ(i.area_px(), 80000.0);
  EXPECT_THROW(make_instance(0, Category::Maize, 10, 10, 5, 20, 100, 100), DomainError);
  EXPECT_THROW(make_instance(0, Category::Maize, 0, 0, 5, 5, 0, 100), DomainError);
}

// ---- expressions ------------------------------------------------------------

TEST(DatagenExpressions, TemplateInstantiation) {
  EXPECT_EQ(render_instance_text(Category::Maize, SizeBin::Small, GridCell::TopLeft),
            "the small maize at the top left of the image");
  EXPECT_EQ(render_instance_text(Category::SugarBeet, SizeBin::Large, GridCell::Centre),
            "the large sugar beet at the centre of the image");
}

TEST(DatagenExpressions, IdenticalAttributesShareOneExpression) {
  const SceneAnnotation s = scene_of(
      "w", {make_instance(0, Category::Weed, 10, 10, 40, 40, 1000, 1000),
            make_instance(1, Category::Weed, 50, 50, 80, 80, 1000, 1000),
            make_instance(2, Category::Maize, 500, 500, 700, 700, 1000, 1000)});
  const auto ex = gen_instance_expressions(s);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].target_ids, (std::vector<int>{0, 1}));
  EXPECT_EQ(ex[1].target_ids, (std::vector<int>{2}));
  EXPECT_EQ(gen_instance_expression(s.instances[1], s).target_ids, (std::vector<int>{0, 1}));
}

TEST(DatagenExpressions, ImageNegatives) {
  auto one = [](Category c) { return make_instance(0, c, 0, 0, 50, 50, 100, 100); };
  const auto crop = gen_image_negatives(scene_of("c", {one(Category::Bean)}));
  ASSERT_EQ(crop.size(), 1u);
  EXPECT_EQ(crop[0].text, "there is no weed in the image");
  EXPECT_EQ(crop[0].level, Level::Image);
  EXPECT_EQ(crop[0].polarity, Polarity::Negative);
  EXPECT_TRUE(crop[0].target_ids.empty());
  EXPECT_FALSE(crop[0].attributes.grid_cell || crop[0].attributes.size_bin);
  EXPECT_EQ(gen_image_negatives(scene_of("w", {one(Category::Weed)}))[0].text,
            "there is no crop in the image");
  EXPECT_EQ(gen_image_negatives(scene_of("e", {}))[0].text, "there is no vegetation in the image");
  EXPECT_TRUE(gen_image_negatives(scene_of("m", {one(Category::Weed), one(Category::Pea)})).empty());
}

TEST(DatagenExpressions, PositiveTargetsMatchExhaustiveScan) {
  for (const auto& raw : random_scenes(5, 60)) {
    const SceneAnnotation s = filter_instances(raw);
    const auto ex = gen_instance_expressions(s);
    EXPECT_LE(ex.size(), s.instances.size());
    std::set<std::string> texts;
    for (const auto& e : ex) {
      EXPECT_TRUE(texts.insert(e.text).second);
      const std::set<int> oracle =
          scan(s, *e.attributes.category, *e.attributes.size_bin, *e.attributes.grid_cell);
      EXPECT_EQ(std::set<int>(e.target_ids.begin(), e.target_ids.end()), oracle);
      EXPECT_FALSE(e.target_ids.empty());
    }
  }
}

TEST(DatagenNegatives, ReplaceExampleOnMaizeOnlyScene) {
  const SceneAnnotation s =
      scene_of("m", {make_instance(0, Category::Maize, 50, 50, 120, 120, 1000, 1000)});
  const auto pos = gen_instance_expressions(s);
  DatagenConfig cfg;
  cfg.negative_fraction = 1.0;
  const TestNegatives neg = gen_test_negatives({s}, pos, 1, cfg);
  ASSERT_EQ(neg.stats[0].produced, 1u);
  const Expression* replace = nullptr;
  for (const auto& e : neg.expressions)
    if (e.negative_kind == NegativeKind::ReplaceCategory) replace = &e;
  ASSERT_NE(replace, nullptr);
  EXPECT_NE(*replace->attributes.category, Category::Maize);
  EXPECT_EQ(replace->attributes.size_bin, pos[0].attributes.size_bin);
  EXPECT_EQ(replace->attributes.grid_cell, pos[0].attributes.grid_cell);
  EXPECT_TRUE(matching_instances(s, replace->attributes).empty());
  EXPECT_EQ(replace->text, render_instance_text(*replace->attributes.category,
                                                *replace->attributes.size_bin,
                                                *replace->attributes.grid_cell));
}

TEST(DatagenNegatives, SwapPositionMovesToAnEmptyCell) {
  const SceneAnnotation s =
      scene_of("p", {make_instance(0, Category::Weed, 50, 50, 120, 120, 1000, 1000),
                     make_instance(1, Category::Weed, 450, 450, 520, 520, 1000, 1000)});
  DatagenConfig cfg;
  cfg.negative_fraction = 1.0;
  const TestNegatives neg = gen_test_negatives({s}, gen_instance_expressions(s), 3, cfg);
  int swaps = 0;
  for (const auto& e : neg.expressions) {
    if (e.negative_kind != NegativeKind::SwapPosition) continue;
    ++swaps;
    EXPECT_EQ(e.attributes.category, Category::Weed);
    EXPECT_TRUE(scan(s, Category::Weed, *e.attributes.size_bin, *e.attributes.grid_cell).empty());
  }
  EXPECT_EQ(swaps, 2);
}

TEST(DatagenNegatives, EveryNegativeHasNoMatchingInstance) {
  std::vector<SceneAnnotation> scenes;
  std::vector<Expression> pos;
  for (const auto& raw : random_scenes(11, 120)) {
    scenes.push_back(filter_instances(raw));
    for (auto& e : gen_instance_expressions(scenes.back())) pos.push_back(e);
  }
  const TestNegatives neg = gen_test_negatives(scenes, pos, 77);
  std::map<std::string, const SceneAnnotation*> by_id;
  for (const auto& s : scenes) by_id[s.image_id] = &s;
  std::set<std::tuple<std::string, int, int, int>> seen;
  for (const auto& e : neg.expressions) {
    EXPECT_EQ(e.polarity, Polarity::Negative);
    EXPECT_TRUE(e.target_ids.empty());
    EXPECT_TRUE(scan(*by_id.at(e.image_id), *e.attributes.category, *e.attributes.size_bin,
                     *e.attributes.grid_cell)
                    .empty())
        << e.text;
    EXPECT_TRUE(seen.insert({e.image_id, int(*e.attributes.category), int(*e.attributes.size_bin),
                             int(*e.attributes.grid_cell)})
                    .second);
  }
  for (const NegativeStats& st : neg.stats) {
    EXPECT_EQ(st.candidates, pos.size());
    EXPECT_EQ(st.requested, static_cast<std::size_t>(std::llround(pos.size() / 3.0)));
    EXPECT_LE(st.produced, st.requested);
    EXPECT_EQ(st.requested, st.produced + st.shortfall());
  }
  EXPECT_EQ(neg.stats[0].produced, neg.stats[0].requested);
}

TEST(DatagenNegatives, ExhaustionIsAShortfallNotAnError) {
  // Every other category and size already present at the only occupied cell.
  std::vector<InstanceAnnotation> inst;
  int id = 0;
  for (Category c : kAllCategories) inst.push_back(make_instance(id++, c, 10, 10, 40, 40, 1000, 1000));
  const SceneAnnotation s = scene_of("full", inst);
  DatagenConfig cfg;
  cfg.negative_fraction = 1.0;
  const TestNegatives neg = gen_test_negatives({s}, gen_instance_expressions(s), 5, cfg);
  EXPECT_EQ(neg.stats[0].produced, 0u);
  EXPECT_EQ(neg.stats[0].shortfall(), 9u);
  EXPECT_EQ(neg.stats[0].skipped, 9u);
}

// ---- splits -----------------------------------------------------------------

TEST(DatagenSplits, ApportionExamples) {
  EXPECT_EQ(apportion(100, {0.7, 0.15, 0.15}), (std::array<std::size_t, 3>{70, 15, 15}));
  EXPECT_EQ(apportion(10, {0.7, 0.15, 0.15}), (std::array<std::size_t, 3>{7, 2, 1}));
  EXPECT_EQ(apportion(0, {0.7, 0.15, 0.15}), (std::array<std::size_t, 3>{0, 0, 0}));
  EXPECT_THROW(apportion(10, {0.7, 0.2, 0.2}), ConfigError);
}

TEST(DatagenSplits, PartitionAndPerTypeProportions) {
  std::vector<SceneAnnotation> scenes;
  for (const auto& s : random_scenes(21, 237)) scenes.push_back(filter_instances(s));
  const Splits sp = stratified_split(scenes, 4);
  std::multiset<std::string> all;
  for (const auto* part : {&sp.train, &sp.val, &sp.test})
    for (const auto& s : *part) all.insert(s.image_id);
  std::multiset<std::string> input;
  for (const auto& s : scenes) input.insert(s.image_id);
  EXPECT_EQ(all, input);

  for (ImageType t : kAllImageTypes) {
    auto count = [&](const std::vector<SceneAnnotation>& v) {
      return static_cast<double>(
          std::count_if(v.begin(), v.end(), [&](const auto& s) { return s.image_type == t; }));
    };
    const double n = count(scenes);
    EXPECT_LE(std::abs(count(sp.train) - 0.70 * n), 1.0) << to_string(t);
    EXPECT_LE(std::abs(count(sp.val) - 0.15 * n), 1.0) << to_string(t);
    EXPECT_LE(std::abs(count(sp.test) - 0.15 * n), 1.0) << to_string(t);
  }
  EXPECT_EQ(stratified_split(scenes, 4).test.front().image_id, sp.test.front().image_id);
}

// ---- dataset files ----------------------------------------------------------

TEST(DatagenFiles, RoundTripIsExactAndDeterministic) {
  const Dataset a = annotate(random_scenes(31, 40), true, 9);
  const std::string text = serialize_dataset(a);
  EXPECT_EQ(text, serialize_dataset(annotate(random_scenes(31, 40), true, 9)));
  const Dataset b = parse_dataset(text);
  EXPECT_EQ(serialize_dataset(b), text);
  ASSERT_EQ(b.scenes.size(), a.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) {
    ASSERT_EQ(b.scenes[i].instances.size(), a.scenes[i].instances.size());
    for (std::size_t k = 0; k < a.scenes[i].instances.size(); ++k) {
      EXPECT_EQ(b.scenes[i].instances[k].bbox_xyxy_px, a.scenes[i].instances[k].bbox_xyxy_px);
      EXPECT_EQ(b.scenes[i].instances[k].size_bin, a.scenes[i].instances[k].size_bin);
    }
  }
  EXPECT_EQ(b.expressions.size(), a.expressions.size());
  EXPECT_EQ(b.config_hash, DatagenConfig{}.hash());
  for (const auto& s : b.scenes)
    for (const auto& i : s.instances) EXPECT_GE(i.area_px(), 256.0);
}

TEST(DatagenFiles, MalformedRecordsReportTheLine) {
  const std::string text = serialize_dataset(annotate(random_scenes(2, 5), false, 1));
  auto nth_line_start = [&](int n) {
    std::size_t pos = 0;
    for (int i = 0; i < n; ++i) pos = text.find('\n', pos) + 1;
    return pos;
  };
  {
    std::string bad = text;
    const std::size_t at = bad.find("\"maize\"") != std::string::npos ? bad.find("\"maize\"")
                                                                       : bad.find("\"weed\"");
    ASSERT_NE(at, std::string::npos);
    bad.replace(at, bad.find('"', at + 1) - at + 1, "\"cactus\"");
    const std::size_t line = std::count(bad.begin(), bad.begin() + at, '\n') + 1;
    try {
      parse_dataset(bad);
      FAIL() << "unknown category accepted";
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), line);
    }
  }
  {
    std::string bad = text;
    bad.insert(nth_line_start(2), "{not json\n");
    try {
      parse_dataset(bad);
      FAIL();
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 3u);
    }
  }
  {
    std::string bad = text;
    const std::size_t v = bad.find("\"version\":1");
    ASSERT_NE(v, std::string::npos);
    bad.replace(v, 11, "\"version\":2");
    try {
      parse_dataset(bad);
      FAIL();
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
  }
  EXPECT_THROW(parse_dataset(text.substr(nth_line_start(1))), ParseError);
}

}  // namespace
}  // namespace weedvg
