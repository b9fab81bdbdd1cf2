#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>

#include "weedvg/errors.hpp"
#include "weedvg/eval.hpp"
#include "eval_reference.hpp"

namespace weedvg {
namespace {

using namespace test;

// ---- per-expression examples ------------------------------------------------

TEST(TopK, ExactTopBoxIsHit) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30})});
  const auto e = positive("e", s, {0});
  const auto p = pred(e, {{10, 10, 30, 30}, {60, 60, 70, 70}});
  EXPECT_TRUE(topk_hit(&p, e, s, 1));
  const auto ds = dataset({s}, {e});
  EXPECT_DOUBLE_EQ(*topk(std::vector<Prediction>{p}, ds, 1), 100.0);
  EXPECT_DOUBLE_EQ(*mean_iou(std::vector<Prediction>{p}, ds), 100.0);
}

TEST(TopK, HitAtRankThreeIsTopFiveOnly) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30})});
  const auto e = positive("e", s, {0});
  const auto p = pred(e, {{60, 60, 70, 70}, {80, 80, 90, 90}, {10, 10, 30, 30}});
  EXPECT_FALSE(topk_hit(&p, e, s, 1));
  EXPECT_TRUE(topk_hit(&p, e, s, 5));
  EXPECT_TRUE(topk_hit(&p, e, s, 3));
  EXPECT_FALSE(topk_hit(&p, e, s, 2));
}

TEST(TopK, IouOfExactlyHalfCounts) {
  const auto s = scene("a", {inst(0, Category::Maize, {0, 0, 20, 20})});
  const auto e = positive("e", s, {0});
  // 20x10 box inside the target: inter 200, union 400
  const auto p = pred(e, {{0, 0, 20, 10}});
  ASSERT_EQ(ref_iou({0, 0, 20, 10}, {0, 0, 20, 20}), 0.5);
  EXPECT_TRUE(topk_hit(&p, e, s, 1));
  const auto just_below = pred(e, {{0, 0, 20, 9.999}});
  EXPECT_FALSE(topk_hit(&just_below, e, s, 1));
}

TEST(TopK, MissingPredictionAndEmptyListAreMisses) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30})});
  const auto e = positive("e", s, {0});
  EXPECT_FALSE(topk_hit(nullptr, e, s, 5));
  const auto empty = pred(e, {});
  EXPECT_FALSE(topk_hit(&empty, e, s, 1));
  EXPECT_EQ(top1_iou(&empty, e, s), 0.0);
  EXPECT_EQ(targets_covered(&empty, e, s), 0u);
}

TEST(TopK, MultiTargetNeedsOneCoveredTarget) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30}),
                             inst(1, Category::Maize, {60, 60, 80, 80})});
  const auto e = positive("e", s, {0, 1});
  const auto p = pred(e, {{60, 60, 80, 80}});
  EXPECT_TRUE(topk_hit(&p, e, s, 1));
}

TEST(Recall, CoverageFractions) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30}),
                             inst(1, Category::Maize, {60, 60, 80, 80})});
  const auto e = positive("e", s, {0, 1});
  const auto ds = dataset({s}, {e});
  const auto both = pred(e, {{90, 0, 99, 9}, {60, 60, 80, 80}, {10, 10, 30, 30}});
  const auto one = pred(e, {{10, 10, 30, 30}, {11, 10, 31, 30}});
  const auto none = pred(e, {{0, 40, 10, 50}, {40, 0, 50, 10}, {10, 10, 30, 60}});
  EXPECT_DOUBLE_EQ(*recall_at_05({both}, ds), 100.0);
  EXPECT_DOUBLE_EQ(*recall_at_05({one}, ds), 50.0);
  EXPECT_DOUBLE_EQ(*recall_at_05({none}, ds), 0.0);
}

TEST(MeanIou, OneSeventhExample) {
  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto e = positive("e", s, {0});
  const auto p = pred(e, {{30, 30, 50, 50}});
  EXPECT_NEAR(*mean_iou({p}, dataset({s}, {e})), 100.0 / 7.0, 1e-12);
  EXPECT_NEAR(*mean_iou({pred(e, {})}, dataset({s}, {e})), 0.0, 0.0);
}

TEST(NegAcc, CraftedEdgeCases) {
  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto e = negative("n", s);
  const auto ds = dataset({s}, {e});
  const auto disjoint = pred(e, {{70, 70, 90, 90}});
  const auto overlapping = pred(e, {{25, 25, 45, 45}});
  const auto touching = pred(e, {{40, 20, 60, 40}});
  ASSERT_EQ(ref_giou({40, 20, 60, 40}, {20, 20, 40, 40}), 0.0);
  EXPECT_TRUE(negative_correct(&disjoint, s));
  EXPECT_FALSE(negative_correct(&overlapping, s));
  EXPECT_TRUE(negative_correct(&touching, s));
  EXPECT_DOUBLE_EQ(*neg_acc({disjoint}, ds), 100.0);
  EXPECT_DOUBLE_EQ(*neg_acc({overlapping}, ds), 0.0);
  EXPECT_DOUBLE_EQ(*neg_acc({touching}, ds), 100.0);

  // a corner overlap small enough for GIoU to stay negative is judged by GIoU
  const auto grazing = pred(e, {{30, 30, 50, 50}});
  ASSERT_LT(ref_giou({30, 30, 50, 50}, {20, 20, 40, 40}), 0.0);
  EXPECT_TRUE(negative_correct(&grazing, s));
}

TEST(NegAcc, EmptySceneIsCorrectAndStrictModeJudgesEveryProposal) {
  const auto empty = scene("e", {});
  const auto ne = negative("n0", empty);
  const auto any = pred(ne, {{0, 0, 100, 100}});
  EXPECT_TRUE(negative_correct(&any, empty));
  EXPECT_TRUE(negative_correct(&any, empty, true));

  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto n = negative("n1", s);
  const auto second_overlaps = pred(n, {{70, 70, 90, 90}, {25, 25, 35, 35}});
  EXPECT_TRUE(negative_correct(&second_overlaps, s));
  EXPECT_FALSE(negative_correct(&second_overlaps, s, true));
}

TEST(NegAcc, InvariantToMonotoneScoreTransforms) {
  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto n = negative("n", s);
  auto p = pred(n, {{30, 30, 50, 50}, {70, 70, 90, 90}});
  const auto ds = dataset({s}, {n});
  const auto before = neg_acc({p}, ds);
  for (auto& sp : p.proposals) sp.score = std::exp(3.0 * sp.score) - 7.0;
  EXPECT_EQ(neg_acc({p}, ds), before);
}

TEST(Metrics, NoSupportGivesNull) {
  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto ds = dataset({s}, {negative("n", s)});
  EXPECT_FALSE(topk({}, ds, 1).has_value());
  EXPECT_FALSE(recall_at_05({}, ds).has_value());
  EXPECT_FALSE(mean_iou({}, ds).has_value());
  EXPECT_TRUE(neg_acc({}, ds).has_value());
  EXPECT_FALSE(neg_acc({}, dataset({s}, {positive("p", s, {0})})).has_value());
}

TEST(Metrics, UnknownExpressionOrImageIsRejected) {
  const auto s = scene("a", {inst(0, Category::Maize, {20, 20, 40, 40})});
  const auto e = positive("e", s, {0});
  const auto ds = dataset({s}, {e});
  Prediction stray = pred(e, {{0, 0, 1, 1}});
  stray.expression_id = "ghost";
  EXPECT_THROW(topk({stray}, ds, 1), Error);
  Prediction wrong_image = pred(e, {{0, 0, 1, 1}});
  wrong_image.image_id = "ghost";
  EXPECT_THROW(stratify({wrong_image}, ds), Error);
}

// ---- randomized micro-scenes against the reference ---------------------------

TEST(Oracle, MetricsMatchBruteForceOnMicroScenes) {
  std::mt19937_64 rng(2024);
  std::size_t with_pos = 0, with_neg = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const MicroCase c = random_case(rng);
    const RefMetrics m = reference(c.preds, c.ds);
    auto expect_pct = [&](const std::optional<double>& got, double hits, std::size_t n,
                          const char* what) {
      if (n == 0) {
        EXPECT_FALSE(got.has_value()) << what << " trial " << trial;
      } else {
        ASSERT_TRUE(got.has_value()) << what << " trial " << trial;
        EXPECT_NEAR(*got, 100.0 * hits / static_cast<double>(n), 1e-9) << what << " trial " << trial;
      }
    };
    expect_pct(topk(c.preds, c.ds, 1), m.top1, m.n_pos, "top1");
    expect_pct(topk(c.preds, c.ds, 5), m.top5, m.n_pos, "top5");
    expect_pct(recall_at_05(c.preds, c.ds), m.covered, m.n_targets, "recall");
    expect_pct(mean_iou(c.preds, c.ds), m.miou, m.n_pos, "miou");
    expect_pct(neg_acc(c.preds, c.ds), m.neg, m.n_neg, "neg_acc");
    expect_pct(neg_acc(c.preds, c.ds, true), m.neg_strict, m.n_neg, "neg_acc strict");

    const EvalReport r = stratify(c.preds, c.ds);
    expect_pct(r.overall.top1, m.top1, m.n_pos, "report top1");
    expect_pct(r.overall.neg_acc, m.neg, m.n_neg, "report neg_acc");
    EXPECT_EQ(r.overall.n_positive, m.n_pos);
    EXPECT_EQ(r.overall.n_targets, m.n_targets);
    EXPECT_EQ(r.overall.n_negative, m.n_neg);
    with_pos += m.n_pos > 0;
    with_neg += m.n_neg > 0;
  }
  // the generator exercises both kinds of expression
  EXPECT_GT(with_pos, 50u);
  EXPECT_GT(with_neg, 50u);
}

TEST(Oracle, ReportInvariantsHoldOnMicroScenes) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const MicroCase c = random_case(rng);
    const EvalReport r = stratify(c.preds, c.ds);
    if (r.overall.top1) {
      EXPECT_LE(*r.overall.top1, *r.overall.top5);
    }

    auto sums = [](const std::vector<NamedRow>& rows) {
      std::array<std::size_t, 3> s{};
      for (const auto& row : rows) {
        s[0] += row.row.n_positive;
        s[1] += row.row.n_targets;
        s[2] += row.row.n_negative;
      }
      return s;
    };
    const std::array<std::size_t, 3> all{r.overall.n_positive, r.overall.n_targets,
                                         r.overall.n_negative};
    EXPECT_EQ(sums(r.by_density), all);
    EXPECT_EQ(sums(r.by_category), all);
    EXPECT_EQ(sums(r.by_scale), all);

    double weighted = 0.0;
    std::size_t support = 0;
    for (const auto& k : r.neg_acc_by_kind) {
      if (k.neg_acc) weighted += *k.neg_acc * static_cast<double>(k.support);
      support += k.support;
    }
    EXPECT_EQ(support, r.overall.n_negative);
    if (support > 0) {
      ASSERT_TRUE(r.neg_acc_weighted.has_value());
      EXPECT_NEAR(*r.neg_acc_weighted, weighted / static_cast<double>(support), 1e-9);
      EXPECT_NEAR(*r.neg_acc_weighted, *r.overall.neg_acc, 1e-9);
    } else {
      EXPECT_FALSE(r.neg_acc_weighted.has_value());
    }
  }
}

TEST(Oracle, TopOneHitsContributeAtLeastHalfToMeanIou) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const MicroCase c = random_case(rng);
    for (const auto& e : c.ds.expressions) {
      if (e.level != Level::Instance || e.polarity != Polarity::Positive) continue;
      const Prediction* p = nullptr;
      for (const auto& q : c.preds)
        if (q.expression_id == e.expression_id) p = &q;
      const SceneAnnotation& s = *c.ds.scene(e.image_id);
      if (topk_hit(p, e, s, 1)) {
        EXPECT_GE(top1_iou(p, e, s), 0.5);
      }
    }
  }
}

// ---- report ------------------------------------------------------------------

TEST(Stratify, SingleSceneMatchesItsOnlyDensityStratum) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30}),
                             inst(1, Category::Weed, {60, 60, 80, 80})});
  const auto e1 = positive("e1", s, {0});
  const auto e2 = positive("e2", s, {1});
  const auto n = negative("n", s, NegativeKind::SwapSize);
  const auto ds = dataset({s}, {e1, e2, n});
  const std::vector<Prediction> preds{pred(e1, {{10, 10, 30, 30}}), pred(e2, {{0, 0, 5, 5}}),
                                      pred(n, {{61, 61, 79, 79}})};
  const EvalReport r = stratify(preds, ds);
  const MetricRow& d = r.by_density[0].row;
  EXPECT_EQ(d.top1, r.overall.top1);
  EXPECT_EQ(d.miou, r.overall.miou);
  EXPECT_EQ(d.neg_acc, r.overall.neg_acc);
  EXPECT_DOUBLE_EQ(*r.overall.top1, 50.0);
  EXPECT_DOUBLE_EQ(*r.overall.neg_acc, 0.0);
  for (int k = 1; k < 4; ++k) EXPECT_EQ(r.by_density[k].row.n_positive, 0u);

  ASSERT_EQ(r.by_scale.size(), 8u);
  ASSERT_EQ(r.by_category.size(), 9u);
  EXPECT_EQ(r.neg_acc_by_kind[1].kind, NegativeKind::SwapSize);
  EXPECT_EQ(r.neg_acc_by_kind[1].support, 1u);
  EXPECT_FALSE(r.neg_acc_by_kind[0].neg_acc.has_value());
}

TEST(Stratify, DensityStrataFollowInstanceCounts) {
  for (int n : {10, 11, 30, 31}) {
    std::vector<InstanceAnnotation> insts;
    for (int i = 0; i < n; ++i) {
      const double x = (i % 8) * 12, y = (i / 8) * 12;
      insts.push_back(inst(i, Category::Weed, {x, y, x + 10, y + 10}));
    }
    const auto s = scene("d", insts);
    const auto e = positive("e", s, {0});
    const EvalReport r = stratify({pred(e, {{0, 0, 10, 10}})}, dataset({s}, {e}));
    const int bucket = n <= 10 ? 0 : n <= 20 ? 1 : n <= 30 ? 2 : 3;
    EXPECT_EQ(r.by_density[bucket].row.n_positive, 1u) << n;
  }
}

TEST(Stratify, LevelZeroAccuracyAndGroundTruthPredictions) {
  const Level0Vocabulary vocab = Level0Vocabulary::standard();
  const auto crop = scene("c", {inst(0, Category::Maize, {10, 10, 30, 30})});
  const auto empty = scene("z", {});
  const auto e = positive("e", crop, {0});
  const auto n = negative("n", empty);
  Prediction pc = pred(e, {{10, 10, 30, 30}});
  pc.level0_class = vocab.class_for(ImageType::CropOnly);
  Prediction pz = pred(n, {{0, 0, 50, 50}});
  pz.level0_class = vocab.class_for(ImageType::Mixed);
  const EvalReport r = stratify({pc, pz}, dataset({crop, empty}, {e, n}));
  EXPECT_DOUBLE_EQ(*r.level0_accuracy, 50.0);
  EXPECT_EQ(r.level0_support, 2u);
  EXPECT_DOUBLE_EQ(*r.overall.top1, 100.0);
  EXPECT_DOUBLE_EQ(*r.overall.miou, 100.0);
  EXPECT_DOUBLE_EQ(*r.overall.neg_acc, 100.0);
}

TEST(Stratify, ReportsCarryEveryStratumHeading) {
  const auto s = scene("a", {inst(0, Category::Maize, {10, 10, 30, 30})});
  const auto e = positive("e", s, {0});
  const EvalReport r = stratify({pred(e, {{10, 10, 30, 30}})}, dataset({s}, {e}));
  const std::string table = report_table(r);
  for (const char* h : {"Overall", "By scale", "By density", "By category",
                        "Neg-Acc by negative kind", "weighted", "Level-0", "Top-1", "Top-5",
                        "R@0.5", "mIoU", "tiny crop", "large weed", "1-10", ">30", "sugar beet",
                        "replace_category", "swap_size", "swap_position"}) {
    EXPECT_NE(table.find(h), std::string::npos) << h;
  }
  const std::string js = report_json(r);
  for (const char* k : {"\"overall\"", "\"by_scale\"", "\"by_density\"", "\"by_category\"",
                        "\"neg_acc_by_kind\"", "\"neg_acc_weighted\"", "\"level0_accuracy\""}) {
    EXPECT_NE(js.find(k), std::string::npos) << k;
  }
}


// Ground-truth boxes as predictions, targets ranked first.
std::vector<Prediction> oracle_predictions(const Dataset& ds) {
  std::vector<Prediction> out;
  for (const auto& e : ds.expressions) {
    const SceneAnnotation& s = *ds.scene(e.image_id);
    Prediction p;
    p.expression_id = e.expression_id;
    p.image_id = e.image_id;
    std::vector<Corners> boxes;
    for (int id : e.target_ids) boxes.push_back(s.find(id)->bbox_xyxy_px);
    for (const auto& i : s.instances)
      if (std::count(e.target_ids.begin(), e.target_ids.end(), i.instance_id) == 0)
        boxes.push_back(i.bbox_xyxy_px);
    double score = 1.0;
    for (const auto& b : boxes) p.proposals.push_back({b, score -= 0.01});
    out.push_back(std::move(p));
  }
  return out;
}

TEST(Stratify, GroundTruthAsPredictionsScoresPerfectly) {
  SynthConfig c;
  c.num_scenes = 120;
  const SynthDataset data = gen_scenes(c);
  const auto preds = oracle_predictions(data.test);
  const EvalReport r = stratify(preds, data.test);
  EXPECT_DOUBLE_EQ(*r.overall.top1, 100.0);
  EXPECT_DOUBLE_EQ(*r.overall.top5, 100.0);
  EXPECT_DOUBLE_EQ(*r.overall.r_at_05, 100.0);
  EXPECT_DOUBLE_EQ(*r.overall.miou, 100.0);

  // negatives on empty scenes are always correct
  Dataset empty_only = data.test;
  std::erase_if(empty_only.expressions, [&](const Expression& e) {
    return !data.test.scene(e.image_id)->instances.empty();
  });
  Expression n = negative("neg_empty", *std::find_if(
      data.test.scenes.begin(), data.test.scenes.end(),
      [](const SceneAnnotation& s) { return s.instances.empty(); }));
  empty_only.expressions.push_back(n);
  EXPECT_DOUBLE_EQ(*neg_acc(oracle_predictions(empty_only), empty_only), 100.0);
}

TEST(Stratify, ShufflingScoresMovesTopOneButNotRecall) {
  SynthConfig c;
  c.num_scenes = 120;
  const SynthDataset data = gen_scenes(c);
  const auto preds = oracle_predictions(data.test);
  auto shuffled = preds;
  std::mt19937_64 rng(4);
  for (auto& p : shuffled) std::shuffle(p.proposals.begin(), p.proposals.end(), rng);
  EXPECT_EQ(recall_at_05(shuffled, data.test), recall_at_05(preds, data.test));
  EXPECT_LT(*topk(shuffled, data.test, 1), *topk(preds, data.test, 1));
}

}  // namespace
}  // namespace weedvg
