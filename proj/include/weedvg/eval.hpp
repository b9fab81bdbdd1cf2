#pragma once

#include <optional>
#include <string>
#include <vector>

#include "weedvg/datagen.hpp"
#include "weedvg/synth.hpp"

// Grounding metrics (Top-k, R@0.5, mIoU, Neg-Acc) and stratified reports.
// Percentages in [0, 100]; a metric without support is nullopt.
namespace weedvg {

struct EvalOptions {
  // Neg-Acc judges every emitted proposal instead of the top-ranked one.
  bool strict_negatives = false;
};

struct MetricRow {
  std::optional<double> top1, top5, r_at_05, miou, neg_acc;
  std::size_t n_positive = 0;  // positive instance expressions
  std::size_t n_targets = 0;   // target instances behind them
  std::size_t n_negative = 0;  // negative instance expressions
};

struct NamedRow {
  std::string name;
  MetricRow row;
};

struct NegKindRow {
  NegativeKind kind = NegativeKind::None;
  std::optional<double> neg_acc;
  std::size_t support = 0;
};

struct EvalReport {
  MetricRow overall;
  std::vector<NamedRow> by_scale;     // size bin x {crop, weed}
  std::vector<NamedRow> by_density;   // 1-10, 11-20, 21-30, >30
  std::vector<NamedRow> by_category;  // nine categories
  std::vector<NegKindRow> neg_acc_by_kind;
  std::optional<double> neg_acc_weighted;
  std::optional<double> level0_accuracy;
  std::size_t level0_support = 0;
};

// Per-expression primitives. pred may be null (no prediction emitted).
bool topk_hit(const Prediction* pred, const Expression& e, const SceneAnnotation& s, int k);
// Number of targets covered at IoU >= 0.5 by any proposal.
std::size_t targets_covered(const Prediction* pred, const Expression& e, const SceneAnnotation& s);
// Best IoU of the top-ranked proposal against the targets; 0 without proposals.
double top1_iou(const Prediction* pred, const Expression& e, const SceneAnnotation& s);
// Top-1 (or every proposal, in strict mode) has max GIoU <= 0 against all
// instances of the scene. Empty scenes are correct.
bool negative_correct(const Prediction* pred, const SceneAnnotation& s, bool strict = false);

// Dataset-level metrics over positive (negative) instance expressions.
std::optional<double> topk(const std::vector<Prediction>& preds, const Dataset& ds, int k);
std::optional<double> recall_at_05(const std::vector<Prediction>& preds, const Dataset& ds);
std::optional<double> mean_iou(const std::vector<Prediction>& preds, const Dataset& ds);
std::optional<double> neg_acc(const std::vector<Prediction>& preds, const Dataset& ds,
                              bool strict = false);
// Share of scenes whose level-0 class matches the image type.
std::optional<double> level0_accuracy(const std::vector<Prediction>& preds, const Dataset& ds,
                                      std::size_t* support = nullptr);

// Throws Error when a prediction names an unknown expression or image.
EvalReport stratify(const std::vector<Prediction>& preds, const Dataset& ds,
                    const EvalOptions& opts = {});

std::string report_json(const EvalReport& r);
std::string report_table(const EvalReport& r);

}  // namespace weedvg
