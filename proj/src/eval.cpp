#include "weedvg/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "weedvg/errors.hpp"

namespace weedvg {

using nlohmann::json;

namespace {

Box px_box(const std::array<double, 4>& c) { return Box::from_corners(c[0], c[1], c[2], c[3]); }

bool is_positive_instance(const Expression& e) {
  return e.level == Level::Instance && e.polarity == Polarity::Positive;
}
bool is_negative_instance(const Expression& e) {
  return e.level == Level::Instance && e.polarity == Polarity::Negative;
}

double best_target_iou(const Box& b, const Expression& e, const SceneAnnotation& s) {
  double best = 0.0;
  for (int id : e.target_ids) {
    if (const auto* inst = s.find(id)) best = std::max(best, iou(b, px_box(inst->bbox_xyxy_px)));
  }
  return best;
}

std::optional<double> pct(double hits, std::size_t n) {
  if (n == 0) return std::nullopt;
  return 100.0 * hits / static_cast<double>(n);
}

// Running sums behind a MetricRow.
struct Acc {
  double top1 = 0, top5 = 0, covered = 0, iou = 0, neg = 0;
  std::size_t n_pos = 0, n_targets = 0, n_neg = 0;

  MetricRow row() const {
    MetricRow r;
    r.top1 = pct(top1, n_pos);
    r.top5 = pct(top5, n_pos);
    r.r_at_05 = pct(covered, n_targets);
    r.miou = pct(iou, n_pos);
    r.neg_acc = pct(neg, n_neg);
    r.n_positive = n_pos;
    r.n_targets = n_targets;
    r.n_negative = n_neg;
    return r;
  }
};

class PredictionIndex {
 public:
  PredictionIndex(const std::vector<Prediction>& preds, const Dataset& ds) {
    for (const auto& s : ds.scenes) scenes_[s.image_id] = &s;
    std::map<std::string, const Expression*> exprs;
    for (const auto& e : ds.expressions) exprs[e.expression_id] = &e;
    for (const auto& p : preds) {
      if (!exprs.count(p.expression_id)) {
        throw Error("prediction for unknown expression " + p.expression_id);
      }
      if (!scenes_.count(p.image_id)) throw Error("prediction for unknown image " + p.image_id);
      preds_[p.expression_id] = &p;
    }
  }

  const Prediction* pred(const Expression& e) const {
    const auto it = preds_.find(e.expression_id);
    return it == preds_.end() ? nullptr : it->second;
  }
  const SceneAnnotation& scene(const Expression& e) const {
    const auto it = scenes_.find(e.image_id);
    if (it == scenes_.end()) throw Error("expression " + e.expression_id + " has no scene");
    return *it->second;
  }

 private:
  std::map<std::string, const SceneAnnotation*> scenes_;
  std::map<std::string, const Prediction*> preds_;
};

void add_expression(Acc& a, const Prediction* p, const Expression& e, const SceneAnnotation& s,
                    bool strict) {
  if (is_positive_instance(e)) {
    ++a.n_pos;
    a.top1 += topk_hit(p, e, s, 1) ? 1 : 0;
    a.top5 += topk_hit(p, e, s, 5) ? 1 : 0;
    a.covered += static_cast<double>(targets_covered(p, e, s));
    a.n_targets += e.target_ids.size();
    a.iou += top1_iou(p, e, s);
  } else if (is_negative_instance(e)) {
    ++a.n_neg;
    a.neg += negative_correct(p, s, strict) ? 1 : 0;
  }
}

}  // namespace

bool topk_hit(const Prediction* pred, const Expression& e, const SceneAnnotation& s, int k) {
  if (!pred) return false;
  const std::size_t n = std::min(pred->proposals.size(), static_cast<std::size_t>(std::max(k, 0)));
  for (std::size_t i = 0; i < n; ++i) {
    if (best_target_iou(px_box(pred->proposals[i].bbox_xyxy_px), e, s) >= 0.5) return true;
  }
  return false;
}

std::size_t targets_covered(const Prediction* pred, const Expression& e, const SceneAnnotation& s) {
  if (!pred) return 0;
  std::size_t covered = 0;
  for (int id : e.target_ids) {
    const auto* inst = s.find(id);
    if (!inst) continue;
    const Box t = px_box(inst->bbox_xyxy_px);
    for (const auto& p : pred->proposals) {
      if (iou(px_box(p.bbox_xyxy_px), t) >= 0.5) {
        ++covered;
        break;
      }
    }
  }
  return covered;
}

double top1_iou(const Prediction* pred, const Expression& e, const SceneAnnotation& s) {
  if (!pred || pred->proposals.empty()) return 0.0;
  return best_target_iou(px_box(pred->proposals.front().bbox_xyxy_px), e, s);
}

bool negative_correct(const Prediction* pred, const SceneAnnotation& s, bool strict) {
  if (s.instances.empty() || !pred) return true;
  const std::size_t n = strict ? pred->proposals.size() : std::min<std::size_t>(1, pred->proposals.size());
  for (std::size_t i = 0; i < n; ++i) {
    const Box b = px_box(pred->proposals[i].bbox_xyxy_px);
    for (const auto& inst : s.instances) {
      if (giou(b, px_box(inst.bbox_xyxy_px)) > 0.0) return false;
    }
  }
  return true;
}

std::optional<double> topk(const std::vector<Prediction>& preds, const Dataset& ds, int k) {
  const PredictionIndex idx(preds, ds);
  double hits = 0;
  std::size_t n = 0;
  for (const auto& e : ds.expressions) {
    if (!is_positive_instance(e)) continue;
    ++n;
    hits += topk_hit(idx.pred(e), e, idx.scene(e), k) ? 1 : 0;
  }
  return pct(hits, n);
}

std::optional<double> recall_at_05(const std::vector<Prediction>& preds, const Dataset& ds) {
  const PredictionIndex idx(preds, ds);
  double covered = 0;
  std::size_t n = 0;
  for (const auto& e : ds.expressions) {
    if (!is_positive_instance(e)) continue;
    n += e.target_ids.size();
    covered += static_cast<double>(targets_covered(idx.pred(e), e, idx.scene(e)));
  }
  return pct(covered, n);
}

std::optional<double> mean_iou(const std::vector<Prediction>& preds, const Dataset& ds) {
  const PredictionIndex idx(preds, ds);
  double total = 0;
  std::size_t n = 0;
  for (const auto& e : ds.expressions) {
    if (!is_positive_instance(e)) continue;
    ++n;
    total += top1_iou(idx.pred(e), e, idx.scene(e));
  }
  return pct(total, n);
}

std::optional<double> neg_acc(const std::vector<Prediction>& preds, const Dataset& ds, bool strict) {
  const PredictionIndex idx(preds, ds);
  double correct = 0;
  std::size_t n = 0;
  for (const auto& e : ds.expressions) {
    if (!is_negative_instance(e)) continue;
    ++n;
    correct += negative_correct(idx.pred(e), idx.scene(e), strict) ? 1 : 0;
  }
  return pct(correct, n);
}

std::optional<double> level0_accuracy(const std::vector<Prediction>& preds, const Dataset& ds,
                                      std::size_t* support) {
  const Level0Vocabulary vocab = Level0Vocabulary::standard();
  std::map<std::string, int> cls;
  for (const auto& p : preds) cls.emplace(p.image_id, p.level0_class);
  double correct = 0;
  std::size_t n = 0;
  for (const auto& s : ds.scenes) {
    const auto it = cls.find(s.image_id);
    if (it == cls.end()) continue;
    ++n;
    correct += it->second == vocab.class_for(s.image_type) ? 1 : 0;
  }
  if (support) *support = n;
  return pct(correct, n);
}

EvalReport stratify(const std::vector<Prediction>& preds, const Dataset& ds,
                    const EvalOptions& opts) {
  const PredictionIndex idx(preds, ds);
  Acc overall;
  std::array<std::array<Acc, 2>, kNumSizeBins> scale{};
  std::array<Acc, kNumDensityBuckets> density{};
  std::array<Acc, kNumCategories> category{};
  std::array<Acc, 3> kind{};

  for (const auto& e : ds.expressions) {
    if (e.level != Level::Instance) continue;
    const Prediction* p = idx.pred(e);
    const SceneAnnotation& s = idx.scene(e);
    add_expression(overall, p, e, s, opts.strict_negatives);
    add_expression(density[density_bucket(s.instances.size())], p, e, s, opts.strict_negatives);
    if (e.attributes.category) {
      const auto c = *e.attributes.category;
      add_expression(category[static_cast<int>(c)], p, e, s, opts.strict_negatives);
      if (e.attributes.size_bin) {
        add_expression(scale[static_cast<int>(*e.attributes.size_bin)][is_crop(c) ? 0 : 1], p, e, s,
                       opts.strict_negatives);
      }
    }
    if (is_negative_instance(e) && e.negative_kind != NegativeKind::None) {
      add_expression(kind[static_cast<int>(e.negative_kind) - 1], p, e, s, opts.strict_negatives);
    }
  }

  EvalReport r;
  r.overall = overall.row();
  for (SizeBin b : kAllSizeBins) {
    for (int w = 0; w < 2; ++w) {
      r.by_scale.push_back({std::string(to_string(b)) + (w ? " weed" : " crop"),
                            scale[static_cast<int>(b)][w].row()});
    }
  }
  for (int d = 0; d < kNumDensityBuckets; ++d)
    r.by_density.push_back({std::string(density_bucket_name(d)), density[d].row()});
  for (Category c : kAllCategories)
    r.by_category.push_back({std::string(to_string(c)), category[static_cast<int>(c)].row()});

  double weighted = 0.0;
  std::size_t support = 0;
  for (int k = 0; k < 3; ++k) {
    NegKindRow row;
    row.kind = static_cast<NegativeKind>(k + 1);
    row.support = kind[k].n_neg;
    row.neg_acc = pct(kind[k].neg, kind[k].n_neg);
    if (row.neg_acc) weighted += *row.neg_acc * static_cast<double>(row.support);
    support += row.support;
    r.neg_acc_by_kind.push_back(row);
  }
  if (support > 0) r.neg_acc_weighted = weighted / static_cast<double>(support);
  r.level0_accuracy = level0_accuracy(preds, ds, &r.level0_support);
  return r;
}

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json row_json(const MetricRow& m) {
  return {{"top1", opt_json(m.top1)},       {"top5", opt_json(m.top5)},
          {"r_at_05", opt_json(m.r_at_05)}, {"miou", opt_json(m.miou)},
          {"neg_acc", opt_json(m.neg_acc)}, {"n_positive", m.n_positive},
          {"n_targets", m.n_targets},       {"n_negative", m.n_negative}};
}

json rows_json(const std::vector<NamedRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json j = row_json(r.row);
    j["stratum"] = r.name;
    out.push_back(std::move(j));
  }
  return out;
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v);
  return buf;
}

void table_rows(std::ostringstream& os, const std::string& title, const std::vector<NamedRow>& rows) {
  char buf[256];
  os << "\n" << title << "\n";
  std::snprintf(buf, sizeof(buf), "  %-16s %8s %8s %8s %8s %8s %6s %6s\n", "stratum", "Top-1",
                "Top-5", "R@0.5", "mIoU", "Neg-Acc", "#pos", "#neg");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "  %-16s %8s %8s %8s %8s %8s %6zu %6zu\n", r.name.c_str(),
                  cell(r.row.top1).c_str(), cell(r.row.top5).c_str(), cell(r.row.r_at_05).c_str(),
                  cell(r.row.miou).c_str(), cell(r.row.neg_acc).c_str(), r.row.n_positive,
                  r.row.n_negative);
    os << buf;
  }
}

}  // namespace

std::string report_json(const EvalReport& r) {
  json kinds = json::array();
  for (const auto& k : r.neg_acc_by_kind) {
    kinds.push_back({{"kind", to_string(k.kind)}, {"neg_acc", opt_json(k.neg_acc)},
                     {"support", k.support}});
  }
  json j = {{"overall", row_json(r.overall)},
            {"by_scale", rows_json(r.by_scale)},
            {"by_density", rows_json(r.by_density)},
            {"by_category", rows_json(r.by_category)},
            {"neg_acc_by_kind", kinds},
            {"neg_acc_weighted", opt_json(r.neg_acc_weighted)},
            {"level0_accuracy", opt_json(r.level0_accuracy)},
            {"level0_support", r.level0_support}};
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  table_rows(os, "Overall", {{"all", r.overall}});
  table_rows(os, "By scale", r.by_scale);
  table_rows(os, "By density", r.by_density);
  table_rows(os, "By category", r.by_category);
  os << "\nNeg-Acc by negative kind\n";
  char buf[128];
  for (const auto& k : r.neg_acc_by_kind) {
    std::snprintf(buf, sizeof(buf), "  %-16s %8s %6zu\n", std::string(to_string(k.kind)).c_str(),
                  cell(k.neg_acc).c_str(), k.support);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "  %-16s %8s\n", "weighted", cell(r.neg_acc_weighted).c_str());
  os << buf;
  os << "\nLevel-0 existence\n";
  std::snprintf(buf, sizeof(buf), "  %-16s %8s %6zu\n", "accuracy", cell(r.level0_accuracy).c_str(),
                r.level0_support);
  os << buf;
  return os.str();
}

}  // namespace weedvg
