#include "weedvg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "weedvg/errors.hpp"
#include "weedvg/io.hpp"

namespace weedvg {

using nlohmann::json;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a ^ rotated b
  std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t string_seed(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

template <std::size_t N>
std::size_t sample_index(const std::array<double, N>& probs, std::mt19937_64& rng) {
  std::discrete_distribution<std::size_t> d(probs.begin(), probs.end());
  return d(rng);
}

template <std::size_t N>
void check_distribution(const std::array<double, N>& p, const char* what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError(std::string(what) + " has a negative entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError(std::string(what) + " must sum to 1");
}

bool overlaps_any(const Box& b, const std::vector<Box>& others) {
  for (const Box& o : others)
    if (intersection_area(b, o) > 0.0) return true;
  return false;
}

constexpr std::array<std::string_view, kNumDensityBuckets> kDensityNames = {"1-10", "11-20",
                                                                            "21-30", ">30"};
constexpr std::array<std::pair<int, int>, kNumDensityBuckets> kDensityRange = {
    std::pair{1, 10}, std::pair{11, 20}, std::pair{21, 30}, std::pair{31, 40}};

}  // namespace

int density_bucket(std::size_t n) {
  if (n <= 10) return 0;
  if (n <= 20) return 1;
  if (n <= 30) return 2;
  return 3;
}

std::string_view density_bucket_name(int bucket) { return kDensityNames.at(bucket); }

void SynthConfig::validate() const {
  if (num_scenes < 1) throw ConfigError("num_scenes must be positive");
  if (image_width < 32 || image_height < 32) throw ConfigError("images must be at least 32 px");
  check_distribution(image_type_mix, "image_type_mix");
  check_distribution(density_mix, "density_mix");
  check_distribution(size_mix, "size_mix");
  if (!(weed_share_mixed > 0.0 && weed_share_mixed < 1.0))
    throw ConfigError("weed_share_mixed must lie in (0, 1)");
  if (!(feature_noise >= 0.0) || !(context_strength >= 0.0) || !(evidence_noise >= 0.0))
    throw ConfigError("noise levels and context strength must be non-negative");
  if (distractors_min < 1 || distractors_max < distractors_min)
    throw ConfigError("need 1 <= distractors_min <= distractors_max");
  if (!(centre_jitter >= 0.0) || !(scale_jitter >= 0.0 && scale_jitter < 1.0))
    throw ConfigError("jitter out of range");
  if (max_tokens < 1) throw ConfigError("max_tokens must be positive");
  if (placement_attempts < 1) throw ConfigError("placement_attempts must be positive");
  datagen.validate();
}

// ---- encoders --------------------------------------------------------------

Embeddings Embeddings::build(Index dim, std::uint64_t seed) {
  std::vector<std::string> words;
  for (Category c : kAllCategories)
    for (const auto& w : tokenize(to_string(c))) words.push_back(w);
  for (SizeBin s : kAllSizeBins) words.emplace_back(to_string(s));
  for (const char* w : {"top", "middle", "bottom", "left", "right", "centre"}) words.emplace_back(w);
  for (const char* w : {"no", "crop", "vegetation"}) words.emplace_back(w);
  words.emplace_back(Level0Vocabulary::kEmptyToken);
  words.emplace_back(kBackground);
  words.emplace_back(kCropPresent);
  words.emplace_back(kWeedPresent);

  const Index n = static_cast<Index>(words.size());
  if (dim < n) {
    throw ConfigError("embedding width " + std::to_string(dim) + " is below the " +
                      std::to_string(n) + " words that need disjoint supports");
  }
  const Index support = dim / n;
  std::mt19937_64 rng(mix_seed(seed, 0xE5));
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Embeddings e;
  e.dim_ = dim;
  for (Index i = 0; i < n; ++i) {
    RowVectorXd v = RowVectorXd::Zero(dim);
    for (Index k = 0; k < support; ++k) v(i * support + k) = u(rng);
    e.table_[words[i]] = v / v.norm();
  }
  return e;
}

RowVectorXd Embeddings::word(std::string_view w) const {
  const auto it = table_.find(std::string(w));
  return it == table_.end() ? RowVectorXd::Zero(dim_) : it->second;
}

RowVectorXd Embeddings::phrase(std::string_view p) const {
  RowVectorXd out = RowVectorXd::Zero(dim_);
  for (const auto& w : tokenize(p)) out += word(w);
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

TextFeatures encode_text(const std::string& text, const Embeddings& emb, int max_tokens) {
  std::vector<std::string> words = tokenize(text);
  if (static_cast<int>(words.size()) > max_tokens) {
    std::cerr << "warning: expression truncated from " << words.size() << " to " << max_tokens
              << " tokens\n";
    words.resize(static_cast<std::size_t>(max_tokens));
  }
  TextFeatures t;
  t.tokens = MatrixXd::Zero(static_cast<Index>(words.size()), emb.dim());
  for (std::size_t i = 0; i < words.size(); ++i) {
    t.tokens.row(static_cast<Index>(i)) = emb.word(words[i]);
    t.valid.push_back(emb.known(words[i]));
  }
  t.words = std::move(words);
  return t;
}

std::vector<TextFeatures> encode_vocabulary(const Level0Vocabulary& vocab, const Embeddings& emb) {
  std::vector<TextFeatures> out;
  for (const auto& s : vocab.sentences) out.push_back(encode_text(s, emb));
  return out;
}

RowVectorXd attribute_feature(Category c, SizeBin s, GridCell g, const Embeddings& emb) {
  return emb.phrase(to_string(c)) + emb.phrase(to_string(s)) + emb.phrase(to_string(g));
}

ProposalSet encode_proposals(const SceneAnnotation& scene, const SynthConfig& cfg,
                             const Embeddings& emb, std::uint64_t stream) {
  std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, string_seed(scene.image_id)), stream));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto noise_row = [&](double sigma) {
    RowVectorXd v(emb.dim());
    for (Index k = 0; k < v.size(); ++k) v(k) = sigma * gauss(rng);
    return v;
  };

  RowVectorXd context = RowVectorXd::Zero(emb.dim());
  bool crop = false, weed = false;
  for (const auto& inst : scene.instances) (is_crop(inst.category) ? crop : weed) = true;
  if (crop) context += cfg.context_strength * emb.word(Embeddings::kCropPresent);
  if (weed) context += cfg.context_strength * emb.word(Embeddings::kWeedPresent);

  std::vector<RowVectorXd> feats;
  std::vector<Box> boxes;
  std::vector<int> sources;
  std::vector<Eigen::RowVector4d> evidence;

  for (const auto& inst : scene.instances) {
    const Box& g = inst.box;
    const double cj = cfg.centre_jitter, sj = cfg.scale_jitter;
    Box p{g.cx + g.w * cj * (2.0 * unit(rng) - 1.0), g.cy + g.h * cj * (2.0 * unit(rng) - 1.0),
          g.w * (1.0 + sj * (2.0 * unit(rng) - 1.0)), g.h * (1.0 + sj * (2.0 * unit(rng) - 1.0))};
    Eigen::RowVector4d e((g.cx - p.cx) / p.w, (g.cy - p.cy) / p.h, std::log(g.w / p.w),
                         std::log(g.h / p.h));
    for (int k = 0; k < 4; ++k) e(k) += cfg.evidence_noise * gauss(rng);
    feats.push_back(attribute_feature(inst.category, inst.size_bin, inst.grid_cell, emb) +
                    context + noise_row(cfg.feature_noise));
    boxes.push_back(p);
    sources.push_back(inst.instance_id);
    evidence.push_back(e);
  }

  std::vector<Box> occupied;
  for (const auto& inst : scene.instances) occupied.push_back(inst.box);
  std::uniform_int_distribution<int> count(cfg.distractors_min, cfg.distractors_max);
  const int n_bg = count(rng);
  const double image_w = scene.width, image_h = scene.height;
  const double geo = std::sqrt(image_w * image_h);
  for (int d = 0; d < n_bg; ++d) {
    // background patch with an instance-like size
    const auto bin = sample_index(cfg.size_mix, rng);
    const auto& t = cfg.datagen.size_thresholds;
    const double lo = bin == 0 ? 18.0 / geo : t[bin - 1];
    const double hi = bin == 3 ? std::max(t[2] * 1.5, t[2] + 0.05) : t[bin];
    for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
      const double r = lo + (hi - lo) * unit(rng);
      const double ar = std::exp(std::log(0.75) + (std::log(4.0 / 3.0) - std::log(0.75)) * unit(rng));
      const double w = r * geo * std::sqrt(ar) / image_w;
      const double h = r * geo / std::sqrt(ar) / image_h;
      if (w >= 1.0 || h >= 1.0) continue;
      const Box b{w / 2 + (1.0 - w) * unit(rng), h / 2 + (1.0 - h) * unit(rng), w, h};
      if (overlaps_any(b, occupied)) continue;
      Eigen::RowVector4d e;
      for (int k = 0; k < 4; ++k) e(k) = cfg.evidence_noise * gauss(rng);
      const SizeBin s = size_bin(w * image_w, h * image_h, image_w, image_h, cfg.datagen);
      RowVectorXd f = emb.word(Embeddings::kBackground) + context;
      if (cfg.distractor_attributes) {
        f += emb.phrase(to_string(s)) + emb.phrase(to_string(grid_cell(b)));
      }
      feats.push_back(f + noise_row(cfg.feature_noise));
      boxes.push_back(b);
      sources.push_back(-1);
      evidence.push_back(e);
      break;
    }
  }

  ProposalSet set;
  const Index n = static_cast<Index>(feats.size());
  set.proposals.features.resize(n, emb.dim());
  set.evidence.resize(n, 4);
  for (Index i = 0; i < n; ++i) {
    set.proposals.features.row(i) = feats[i];
    set.evidence.row(i) = evidence[i];
  }
  set.proposals.boxes = std::move(boxes);
  set.source_ids = std::move(sources);
  return set;
}

// ---- scenes ----------------------------------------------------------------

namespace {

// Pixel box of a random instance size, or nullopt if no free spot was found.
std::optional<std::array<double, 4>> place_box(const SynthConfig& cfg, std::size_t bin,
                                               const std::vector<Box>& occupied,
                                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double W = cfg.image_width, H = cfg.image_height;
  const double geo = std::sqrt(W * H);
  const auto& t = cfg.datagen.size_thresholds;
  const double lo = bin == 0 ? 18.0 / geo : t[bin - 1];
  const double hi = bin == 3 ? std::max(t[2] * 1.5, t[2] + 0.05) : t[bin];
  for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
    const double r = lo + (hi - lo) * unit(rng);
    const double ar = std::exp(std::log(0.75) + (std::log(4.0 / 3.0) - std::log(0.75)) * unit(rng));
    const double w = std::round(r * geo * std::sqrt(ar));
    const double h = std::round(r * geo / std::sqrt(ar));
    if (w >= W || h >= H || w < 1 || h < 1) continue;
    const double x1 = std::floor((W - w) * unit(rng));
    const double y1 = std::floor((H - h) * unit(rng));
    const Box b = Box::from_corners(x1 / W, y1 / H, (x1 + w) / W, (y1 + h) / H);
    if (overlaps_any(b, occupied)) continue;
    return std::array<double, 4>{x1, y1, x1 + w, y1 + h};
  }
  return std::nullopt;
}

}  // namespace

std::vector<SceneAnnotation> gen_raw_scenes(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5CE7E));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> crop_species(0, kNumCategories - 2);
  std::vector<SceneAnnotation> scenes;
  std::size_t downgraded = 0;

  for (int i = 0; i < cfg.num_scenes; ++i) {
    SceneAnnotation s;
    char id[32];
    std::snprintf(id, sizeof(id), "scene_%05d", i);
    s.image_id = id;
    s.width = cfg.image_width;
    s.height = cfg.image_height;
    const auto type = static_cast<ImageType>(sample_index(cfg.image_type_mix, rng));
    if (type != ImageType::Empty) {
      const auto bucket = sample_index(cfg.density_mix, rng);
      const auto [lo, hi] = kDensityRange[bucket];
      int n = std::uniform_int_distribution<int>(lo, hi)(rng);
      if (type == ImageType::Mixed) n = std::max(n, 2);
      const auto crop = static_cast<Category>(crop_species(rng));

      std::vector<Category> cats(static_cast<std::size_t>(n));
      for (auto& c : cats) {
        if (type == ImageType::CropOnly) c = crop;
        else if (type == ImageType::WeedOnly) c = Category::Weed;
        else c = unit(rng) < cfg.weed_share_mixed ? Category::Weed : crop;
      }
      if (type == ImageType::Mixed) {
        cats.front() = crop;
        cats.back() = Category::Weed;
      }

      std::vector<Box> occupied;
      int next_id = 0;
      for (Category c : cats) {
        const auto bin = sample_index(cfg.size_mix, rng);
        const auto px = place_box(cfg, bin, occupied, rng);
        if (!px) {
          ++downgraded;
          continue;
        }
        auto inst = make_instance(next_id++, c, (*px)[0], (*px)[1], (*px)[2], (*px)[3], s.width,
                                  s.height, cfg.datagen);
        occupied.push_back(inst.box);
        s.instances.push_back(inst);
      }
    }
    s.image_type = classify_image(s.instances);
    scenes.push_back(std::move(s));
  }
  if (downgraded > 0) {
    std::cerr << "warning: " << downgraded
              << " instances could not be placed without overlap; scene density lowered\n";
  }
  return scenes;
}

SynthDataset gen_scenes(const SynthConfig& cfg) {
  std::vector<SceneAnnotation> filtered;
  for (auto& s : gen_raw_scenes(cfg)) filtered.push_back(filter_instances(std::move(s), cfg.datagen));
  Splits splits = stratified_split(filtered, cfg.seed, cfg.datagen);
  SynthDataset out;
  out.train = annotate(std::move(splits.train), false, cfg.seed, cfg.datagen);
  out.val = annotate(std::move(splits.val), false, cfg.seed, cfg.datagen);
  out.test = annotate(std::move(splits.test), true, cfg.seed, cfg.datagen, &out.negatives);
  return out;
}

bool copy_paste(SceneAnnotation& dst, const SceneAnnotation& src, std::uint64_t seed,
                const SynthConfig& cfg) {
  if (src.instances.empty()) return false;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& inst = src.instances[std::uniform_int_distribution<std::size_t>(
      0, src.instances.size() - 1)(rng)];
  const double w = inst.bbox_xyxy_px[2] - inst.bbox_xyxy_px[0];
  const double h = inst.bbox_xyxy_px[3] - inst.bbox_xyxy_px[1];
  if (w >= dst.width || h >= dst.height) return false;
  std::vector<Box> occupied;
  int next_id = 0;
  for (const auto& i : dst.instances) {
    occupied.push_back(i.box);
    next_id = std::max(next_id, i.instance_id + 1);
  }
  for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
    const double x1 = std::floor((dst.width - w) * unit(rng));
    const double y1 = std::floor((dst.height - h) * unit(rng));
    auto pasted = make_instance(next_id, inst.category, x1, y1, x1 + w, y1 + h, dst.width,
                                dst.height, cfg.datagen);
    if (overlaps_any(pasted.box, occupied)) continue;
    dst.instances.push_back(pasted);
    dst.image_type = classify_image(dst.instances);
    return true;
  }
  return false;
}

// ---- box head --------------------------------------------------------------

namespace {

MatrixXd with_bias_column(const MatrixXd& evidence) {
  MatrixXd e(evidence.rows(), evidence.cols() + 1);
  e << evidence, MatrixXd::Ones(evidence.rows(), 1);
  return e;
}

Box apply_delta(const Box& b, double d0, double d1, double d2, double d3) {
  return {b.cx + b.w * d0, b.cy + b.h * d1, b.w * std::exp(d2), b.h * std::exp(d3)};
}

constexpr std::string_view kBoxFormat = "weedvg-box-head";

}  // namespace

MatrixXd BoxHead::deltas(const MatrixXd& evidence) const {
  if (evidence.cols() != 4) throw ShapeError("box evidence must have 4 columns");
  return with_bias_column(evidence) * W.transpose();
}

std::vector<Box> BoxHead::refine(const ProposalSet& set) const {
  const MatrixXd d = deltas(set.evidence);
  std::vector<Box> out;
  for (Index i = 0; i < d.rows(); ++i) {
    out.push_back(apply_delta(set.proposals.boxes[i], d(i, 0), d(i, 1), d(i, 2), d(i, 3)));
  }
  return out;
}

std::uint64_t BoxHead::checksum() const { return io::checksum(std::span<const MatrixXd>(&W, 1)); }

void BoxHead::save(const std::string& path, std::uint64_t seed) const {
  io::save_checkpoint(path, kBoxFormat, seed, {{"W", W}});
}

BoxHead BoxHead::load(const std::string& path) {
  const auto named = io::load_checkpoint(path, kBoxFormat);
  if (named.size() != 1 || named[0].first != "W" || named[0].second.rows() != 4 ||
      named[0].second.cols() != 5) {
    throw ParseError(1, "box head checkpoint must hold a single 4x5 matrix W");
  }
  BoxHead b;
  b.W = named[0].second;
  return b;
}

grad::Var apply_box_deltas(const std::vector<Box>& boxes, const grad::Var& deltas) {
  const MatrixXd& d = deltas.value();
  if (d.cols() != 4 || d.rows() != static_cast<Index>(boxes.size())) {
    throw ShapeError("deltas must be N x 4 for N boxes");
  }
  MatrixXd out(d.rows(), 4);
  MatrixXd local(d.rows(), 4);  // d out / d delta, diagonal per column
  for (Index i = 0; i < d.rows(); ++i) {
    const Box& b = boxes[i];
    const double ew = std::exp(d(i, 2)), eh = std::exp(d(i, 3));
    out.row(i) << b.cx + b.w * d(i, 0), b.cy + b.h * d(i, 1), b.w * ew, b.h * eh;
    local.row(i) << b.w, b.h, b.w * ew, b.h * eh;
  }
  return deltas.tape()->record(
      "apply_box_deltas", std::move(out), {deltas},
      [deltas, local](grad::Tape& t, const MatrixXd& g) {
        t.accumulate(deltas, g.cwiseProduct(local));
      });
}

grad::Var box_regression_loss(const grad::Var& refined,
                              const std::vector<std::pair<int, Box>>& pairs,
                              const InterpConfig& interp, bool use_giou) {
  if (pairs.empty()) throw ContractError("regression loss needs at least one matched pair");
  if (refined.cols() != 4) throw ShapeError("refined boxes must be N x 4");
  interp.validate();
  const MatrixXd& r = refined.value();
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  double total = 0.0;
  MatrixXd local = MatrixXd::Zero(r.rows(), 4);
  for (const auto& [row, gt] : pairs) {
    const Box pred{r(row, 0), r(row, 1), r(row, 2), r(row, 3)};
    if (use_giou) {
      total += loss_giou(pred, gt);
      local.row(row) += inv_n * grad_loss_giou(pred, gt).transpose();
    } else {
      total += loss_interp_iou(pred, gt, interp);
      local.row(row) += inv_n * grad_loss_interp_iou(pred, gt, interp).transpose();
    }
  }
  return refined.tape()->record("box_regression_loss", MatrixXd::Constant(1, 1, total * inv_n),
                                {refined}, [refined, local](grad::Tape& t, const MatrixXd& g) {
                                  t.accumulate(refined, g(0, 0) * local);
                                });
}

// ---- optimiser -------------------------------------------------------------

Adam::Adam(std::vector<MatrixXd*> params, const AdamConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const MatrixXd* p : params_) {
    m_.push_back(MatrixXd::Zero(p->rows(), p->cols()));
    v_.push_back(MatrixXd::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(const std::vector<MatrixXd>& grads, double lr) {
  if (grads.size() != params_.size()) throw ContractError("gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    MatrixXd& p = *params_[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
    if (cfg_.weight_decay > 0.0) p *= (1.0 - lr * cfg_.weight_decay);
    p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(double lr0, long step, long total) {
  if (total <= 1) return lr0;
  const double frac = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return 0.5 * lr0 * (1.0 + std::cos(M_PI * frac));
}

// ---- training --------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr_stage1 > 0.0) || !(lr_stage2 > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(tau_init > 0.0)) throw ConfigError("tau_init must be positive");
  if (!(copy_paste_prob >= 0.0 && copy_paste_prob <= 1.0))
    throw ConfigError("copy_paste_prob must lie in [0, 1]");
  if (max_expressions_per_image < 1) throw ConfigError("max_expressions_per_image must be positive");
  dims.validate();
  interp.validate();
  match.validate();
  ablation.validate();
}

namespace {

// Batches that draw round-robin from the image types, so every batch of four
// covers all four types while each type still has scenes left.
std::vector<std::vector<std::size_t>> typed_batches(const std::vector<SceneAnnotation>& scenes,
                                                    int batch_size, std::mt19937_64& rng) {
  std::array<std::vector<std::size_t>, kNumImageTypes> pools;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    pools[static_cast<int>(scenes[i].image_type)].push_back(i);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);
  std::array<std::size_t, kNumImageTypes> head{};
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  for (std::size_t left = scenes.size(); left > 0;) {
    for (int t = 0; t < kNumImageTypes && left > 0; ++t) {
      if (head[t] == pools[t].size()) continue;
      cur.push_back(pools[t][head[t]++]);
      --left;
      if (static_cast<int>(cur.size()) == batch_size) batches.push_back(std::move(cur)), cur.clear();
    }
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

struct TrainScene {
  SceneAnnotation scene;
  std::vector<Expression> expressions;
  ProposalSet set;
};

class SceneSource {
 public:
  SceneSource(const Dataset& ds, const SynthConfig& scfg, const TrainConfig& tcfg,
              const Embeddings& emb)
      : ds_(ds), scfg_(scfg), tcfg_(tcfg), emb_(emb) {
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) index_[ds.scenes[i].image_id] = i;
    by_scene_.resize(ds.scenes.size());
    for (const auto& e : ds.expressions) {
      const auto it = index_.find(e.image_id);
      if (it != index_.end()) by_scene_[it->second].push_back(e);
    }
    base_sets_.reserve(ds.scenes.size());
    for (const auto& s : ds.scenes) base_sets_.push_back(encode_proposals(s, scfg, emb, 0));
  }

  // Scene i for this epoch, possibly augmented by copy-paste.
  TrainScene get(std::size_t i, int stage, int epoch) const {
    const SceneAnnotation& s = ds_.scenes[i];
    if (tcfg_.copy_paste_prob > 0.0 && ds_.scenes.size() > 1) {
      const std::uint64_t key =
          mix_seed(mix_seed(tcfg_.seed, string_seed(s.image_id)), 1000u * stage + epoch);
      std::mt19937_64 rng(key);
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < tcfg_.copy_paste_prob) {
        std::size_t j = std::uniform_int_distribution<std::size_t>(0, ds_.scenes.size() - 2)(rng);
        if (j >= i) ++j;
        TrainScene out;
        out.scene = s;
        if (copy_paste(out.scene, ds_.scenes[j], rng(), scfg_)) {
          out.expressions = gen_instance_expressions(out.scene, scfg_.datagen);
          for (auto& e : gen_image_negatives(out.scene)) out.expressions.push_back(std::move(e));
          out.set = encode_proposals(out.scene, scfg_, emb_, key);
          return out;
        }
      }
    }
    return {s, by_scene_[i], base_sets_[i]};
  }

  std::size_t size() const { return ds_.scenes.size(); }
  const std::vector<SceneAnnotation>& scenes() const { return ds_.scenes; }

 private:
  const Dataset& ds_;
  const SynthConfig& scfg_;
  const TrainConfig& tcfg_;
  const Embeddings& emb_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<Expression>> by_scene_;
  std::vector<ProposalSet> base_sets_;
};

std::vector<MatrixXd> leaf_grads(const std::vector<grad::Var>& leaves) {
  std::vector<MatrixXd> g;
  g.reserve(leaves.size());
  for (const auto& l : leaves) g.push_back(l.grad());
  return g;
}

}  // namespace

ImageLoss image_hrs_loss(const HrsGraph& graph, const SceneAnnotation& scene,
                         const std::vector<const Expression*>& expressions,
                         const ProposalSet& set, const std::vector<TextFeatures>& vocab_text,
                         const Embeddings& emb, const TrainConfig& tcfg, int max_tokens) {
  static const Level0Vocabulary vocab = Level0Vocabulary::standard();
  const grad::Var proposals = graph.project_proposals(set.proposals);
  const Level0Vars lvl0 = graph.level0_distribution(proposals, vocab_text);
  const grad::Var l0 = loss_lvl0(lvl0.logits, vocab.class_for(scene.image_type));

  ImageLoss out;
  out.l0 = l0.scalar();
  const auto lambda = tcfg.hmce.for_type(scene.image_type);
  // Without an instance weight the loss is exactly lambda0 * l0; averaging
  // identical copies would not always round back to it.
  const bool existence_only = expressions.empty() || lambda[1] == 0.0;
  if (existence_only) out.total = grad::scale(l0, lambda[0]);
  if (expressions.empty()) return out;
  grad::Var sum;
  for (const Expression* e : expressions) {
    const RelevanceVars rel = graph.relevance(proposals, encode_text(e->text, emb, max_tokens));
    std::vector<bool> targets(set.source_ids.size());
    for (std::size_t j = 0; j < targets.size(); ++j) {
      targets[j] = std::find(e->target_ids.begin(), e->target_ids.end(), set.source_ids[j]) !=
                   e->target_ids.end();
    }
    const grad::Var l1 = loss_lvl1(rel.s_ref, targets);
    const grad::Var l1c = tcfg.ablation.no_constraint ? l1 : loss_constrained(l1, l0);
    out.l1c += l1c.scalar();
    const grad::Var h = loss_hmce(l0, l1c, scene.image_type, tcfg.hmce);
    sum = sum.valid() ? sum + h : h;
  }
  const double inv = 1.0 / static_cast<double>(expressions.size());
  if (!existence_only) out.total = grad::scale(sum, inv);
  out.l1c *= inv;
  return out;
}

TrainResult train_two_stage(const Dataset& train, const SynthConfig& scfg, const TrainConfig& tcfg,
                            StageSelect stages, const BoxHead* box_init,
                            const ProgressFn& progress) {
  scfg.validate();
  tcfg.validate();
  if (tcfg.dims.d_v != scfg.d_v || tcfg.dims.d_t != scfg.d_t) {
    throw ConfigError("HRS input widths do not match the synthetic encoder widths");
  }
  if (train.scenes.empty()) throw ConfigError("training split has no scenes");
  std::array<bool, kNumImageTypes> present{};
  for (const auto& s : train.scenes) present[static_cast<int>(s.image_type)] = true;
  for (ImageType t : kAllImageTypes) {
    if (!present[static_cast<int>(t)]) {
      std::cerr << "warning: training split has no " << to_string(t) << " scenes\n";
    }
  }

  const Embeddings emb = Embeddings::build(scfg.d_t, scfg.seed);
  const Level0Vocabulary vocab = Level0Vocabulary::standard();
  const std::vector<TextFeatures> vocab_text = encode_vocabulary(vocab, emb);
  SceneSource source(train, scfg, tcfg, emb);

  TrainResult result;
  result.hrs = HrsParams::init(tcfg.dims, mix_seed(tcfg.seed, 0x4A5), tcfg.tau_init);
  if (tcfg.ablation.no_projection) result.hrs.set_identity_projections();
  if (box_init) result.box = *box_init;
  if (stages == StageSelect::Two && !box_init) {
    throw ConfigError("stage 2 alone needs a stage-1 box head");
  }

  const long batches_per_epoch = static_cast<long>(
      (train.scenes.size() + static_cast<std::size_t>(tcfg.batch_size) - 1) /
      static_cast<std::size_t>(tcfg.batch_size));

  // ---- stage 1: box head
  if (stages != StageSelect::Two) {
    Adam opt({&result.box.W}, tcfg.adam);
    const long total = batches_per_epoch * tcfg.stage1_epochs;
    MatchConfig match = tcfg.match;
    if (tcfg.ablation.no_interp_iou) match.lambda_centre = match.lambda_size = 0.0;
    long step = 0;
    if (tcfg.stage1_epochs > 0) {
      // epoch 0: loss of the starting head, the reference for the decrease
      double loss_sum = 0.0;
      std::size_t loss_count = 0;
      for (std::size_t i = 0; i < source.size(); ++i) {
        const TrainScene ts = source.get(i, 1, 0);
        if (ts.scene.instances.empty()) continue;
        const std::vector<Box> refined = result.box.refine(ts.set);
        std::vector<Box> gts;
        for (const auto& inst : ts.scene.instances) gts.push_back(inst.box);
        const Assignment a = assign_optimal(*build_cost_matrix(refined, gts, match));
        double s = 0.0;
        for (const auto& [p, g] : a.pairs) {
          s += tcfg.ablation.no_interp_iou ? loss_giou(refined[p], gts[g])
                                           : loss_interp_iou(refined[p], gts[g], tcfg.interp);
        }
        loss_sum += s / static_cast<double>(a.pairs.size());
        ++loss_count;
      }
      const double mean = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
      LogRow row{0, 1, mean, 0.0, 0.0, mean, cosine_lr(tcfg.lr_stage1, 0, total)};
      result.log.push_back(row);
      if (progress) progress(row);
    }
    for (int epoch = 1; epoch <= tcfg.stage1_epochs; ++epoch) {
      const BoxHead good = result.box;
      std::mt19937_64 rng(mix_seed(tcfg.seed, 0x100 + epoch));
      double loss_sum = 0.0;
      std::size_t loss_count = 0;
      double lr = 0.0;
      try {
        for (const auto& batch : typed_batches(source.scenes(), tcfg.batch_size, rng)) {
          grad::Tape tape;
          const grad::Var W = tape.leaf(result.box.W);
          grad::Var batch_loss;
          int images = 0;
          for (std::size_t i : batch) {
            const TrainScene ts = source.get(i, 1, epoch);
            if (ts.scene.instances.empty()) continue;
            const std::vector<Box> refined_now = result.box.refine(ts.set);
            std::vector<Box> gts;
            for (const auto& inst : ts.scene.instances) gts.push_back(inst.box);
            const auto cost = build_cost_matrix(refined_now, gts, match);
            const Assignment a = assign_optimal(*cost);
            std::vector<std::pair<int, Box>> pairs;
            for (const auto& [p, g] : a.pairs) pairs.emplace_back(p, gts[g]);
            const grad::Var deltas = grad::matmul(
                tape.constant(with_bias_column(ts.set.evidence)), grad::transpose(W));
            const grad::Var refined = apply_box_deltas(ts.set.proposals.boxes, deltas);
            const grad::Var loss =
                box_regression_loss(refined, pairs, tcfg.interp, tcfg.ablation.no_interp_iou);
            loss_sum += loss.scalar();
            ++loss_count;
            batch_loss = batch_loss.valid() ? batch_loss + loss : loss;
            ++images;
          }
          lr = cosine_lr(tcfg.lr_stage1, step++, total);
          if (images == 0) continue;
          const grad::Var mean_loss = grad::scale(batch_loss, 1.0 / images);
          tape.backward(mean_loss);
          opt.step({W.grad()}, lr);
          if (!result.box.W.allFinite()) throw NumericError("box head diverged");
        }
      } catch (const NumericError& e) {
        result.box = good;
        result.aborted = true;
        result.abort_reason = std::string("stage 1 epoch ") + std::to_string(epoch) + ": " + e.what();
        return result;
      }
      const double mean = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
      LogRow row{epoch, 1, mean, 0.0, 0.0, mean, lr};
      result.log.push_back(row);
      if (progress) progress(row);
    }
  }

  // ---- stage 2: HRS head, box head frozen
  if (stages != StageSelect::One) {
    std::vector<MatrixXd*> ptrs;
    for (MatrixXd& m : result.hrs.values()) ptrs.push_back(&m);
    Adam opt(ptrs, tcfg.adam);
    const long total = batches_per_epoch * tcfg.stage2_epochs;
    long step = 0;
    for (int epoch = 1; epoch <= tcfg.stage2_epochs; ++epoch) {
      const HrsParams good = result.hrs;
      std::mt19937_64 rng(mix_seed(tcfg.seed, 0x200 + epoch));
      double sum_total = 0.0, sum_l0 = 0.0, sum_l1c = 0.0;
      std::size_t count = 0;
      double lr = 0.0;
      try {
        for (const auto& batch : typed_batches(source.scenes(), tcfg.batch_size, rng)) {
          grad::Tape tape;
          const HrsGraph graph(tape, result.hrs, tcfg.ablation, true);
          grad::Var batch_loss;
          for (std::size_t i : batch) {
            const TrainScene ts = source.get(i, 2, epoch);
            std::vector<const Expression*> exprs;
            for (const auto& e : ts.expressions) exprs.push_back(&e);
            if (static_cast<int>(exprs.size()) > tcfg.max_expressions_per_image) {
              std::shuffle(exprs.begin(), exprs.end(), rng);
              exprs.resize(static_cast<std::size_t>(tcfg.max_expressions_per_image));
            }
            const ImageLoss il =
                image_hrs_loss(graph, ts.scene, exprs, ts.set, vocab_text, emb, tcfg, scfg.max_tokens);
            sum_total += loss_total(il.total.scalar(), 0.0);
            sum_l0 += il.l0;
            sum_l1c += il.l1c;
            ++count;
            batch_loss = batch_loss.valid() ? batch_loss + il.total : il.total;
          }
          lr = cosine_lr(tcfg.lr_stage2, step++, total);
          const grad::Var mean_loss =
              grad::scale(batch_loss, 1.0 / static_cast<double>(batch.size()));
          tape.backward(mean_loss);
          opt.step(leaf_grads(graph.leaves()), lr);
          for (const MatrixXd& m : result.hrs.values())
            if (!m.allFinite()) throw NumericError("HRS parameters diverged");
        }
      } catch (const NumericError& e) {
        result.hrs = good;
        result.aborted = true;
        result.abort_reason = std::string("stage 2 epoch ") + std::to_string(epoch) + ": " + e.what();
        return result;
      }
      const double n = count ? static_cast<double>(count) : 1.0;
      LogRow row{epoch, 2, sum_total / n, sum_l0 / n, sum_l1c / n, 0.0, lr};
      result.log.push_back(row);
      if (progress) progress(row);
    }
  }
  return result;
}

std::string log_to_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os << "epoch,stage,loss_total,loss_lvl0,loss_lvl1c,loss_interp_iou,lr\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.stage,
                  r.loss_total, r.loss_lvl0, r.loss_lvl1c, r.loss_interp_iou, r.lr);
    os << buf;
  }
  return os.str();
}

// ---- prediction ------------------------------------------------------------

std::vector<Prediction> predict(const Dataset& ds, const SynthConfig& scfg, const HrsParams& hrs,
                                const BoxHead& box, const Ablation& ablation,
                                bool gate_by_level0) {
  const Embeddings emb = Embeddings::build(scfg.d_t, scfg.seed);
  const Level0Vocabulary vocab = Level0Vocabulary::standard();
  const std::vector<TextFeatures> vocab_text = encode_vocabulary(vocab, emb);
  if (hrs.dims().d_v != scfg.d_v || hrs.dims().d_t != scfg.d_t) {
    throw ConfigError("checkpoint widths do not match the synthetic encoder widths");
  }

  auto sentence_index = [&](ImageSubject subject) {
    const auto at = std::find(vocab.sentences.begin(), vocab.sentences.end(),
                              render_image_text(subject));
    return at == vocab.sentences.end() ? -1 : static_cast<int>(at - vocab.sentences.begin());
  };
  const int no_crop = sentence_index(ImageSubject::Crop);
  const int no_weed = sentence_index(ImageSubject::Weed);
  const int no_vegetation = sentence_index(ImageSubject::Vegetation);

  std::map<std::string, std::vector<const Expression*>> by_scene;
  for (const auto& e : ds.expressions) by_scene[e.image_id].push_back(&e);

  std::vector<Prediction> out;
  for (const auto& scene : ds.scenes) {
    const auto it = by_scene.find(scene.image_id);
    if (it == by_scene.end()) continue;
    const ProposalSet set = encode_proposals(scene, scfg, emb, 0);
    const std::vector<Box> refined = box.refine(set);

    grad::Tape tape;
    const HrsGraph graph(tape, hrs, ablation, false);
    const grad::Var proposals = graph.project_proposals(set.proposals);
    const Level0Vars lvl0 = graph.level0_distribution(proposals, vocab_text);
    Eigen::Index level0 = 0;
    lvl0.probs.value().row(0).maxCoeff(&level0);

    for (const Expression* e : it->second) {
      const RelevanceVars rel =
          graph.relevance(proposals, encode_text(e->text, emb, scfg.max_tokens));
      const Eigen::VectorXd s = rel.s_ref.value().col(0);
      std::vector<Index> order(static_cast<std::size_t>(s.size()));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return s(a) > s(b); });
      Eigen::VectorXd reported = s;
      if (gate_by_level0 && e->level == Level::Instance && e->attributes.category) {
        const Eigen::RowVectorXd& probs = lvl0.probs.value().row(0);
        const int denial = is_crop(*e->attributes.category) ? no_crop : no_weed;
        double present = 1.0;
        for (int k : {denial, no_vegetation})
          if (k >= 0) present -= probs(k);
        present = std::max(present, 0.0);
        reported = (1.0 / (1.0 + (-s.array()).exp())).matrix() * present;
      }
      Prediction p;
      p.expression_id = e->expression_id;
      p.image_id = scene.image_id;
      p.level0_class = static_cast<int>(level0);
      for (Index j : order) {
        const Box& b = refined[j];
        p.proposals.push_back({{b.x1() * scene.width, b.y1() * scene.height,
                                b.x2() * scene.width, b.y2() * scene.height},
                               reported(j)});
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::string serialize_predictions(const PredictionFile& file) {
  std::string out;
  json header = {{"format", kPredictionFormat},
                 {"version", kPredictionVersion},
                 {"seed", file.seed},
                 {"dataset_hash", file.dataset_hash}};
  out += header.dump() + '\n';
  for (const auto& p : file.predictions) {
    json props = json::array();
    for (const auto& sp : p.proposals) props.push_back({{"bbox_xyxy_px", sp.bbox_xyxy_px}, {"score", sp.score}});
    json j = {{"expression_id", p.expression_id},
              {"image_id", p.image_id},
              {"level0_class", p.level0_class},
              {"proposals", std::move(props)}};
    out += j.dump() + '\n';
  }
  return out;
}

PredictionFile parse_predictions(const std::string& text) {
  PredictionFile file;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.empty()) continue;
    try {
      const json j = json::parse(raw);
      if (!have_header) {
        if (j.value("format", std::string()) != kPredictionFormat)
          throw ParseError(line, std::string("predictions format is not ") + kPredictionFormat);
        if (j.value("version", -1) != kPredictionVersion)
          throw ParseError(line, "unsupported predictions version");
        file.seed = j.value("seed", std::uint64_t{0});
        file.dataset_hash = j.value("dataset_hash", std::string());
        have_header = true;
        continue;
      }
      Prediction p;
      p.expression_id = j.at("expression_id").get<std::string>();
      p.image_id = j.at("image_id").get<std::string>();
      p.level0_class = j.at("level0_class").get<int>();
      for (const auto& jp : j.at("proposals")) {
        const auto xyxy = jp.at("bbox_xyxy_px").get<std::vector<double>>();
        if (xyxy.size() != 4) throw ParseError(line, "bbox_xyxy_px needs four values");
        p.proposals.push_back({{xyxy[0], xyxy[1], xyxy[2], xyxy[3]}, jp.at("score").get<double>()});
      }
      file.predictions.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(line, std::string("malformed prediction record: ") + e.what());
    }
  }
  if (!have_header) throw ParseError(1, "predictions header missing");
  return file;
}

void write_predictions(const PredictionFile& file, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write predictions " + path);
  out << serialize_predictions(file);
}

PredictionFile read_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read predictions " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_predictions(buf.str());
}

}  // namespace weedvg
