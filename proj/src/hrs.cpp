#include "weedvg/hrs.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "weedvg/errors.hpp"
#include "weedvg/io.hpp"

namespace weedvg {

namespace g = weedvg::grad;

namespace {

constexpr std::string_view kCheckpointFormat = "weedvg-hrs";

constexpr std::array<std::string_view, kNumHrsParams> kParamNames = {
    "proj_v",   "proj_v_bias",   "proj_t",   "proj_t_bias", "attn_q",  "attn_k",
    "attn_v",   "attn_o",        "attn_o_bias", "ffn_in",   "ffn_in_bias", "ffn_out",
    "ffn_out_bias", "log_tau",   "gate_in",  "gate_in_bias", "gate_out", "gate_out_bias"};

std::string normalise_flag(std::string_view name) {
  std::string s(name);
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

}  // namespace

void HrsDims::validate() const {
  if (d_v <= 0 || d_t <= 0 || d <= 0 || heads <= 0 || d_ff <= 0 || d_h <= 0) {
    throw ConfigError("HRS dimensions must be positive");
  }
  if (d % heads != 0) {
    throw ConfigError("embedding width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

void Ablation::enable(std::string_view name) {
  const std::string s = normalise_flag(name);
  if (s == "sentence-only") sentence_only = true;
  else if (s == "word-only") word_only = true;
  else if (s == "no-projection") no_projection = true;
  else if (s == "no-constraint") no_constraint = true;
  else if (s == "no-interp-iou") no_interp_iou = true;
  else if (s == "none" || s == "full") {}
  else throw ConfigError("unknown ablation '" + std::string(name) + "'");
  validate();
}

std::string Ablation::describe() const {
  std::vector<std::string> on;
  if (sentence_only) on.emplace_back("sentence-only");
  if (word_only) on.emplace_back("word-only");
  if (no_projection) on.emplace_back("no-projection");
  if (no_constraint) on.emplace_back("no-constraint");
  if (no_interp_iou) on.emplace_back("no-interp-iou");
  if (on.empty()) return "full";
  std::string out = on.front();
  for (std::size_t i = 1; i < on.size(); ++i) out += "+" + on[i];
  return out;
}

void Ablation::validate() const {
  if (sentence_only && word_only) {
    throw ConfigError("sentence-only and word-only ablations are mutually exclusive");
  }
}

Index TextFeatures::num_valid() const {
  return static_cast<Index>(std::count(valid.begin(), valid.end(), true));
}

Eigen::RowVectorXd TextFeatures::sentence() const {
  validate();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Constant(
      tokens.cols(), -std::numeric_limits<double>::infinity());
  for (Index r = 0; r < tokens.rows(); ++r)
    if (valid[r]) out = out.cwiseMax(tokens.row(r));
  return out;
}

void TextFeatures::validate() const {
  if (static_cast<Index>(valid.size()) != tokens.rows()) {
    throw ShapeError("text mask has " + std::to_string(valid.size()) + " entries for " +
                     std::to_string(tokens.rows()) + " tokens");
  }
  if (!words.empty() && static_cast<Index>(words.size()) != tokens.rows()) {
    throw ShapeError("text word list does not match the token count");
  }
  if (num_valid() == 0) throw EmptyTextError("text has no valid tokens");
}

void ProposalFeatures::validate() const {
  if (features.rows() < 1) throw ShapeError("at least one proposal is required");
  if (static_cast<Index>(boxes.size()) != features.rows()) {
    throw ShapeError("proposal feature rows do not match the box count");
  }
}

// ---- parameters ------------------------------------------------------------

HrsParams HrsParams::init(const HrsDims& dims, std::uint64_t seed, double tau) {
  dims.validate();
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  std::mt19937_64 rng(seed);
  auto weight = [&](Index rows, Index cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < cols; ++c) m(r, c) = u(rng);
    return m;
  };
  auto bias = [](Index cols) { return Matrix::Zero(1, cols).eval(); };

  HrsParams p;
  p.dims_ = dims;
  p[HrsParam::ProjV] = weight(dims.d_v, dims.d);
  p[HrsParam::ProjVBias] = bias(dims.d);
  p[HrsParam::ProjT] = weight(dims.d_t, dims.d);
  p[HrsParam::ProjTBias] = bias(dims.d);
  p[HrsParam::AttnQ] = weight(dims.d, dims.d);
  p[HrsParam::AttnK] = weight(dims.d, dims.d);
  p[HrsParam::AttnV] = weight(dims.d, dims.d);
  p[HrsParam::AttnO] = weight(dims.d, dims.d);
  p[HrsParam::AttnOBias] = bias(dims.d);
  p[HrsParam::FfnIn] = weight(dims.d, dims.d_ff);
  p[HrsParam::FfnInBias] = bias(dims.d_ff);
  p[HrsParam::FfnOut] = weight(dims.d_ff, dims.d);
  p[HrsParam::FfnOutBias] = bias(dims.d);
  p[HrsParam::LogTau] = Matrix::Constant(1, 1, std::log(tau));
  p[HrsParam::GateIn] = weight(dims.d, dims.d_h);
  p[HrsParam::GateInBias] = bias(dims.d_h);
  p[HrsParam::GateOut] = weight(dims.d_h, 1);
  p[HrsParam::GateOutBias] = bias(1);
  return p;
}

std::string_view HrsParams::name(HrsParam p) { return kParamNames[static_cast<std::size_t>(p)]; }

double HrsParams::tau() const { return std::exp((*this)[HrsParam::LogTau](0, 0)); }

void HrsParams::set_identity_projections() {
  if (dims_.d_v != dims_.d || dims_.d_t != dims_.d) {
    throw ConfigError("identity projections need d_v == d_t == d");
  }
  (*this)[HrsParam::ProjV] = Matrix::Identity(dims_.d, dims_.d);
  (*this)[HrsParam::ProjVBias].setZero();
  (*this)[HrsParam::ProjT] = Matrix::Identity(dims_.d, dims_.d);
  (*this)[HrsParam::ProjTBias].setZero();
}

void HrsParams::save(const std::string& path, std::uint64_t seed, const Ablation& ablation) const {
  std::vector<io::NamedMatrix> named;
  for (std::size_t i = 0; i < kNumHrsParams; ++i)
    named.emplace_back(std::string(kParamNames[i]), values_[i]);
  io::save_checkpoint(path, kCheckpointFormat, seed, named,
                      {{"heads", dims_.heads},
                       {"sentence_only", ablation.sentence_only},
                       {"word_only", ablation.word_only},
                       {"no_projection", ablation.no_projection},
                       {"no_constraint", ablation.no_constraint},
                       {"no_interp_iou", ablation.no_interp_iou}});
}

HrsParams HrsParams::load(const std::string& path, Ablation* ablation) {
  io::Metadata meta;
  const auto named = io::load_checkpoint(path, kCheckpointFormat, nullptr, &meta);
  HrsParams p;
  std::array<bool, kNumHrsParams> seen{};
  for (const auto& [name, m] : named) {
    const auto it = std::find(kParamNames.begin(), kParamNames.end(), name);
    if (it == kParamNames.end()) throw ParseError(1, "unknown HRS parameter " + name);
    const auto i = static_cast<std::size_t>(it - kParamNames.begin());
    p.values_[i] = m;
    seen[i] = true;
  }
  for (std::size_t i = 0; i < kNumHrsParams; ++i) {
    if (!seen[i]) throw ParseError(1, "checkpoint lacks HRS parameter " + std::string(kParamNames[i]));
  }
  if (!meta.count("heads")) throw ParseError(1, "checkpoint lacks the head count");
  p.dims_.d_v = p[HrsParam::ProjV].rows();
  p.dims_.d = p[HrsParam::ProjV].cols();
  p.dims_.d_t = p[HrsParam::ProjT].rows();
  p.dims_.d_ff = p[HrsParam::FfnIn].cols();
  p.dims_.d_h = p[HrsParam::GateIn].cols();
  p.dims_.heads = meta.at("heads");
  p.dims_.validate();
  if (ablation) {
    auto flag = [&](const char* key) { return meta.count(key) && meta.at(key) != 0; };
    ablation->sentence_only = flag("sentence_only");
    ablation->word_only = flag("word_only");
    ablation->no_projection = flag("no_projection");
    ablation->no_constraint = flag("no_constraint");
    ablation->no_interp_iou = flag("no_interp_iou");
  }

  // Shape audit against a fresh initialisation.
  const HrsParams ref = init(p.dims_, 0);
  for (std::size_t i = 0; i < kNumHrsParams; ++i) {
    if (ref.values_[i].rows() != p.values_[i].rows() ||
        ref.values_[i].cols() != p.values_[i].cols()) {
      throw ParseError(1, "HRS parameter " + std::string(kParamNames[i]) + " has a bad shape");
    }
  }
  return p;
}

// ---- vocabulary ------------------------------------------------------------

Level0Vocabulary Level0Vocabulary::standard() {
  Level0Vocabulary v;
  v.sentences = {"there is no crop in the image", "there is no weed in the image",
                 "there is no vegetation in the image", std::string(kEmptyToken)};
  v.class_of_type[static_cast<int>(ImageType::CropOnly)] = 1;
  v.class_of_type[static_cast<int>(ImageType::WeedOnly)] = 0;
  v.class_of_type[static_cast<int>(ImageType::Mixed)] = 3;
  v.class_of_type[static_cast<int>(ImageType::Empty)] = 2;
  return v;
}

int Level0Vocabulary::class_for(ImageType t) const {
  const int i = static_cast<int>(t);
  if (i < 0 || i >= kNumImageTypes) throw LabelError("unknown image type");
  return class_of_type[i];
}

int Level0Vocabulary::empty_index() const {
  const auto it = std::find(sentences.begin(), sentences.end(), kEmptyToken);
  if (it == sentences.end()) throw ConfigError("vocabulary has no [EMPTY] entry");
  return static_cast<int>(it - sentences.begin());
}

void Level0Vocabulary::validate() const {
  if (size() < 2) throw ConfigError("level-0 vocabulary needs at least two sentences");
  if (std::count(sentences.begin(), sentences.end(), kEmptyToken) != 1) {
    throw ConfigError("level-0 vocabulary must contain exactly one [EMPTY] entry");
  }
  for (int c : class_of_type) {
    if (c < 0 || c >= size()) throw ConfigError("image type maps outside the vocabulary");
  }
}

// ---- forward graph ---------------------------------------------------------

RelevanceOutput snapshot(const RelevanceVars& rel, const Level0Vars* level0) {
  RelevanceOutput out;
  out.s_sent = rel.s_sent.value().col(0);
  out.s_word = rel.s_word.value();
  out.w_s = rel.w_s.scalar();
  out.s_ref = rel.s_ref.value().col(0);
  if (level0) {
    out.level0_logits = level0->logits.value().row(0);
    out.level0_probs = level0->probs.value().row(0);
  }
  return out;
}

namespace {

void check_graph_config(const HrsParams& params, const Ablation& ablation) {
  ablation.validate();
  params.dims().validate();
  if (ablation.no_projection) {
    const auto& d = params.dims();
    if (d.d_v != d.d || d.d_t != d.d) {
      throw ConfigError("the no-projection ablation needs d_v == d_t == d");
    }
  }
}

}  // namespace

HrsGraph::HrsGraph(g::Tape& tape, const HrsParams& params, const Ablation& ablation,
                   bool trainable)
    : tape_(tape), params_(params), ablation_(ablation) {
  check_graph_config(params_, ablation_);
  leaves_.reserve(kNumHrsParams);
  for (const Matrix& m : params_.values()) leaves_.push_back(tape_.leaf(m, trainable));
}

HrsGraph::HrsGraph(g::Tape& tape, const HrsParams& params, std::vector<g::Var> leaves,
                   const Ablation& ablation)
    : tape_(tape), params_(params), ablation_(ablation), leaves_(std::move(leaves)) {
  check_graph_config(params_, ablation_);
  if (leaves_.size() != kNumHrsParams) throw ShapeError("expected one leaf per HRS parameter");
  for (std::size_t i = 0; i < kNumHrsParams; ++i) {
    if (leaves_[i].rows() != params.values()[i].rows() ||
        leaves_[i].cols() != params.values()[i].cols()) {
      throw ShapeError("leaf for " + std::string(kParamNames[i]) + " has the wrong shape");
    }
  }
}

g::Var HrsGraph::project_proposals(const ProposalFeatures& proposals) const {
  proposals.validate();
  if (proposals.features.cols() != params_.dims().d_v) {
    throw ShapeError("proposal features have width " + std::to_string(proposals.features.cols()) +
                     ", expected " + std::to_string(params_.dims().d_v));
  }
  const g::Var x = tape_.constant(proposals.features);
  if (ablation_.no_projection) return x;
  return g::matmul(x, leaf(HrsParam::ProjV)) + leaf(HrsParam::ProjVBias);
}

ProjectedText HrsGraph::project_text(const TextFeatures& text) const {
  text.validate();
  if (text.tokens.cols() != params_.dims().d_t) {
    throw ShapeError("token embeddings have width " + std::to_string(text.tokens.cols()) +
                     ", expected " + std::to_string(params_.dims().d_t));
  }
  Matrix valid(text.num_valid(), text.tokens.cols());
  for (Index r = 0, k = 0; r < text.tokens.rows(); ++r)
    if (text.valid[r]) valid.row(k++) = text.tokens.row(r);
  g::Var tokens = tape_.constant(std::move(valid));
  if (!ablation_.no_projection) {
    tokens = g::matmul(tokens, leaf(HrsParam::ProjT)) + leaf(HrsParam::ProjTBias);
  }
  return {tokens, g::colwise_max(tokens)};
}

g::Var HrsGraph::fuse(const g::Var& proposals, const ProjectedText& text) const {
  const auto& dims = params_.dims();
  const g::Var q = g::matmul(proposals, leaf(HrsParam::AttnQ));
  const g::Var k = g::matmul(text.tokens, leaf(HrsParam::AttnK));
  const g::Var v = g::matmul(text.tokens, leaf(HrsParam::AttnV));
  const g::Var heads = g::multi_head_attention(q, k, v, dims.heads);
  const g::Var attended =
      proposals + g::matmul(heads, leaf(HrsParam::AttnO)) + leaf(HrsParam::AttnOBias);
  const g::Var hidden =
      g::tanh(g::matmul(attended, leaf(HrsParam::FfnIn)) + leaf(HrsParam::FfnInBias));
  return attended + g::matmul(hidden, leaf(HrsParam::FfnOut)) + leaf(HrsParam::FfnOutBias);
}

g::Var HrsGraph::fuse(const ProposalFeatures& proposals, const TextFeatures& text) const {
  return fuse(project_proposals(proposals), project_text(text));
}

RelevanceVars HrsGraph::referring_score(const g::Var& fused, const ProjectedText& text) const {
  const g::Var inv_tau = g::exp(-leaf(HrsParam::LogTau));
  RelevanceVars out;
  out.s_sent = g::mul(g::cosine_similarity(fused, text.sentence), inv_tau);
  out.s_word = g::mul(g::cosine_similarity(fused, text.tokens), inv_tau);
  const g::Var word_best = g::rowwise_max(out.s_word);

  if (ablation_.sentence_only) {
    out.w_s = tape_.constant(Matrix::Ones(1, 1));
    out.s_ref = out.s_sent;
    return out;
  }
  if (ablation_.word_only) {
    out.w_s = tape_.constant(Matrix::Zero(1, 1));
    out.s_ref = word_best;
    return out;
  }
  const g::Var gate_hidden =
      g::tanh(g::matmul(text.sentence, leaf(HrsParam::GateIn)) + leaf(HrsParam::GateInBias));
  out.w_s =
      g::sigmoid(g::matmul(gate_hidden, leaf(HrsParam::GateOut)) + leaf(HrsParam::GateOutBias));
  out.s_ref = g::mul(out.s_sent, out.w_s) + g::mul(word_best, g::affine(out.w_s, -1.0, 1.0));
  return out;
}

RelevanceVars HrsGraph::relevance(const g::Var& proposals, const TextFeatures& text) const {
  const ProjectedText projected = project_text(text);
  return referring_score(fuse(proposals, projected), projected);
}

Level0Vars HrsGraph::level0_distribution(const g::Var& proposals,
                                         std::span<const TextFeatures> vocabulary) const {
  if (vocabulary.size() < 2) throw ConfigError("level-0 vocabulary needs at least two sentences");
  std::vector<g::Var> pooled;
  pooled.reserve(vocabulary.size());
  for (const TextFeatures& sentence : vocabulary) {
    pooled.push_back(g::colwise_max(relevance(proposals, sentence).s_ref));
  }
  Level0Vars out;
  out.logits = g::hcat(pooled);
  out.probs = g::softmax_rows(out.logits);
  return out;
}

// ---- losses ----------------------------------------------------------------

std::array<double, 2> HmceWeights::for_type(ImageType t) const {
  switch (t) {
    case ImageType::Mixed: return mixed;
    case ImageType::CropOnly:
    case ImageType::WeedOnly: return single;
    case ImageType::Empty: return empty;
  }
  throw LabelError("unknown image type");
}

g::Var loss_lvl0(const g::Var& logits, int true_class) {
  if (logits.rows() != 1) throw ShapeError("level-0 logits must be a single row");
  if (true_class < 0 || true_class >= logits.cols()) {
    throw LabelError("class " + std::to_string(true_class) + " outside a vocabulary of " +
                     std::to_string(logits.cols()));
  }
  return -g::element(g::log_softmax_rows(logits), 0, true_class);
}

g::Var loss_lvl1(const g::Var& s_ref, const std::vector<bool>& targets) {
  if (s_ref.cols() != 1 || s_ref.rows() < 1 ||
      static_cast<Index>(targets.size()) != s_ref.rows()) {
    throw ShapeError("instance scores must be N x 1 with one target per proposal");
  }
  Matrix t(s_ref.rows(), 1);
  for (Index i = 0; i < t.rows(); ++i) t(i, 0) = targets[i] ? 1.0 : 0.0;
  // -[t log s(x) + (1-t) log(1-s(x))] == softplus(x) - t x
  return g::mean(g::softplus(s_ref) - g::mul(s_ref, s_ref.tape()->constant(std::move(t))));
}

g::Var loss_constrained(const g::Var& l1, const g::Var& l0) { return g::maximum(l1, l0); }

g::Var loss_hmce(const g::Var& l0, const g::Var& l1c, ImageType type, const HmceWeights& w) {
  const auto [w0, w1] = w.for_type(type);
  return g::scale(l0, w0) + g::scale(l1c, w1);
}

g::Var loss_total(const g::Var& hmce, const g::Var& interp_iou) { return hmce + interp_iou; }

double loss_constrained(double l1, double l0) { return std::max(l1, l0); }

double loss_hmce(double l0, double l1c, ImageType type, const HmceWeights& w) {
  const auto [w0, w1] = w.for_type(type);
  return w0 * l0 + w1 * l1c;
}

double loss_total(double hmce, double interp_iou) { return hmce + interp_iou; }

}  // namespace weedvg
