#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "weedvg/geometry.hpp"
#include "weedvg/gradkit.hpp"
#include "weedvg/types.hpp"

// Hierarchical relevance scoring: cross-modal fusion of proposal queries
// with text tokens, sentence/word similarity fusion, image-level existence
// classification over a fixed sentence vocabulary, and the constrained
// two-level training objective.
namespace weedvg {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct HrsDims {
  Index d_v = 64;   // proposal feature width
  Index d_t = 64;   // token embedding width
  Index d = 64;     // shared embedding width
  Index heads = 4;
  Index d_ff = 128;
  Index d_h = 32;   // fusion-weight MLP hidden width

  void validate() const;
  bool operator==(const HrsDims&) const = default;
};

// Switches for the component ablations.
struct Ablation {
  bool sentence_only = false;
  bool word_only = false;
  bool no_projection = false;
  bool no_constraint = false;
  bool no_interp_iou = false;

  // Accepts "sentence-only", "word-only", "no-projection", "no-constraint",
  // "no-interp-iou" (underscores also accepted). Throws ConfigError.
  void enable(std::string_view name);
  std::string describe() const;
  void validate() const;
};

// Token-level text input: one embedding row per token plus a mask marking
// the tokens that carry meaning. Filler words are masked out.
struct TextFeatures {
  Matrix tokens;  // N_t x d_t
  std::vector<bool> valid;
  std::vector<std::string> words;

  Index num_valid() const;
  // Masked max-pool of the raw token embeddings.
  Eigen::RowVectorXd sentence() const;
  void validate() const;
};

struct ProposalFeatures {
  Matrix features;  // N x d_v
  std::vector<Box> boxes;

  Index size() const { return features.rows(); }
  void validate() const;
};

enum class HrsParam : int {
  ProjV, ProjVBias, ProjT, ProjTBias,
  AttnQ, AttnK, AttnV, AttnO, AttnOBias,
  FfnIn, FfnInBias, FfnOut, FfnOutBias,
  LogTau,
  GateIn, GateInBias, GateOut, GateOutBias,
  Count
};
inline constexpr std::size_t kNumHrsParams = static_cast<std::size_t>(HrsParam::Count);

class HrsParams {
 public:
  HrsParams() = default;

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, tau = 0.07.
  static HrsParams init(const HrsDims& dims, std::uint64_t seed, double tau = 0.07);

  Matrix& operator[](HrsParam p) { return values_[static_cast<std::size_t>(p)]; }
  const Matrix& operator[](HrsParam p) const { return values_[static_cast<std::size_t>(p)]; }
  std::span<Matrix> values() { return values_; }
  std::span<const Matrix> values() const { return values_; }
  const HrsDims& dims() const { return dims_; }

  static std::string_view name(HrsParam p);
  double tau() const;
  void set_identity_projections();

  // The ablation is stored alongside so that inference rebuilds the same graph.
  void save(const std::string& path, std::uint64_t seed, const Ablation& ablation = {}) const;
  static HrsParams load(const std::string& path, Ablation* ablation = nullptr);

 private:
  HrsDims dims_;
  std::array<Matrix, kNumHrsParams> values_;
};

// Fixed image-level sentence vocabulary for existence classification.
struct Level0Vocabulary {
  static constexpr std::string_view kEmptyToken = "[EMPTY]";

  std::vector<std::string> sentences;
  // Ground-truth class per ImageType (crop_only, weed_only, mixed, empty).
  std::array<int, kNumImageTypes> class_of_type{};

  static Level0Vocabulary standard();
  int size() const { return static_cast<int>(sentences.size()); }
  int class_for(ImageType t) const;
  int empty_index() const;
  void validate() const;
};

struct ProjectedText {
  grad::Var tokens;    // N_valid x d
  grad::Var sentence;  // 1 x d, masked max-pool of the projected tokens
};

struct RelevanceVars {
  grad::Var s_sent;  // N x 1
  grad::Var s_word;  // N x N_valid
  grad::Var w_s;     // 1 x 1
  grad::Var s_ref;   // N x 1
};

struct Level0Vars {
  grad::Var logits;  // 1 x K
  grad::Var probs;   // 1 x K
};

// Plain-value copy of a forward pass.
struct RelevanceOutput {
  Eigen::VectorXd s_sent;
  Matrix s_word;
  double w_s = 0.0;
  Eigen::VectorXd s_ref;
  Eigen::RowVectorXd level0_logits;
  Eigen::RowVectorXd level0_probs;
};

RelevanceOutput snapshot(const RelevanceVars& rel, const Level0Vars* level0 = nullptr);

// Binds HrsParams onto a tape and builds the forward graph.
class HrsGraph {
 public:
  HrsGraph(grad::Tape& tape, const HrsParams& params, const Ablation& ablation = {},
           bool trainable = false);
  // Uses caller-owned leaves, one per HrsParam, in place of fresh ones.
  HrsGraph(grad::Tape& tape, const HrsParams& params, std::vector<grad::Var> leaves,
           const Ablation& ablation = {});

  const std::vector<grad::Var>& leaves() const { return leaves_; }
  const grad::Var& leaf(HrsParam p) const { return leaves_[static_cast<std::size_t>(p)]; }
  grad::Tape& tape() const { return tape_; }

  grad::Var project_proposals(const ProposalFeatures& proposals) const;
  ProjectedText project_text(const TextFeatures& text) const;

  // Proposals attend to the valid text tokens (multi-head cross-attention),
  // followed by a residual feed-forward block. Output N x d.
  grad::Var fuse(const grad::Var& proposals, const ProjectedText& text) const;
  grad::Var fuse(const ProposalFeatures& proposals, const TextFeatures& text) const;

  RelevanceVars referring_score(const grad::Var& fused, const ProjectedText& text) const;

  // Projection, fusion and scoring for one expression.
  RelevanceVars relevance(const grad::Var& proposals, const TextFeatures& text) const;

  // Pooled logit per vocabulary sentence: max over proposals of S_ref.
  Level0Vars level0_distribution(const grad::Var& proposals,
                                 std::span<const TextFeatures> vocabulary) const;

 private:
  grad::Tape& tape_;
  const HrsParams& params_;
  Ablation ablation_;
  std::vector<grad::Var> leaves_;
};

// ---- losses ---------------------------------------------------------------

struct HmceWeights {
  std::array<double, 2> mixed{1.0, 2.5};
  std::array<double, 2> single{1.0, 2.0};
  std::array<double, 2> empty{1.0, 0.0};

  std::array<double, 2> for_type(ImageType t) const;
};

// Cross-entropy of the image-level logits against true_class.
grad::Var loss_lvl0(const grad::Var& logits, int true_class);
// Mean binary cross-entropy of sigmoid(s_ref) against per-proposal targets.
grad::Var loss_lvl1(const grad::Var& s_ref, const std::vector<bool>& targets);
// Instance loss bounded below by the image-level loss.
grad::Var loss_constrained(const grad::Var& l1, const grad::Var& l0);
grad::Var loss_hmce(const grad::Var& l0, const grad::Var& l1c, ImageType type,
                    const HmceWeights& weights = {});
grad::Var loss_total(const grad::Var& hmce, const grad::Var& interp_iou);

double loss_constrained(double l1, double l0);
double loss_hmce(double l0, double l1c, ImageType type, const HmceWeights& weights = {});
double loss_total(double hmce, double interp_iou);

}  // namespace weedvg
