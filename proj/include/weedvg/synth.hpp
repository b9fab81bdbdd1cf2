#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "weedvg/datagen.hpp"
#include "weedvg/geometry.hpp"
#include "weedvg/gradkit.hpp"
#include "weedvg/hrs.hpp"
#include "weedvg/matching.hpp"

// Synthetic stand-in for the detector/text backbone: scene sampling,
// deterministic attribute encoders, simulated proposals, a linear box
// refinement head, the two-stage training loop and prediction.
namespace weedvg {

inline constexpr int kNumDensityBuckets = 4;
// Bucket of an instance count: 1-10, 11-20, 21-30, >30 (0 for empty scenes too).
int density_bucket(std::size_t instances);
std::string_view density_bucket_name(int bucket);

struct SynthConfig {
  std::uint64_t seed = 7;
  int num_scenes = 400;
  int image_width = 512;
  int image_height = 512;
  // crop_only, weed_only, mixed, empty
  std::array<double, kNumImageTypes> image_type_mix{0.30, 0.25, 0.30, 0.15};
  std::array<double, kNumDensityBuckets> density_mix{0.85, 0.15, 0.0, 0.0};
  std::array<double, kNumSizeBins> size_mix{0.35, 0.45, 0.15, 0.05};
  double weed_share_mixed = 0.5;
  // Gaussian noise on proposal features.
  double feature_noise = 0.1;
  // Weight of the crop/weed presence component shared by all proposals of a
  // scene; 0 switches it off.
  double context_strength = 1.0;
  int distractors_min = 3;
  int distractors_max = 6;
  // Distractor features carry the size and cell words of their box.
  bool distractor_attributes = true;
  double centre_jitter = 0.10;  // fraction of box size
  double scale_jitter = 0.20;
  double evidence_noise = 0.03;
  int max_tokens = 64;
  Eigen::Index d_v = 64;
  Eigen::Index d_t = 64;
  int placement_attempts = 300;
  DatagenConfig datagen;

  void validate() const;
};

// ---- encoders --------------------------------------------------------------

// Word embeddings with pairwise disjoint non-negative supports, so distinct
// words are orthogonal and a max-pool over distinct words equals their sum.
// Filler words map to the zero vector.
class Embeddings {
 public:
  static Embeddings build(Eigen::Index dim, std::uint64_t seed);

  bool known(std::string_view word) const { return table_.count(std::string(word)) > 0; }
  bool is_filler(std::string_view word) const { return !known(word); }
  // Zero row for filler words.
  Eigen::RowVectorXd word(std::string_view word) const;
  // Sum of the embeddings of the whitespace-separated words of phrase.
  Eigen::RowVectorXd phrase(std::string_view phrase) const;
  Eigen::Index dim() const { return dim_; }

  static constexpr std::string_view kBackground = "<background>";
  static constexpr std::string_view kCropPresent = "<crop-present>";
  static constexpr std::string_view kWeedPresent = "<weed-present>";

 private:
  Eigen::Index dim_ = 0;
  std::map<std::string, Eigen::RowVectorXd> table_;
};

std::vector<std::string> tokenize(std::string_view text);

// Whitespace tokens, truncated to max_tokens (with a warning on stderr).
TextFeatures encode_text(const std::string& text, const Embeddings& emb, int max_tokens = 64);
std::vector<TextFeatures> encode_vocabulary(const Level0Vocabulary& vocab, const Embeddings& emb);

// Noise-free feature of an instance: embedding of its attribute words.
Eigen::RowVectorXd attribute_feature(Category c, SizeBin s, GridCell g, const Embeddings& emb);

struct ProposalSet {
  ProposalFeatures proposals;  // normalized boxes
  std::vector<int> source_ids;  // instance id, -1 for background
  Eigen::MatrixXd evidence;     // N x 4 regression cues for the box head
};

// One jittered proposal per instance plus background distractors that do
// not overlap any instance. Deterministic in (cfg.seed, image_id, stream).
ProposalSet encode_proposals(const SceneAnnotation& scene, const SynthConfig& cfg,
                             const Embeddings& emb, std::uint64_t stream = 0);

// ---- scenes ----------------------------------------------------------------

std::vector<SceneAnnotation> gen_raw_scenes(const SynthConfig& cfg);

struct SynthDataset {
  Dataset train, val, test;
  TestNegatives negatives;
};

// Raw scenes -> filtering, expressions, split, test negatives.
SynthDataset gen_scenes(const SynthConfig& cfg);

// Copies one instance of src into dst at a free position with attributes
// re-derived. Returns false when no free position was found.
bool copy_paste(SceneAnnotation& dst, const SceneAnnotation& src, std::uint64_t seed,
                const SynthConfig& cfg);

// ---- box head --------------------------------------------------------------

// Refined box: (cx + w d0, cy + h d1, w exp(d2), h exp(d3)) with d = W [e; 1].
struct BoxHead {
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(4, 5);

  Eigen::MatrixXd deltas(const Eigen::MatrixXd& evidence) const;
  std::vector<Box> refine(const ProposalSet& set) const;
  std::uint64_t checksum() const;

  void save(const std::string& path, std::uint64_t seed) const;
  static BoxHead load(const std::string& path);
};

// Tape op: boxes (N) and deltas (N x 4) -> refined centre-form boxes (N x 4).
grad::Var apply_box_deltas(const std::vector<Box>& boxes, const grad::Var& deltas);
// Tape op: mean regression loss over (row of refined, gt) pairs. Uses the
// interpolated IoU loss, or plain 1 - GIoU when use_giou is set.
grad::Var box_regression_loss(const grad::Var& refined,
                              const std::vector<std::pair<int, Box>>& pairs,
                              const InterpConfig& interp, bool use_giou);

// ---- training --------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

class Adam {
 public:
  Adam(std::vector<Eigen::MatrixXd*> params, const AdamConfig& cfg = {});
  void step(const std::vector<Eigen::MatrixXd>& grads, double lr);
  long steps() const { return t_; }

 private:
  std::vector<Eigen::MatrixXd*> params_;
  std::vector<Eigen::MatrixXd> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

// Cosine annealing from lr0 to 0 over total steps.
double cosine_lr(double lr0, long step, long total);

struct TrainConfig {
  std::uint64_t seed = 7;
  int stage1_epochs = 20;
  int stage2_epochs = 12;
  int batch_size = 4;
  double lr_stage1 = 5e-3;
  double lr_stage2 = 2e-4;
  AdamConfig adam;
  double tau_init = 0.07;
  HrsDims dims;
  InterpConfig interp;
  MatchConfig match;
  HmceWeights hmce;
  Ablation ablation;
  double copy_paste_prob = 0.0;
  int max_expressions_per_image = 8;

  void validate() const;
};

struct LogRow {
  int epoch = 0;
  int stage = 0;
  double loss_total = 0.0;
  double loss_lvl0 = 0.0;
  double loss_lvl1c = 0.0;
  double loss_interp_iou = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  HrsParams hrs;
  BoxHead box;
  std::vector<LogRow> log;
  bool aborted = false;
  std::string abort_reason;
};

enum class StageSelect { One, Two, Both };

using ProgressFn = std::function<void(const LogRow&)>;

// Stage 1 fits the box head under the regression loss with distance/size
// aware matching; stage 2 freezes it and fits the HRS head under the
// hierarchical loss. For StageSelect::Two, box_init must carry the stage-1
// result. A non-finite loss stops training with the last good parameters.
TrainResult train_two_stage(const Dataset& train, const SynthConfig& scfg, const TrainConfig& tcfg,
                            StageSelect stages = StageSelect::Both,
                            const BoxHead* box_init = nullptr, const ProgressFn& progress = {});

std::string log_to_csv(const std::vector<LogRow>& log);

// Loss of one scene's level-0 head and HMCE over its expressions; exposed
// for tests. Returns the tape value of the per-image loss.
struct ImageLoss {
  grad::Var total;
  double l0 = 0.0;
  double l1c = 0.0;
};
ImageLoss image_hrs_loss(const HrsGraph& graph, const SceneAnnotation& scene,
                         const std::vector<const Expression*>& expressions,
                         const ProposalSet& set, const std::vector<TextFeatures>& vocab_text,
                         const Embeddings& emb, const TrainConfig& tcfg, int max_tokens);

// ---- prediction ------------------------------------------------------------

struct ScoredProposal {
  std::array<double, 4> bbox_xyxy_px{};
  double score = 0.0;
};

struct Prediction {
  std::string expression_id;
  std::string image_id;
  int level0_class = -1;
  std::vector<ScoredProposal> proposals;  // descending score
};

// With gate_by_level0, instance scores become sigmoid(S_ref) times the level-0
// probability that the expression's subject is present (one minus the mass on
// the sentences denying it). Ranking is unchanged; only the scale moves.
std::vector<Prediction> predict(const Dataset& ds, const SynthConfig& scfg, const HrsParams& hrs,
                                const BoxHead& box, const Ablation& ablation = {},
                                bool gate_by_level0 = false);

inline constexpr const char* kPredictionFormat = "weedvg-predictions";
inline constexpr int kPredictionVersion = 1;

struct PredictionFile {
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::vector<Prediction> predictions;
};

std::string serialize_predictions(const PredictionFile& file);
PredictionFile parse_predictions(const std::string& text);
void write_predictions(const PredictionFile& file, const std::string& path);
PredictionFile read_predictions(const std::string& path);

}  // namespace weedvg
