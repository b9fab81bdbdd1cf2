#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "weedvg/geometry.hpp"
#include "weedvg/types.hpp"

// Annotation pipeline: instance filtering, attribute extraction, template
// expressions, image-level and test-time negatives, stratified splits and the
// JSON-lines dataset format.
namespace weedvg {

struct DatagenConfig {
  double min_area_px = 256.0;
  // Upper bounds (exclusive) of tiny, small and medium on sqrt(area) measured
  // as a fraction of sqrt(image area).
  std::array<double, 3> size_thresholds{0.05, 0.12, 0.30};
  std::string instance_template = "the {size} {category} at the {cell} of the image";
  double negative_fraction = 1.0 / 3.0;
  std::array<double, 3> split_ratios{0.70, 0.15, 0.15};

  void validate() const;
  // Stable fingerprint of every field, written into dataset headers.
  std::string hash() const;
};

struct InstanceAnnotation {
  int instance_id = 0;
  Category category = Category::Maize;
  std::array<double, 4> bbox_xyxy_px{};  // pixel corners
  Box box;                               // normalized centre form
  SizeBin size_bin = SizeBin::Tiny;
  GridCell grid_cell = GridCell::Centre;

  double area_px() const;
};

struct SceneAnnotation {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<InstanceAnnotation> instances;
  ImageType image_type = ImageType::Empty;

  const InstanceAnnotation* find(int instance_id) const;
};

struct Attributes {
  std::optional<Category> category;
  std::optional<ImageSubject> subject;  // image-level sentences only
  std::optional<SizeBin> size_bin;
  std::optional<GridCell> grid_cell;

  bool operator==(const Attributes&) const = default;
};

struct Expression {
  std::string expression_id;
  std::string image_id;
  std::string text;
  Level level = Level::Instance;
  Polarity polarity = Polarity::Positive;
  NegativeKind negative_kind = NegativeKind::None;
  Attributes attributes;
  std::vector<int> target_ids;
};

struct NegativeStats {
  NegativeKind kind = NegativeKind::None;
  std::size_t candidates = 0;  // positive instance expressions in the pool
  std::size_t requested = 0;
  std::size_t produced = 0;
  std::size_t skipped = 0;     // candidates with no valid manipulation
  std::size_t shortfall() const { return requested - produced; }
};

// ---- attributes ------------------------------------------------------------

ImageType classify_image(const std::vector<InstanceAnnotation>& instances);
// Column/row boundaries at 1/3 and 2/3; a centre exactly on a boundary falls
// into the lower cell (1/3 -> left/top).
GridCell grid_cell(const Box& normalized);
// Left-closed bins on r = sqrt(w h) / sqrt(W H).
SizeBin size_bin(double box_w_px, double box_h_px, double image_w, double image_h,
                 const DatagenConfig& cfg = {});

// Builds an instance from pixel corners, deriving the normalized box and the
// attributes. Throws DomainError on inverted corners or empty images.
InstanceAnnotation make_instance(int instance_id, Category category, double x1, double y1,
                                 double x2, double y2, int image_w, int image_h,
                                 const DatagenConfig& cfg = {});

// Drops instances below the area floor and recomputes the image type.
SceneAnnotation filter_instances(SceneAnnotation raw, const DatagenConfig& cfg = {});

// ---- expressions -----------------------------------------------------------

std::string render_instance_text(Category c, SizeBin s, GridCell g, const DatagenConfig& cfg = {});
std::string render_image_text(ImageSubject subject);

bool matches(const InstanceAnnotation& inst, const Attributes& attrs);
std::vector<int> matching_instances(const SceneAnnotation& scene, const Attributes& attrs);

// Positive expression for inst's attribute triple; targets every instance
// sharing that triple.
Expression gen_instance_expression(const InstanceAnnotation& inst, const SceneAnnotation& scene,
                                   const DatagenConfig& cfg = {});
// One expression per distinct triple, in order of first occurrence.
std::vector<Expression> gen_instance_expressions(const SceneAnnotation& scene,
                                                 const DatagenConfig& cfg = {});
std::vector<Expression> gen_image_negatives(const SceneAnnotation& scene);

struct TestNegatives {
  std::vector<Expression> expressions;
  std::array<NegativeStats, 3> stats;  // replace_category, swap_size, swap_position
};

// Samples candidates from the positive instance expressions of the given
// scenes, per manipulation kind, and produces negatives with no matching
// instance. Candidates without a valid manipulation are skipped; running out
// of candidates shows up as a shortfall in the stats.
TestNegatives gen_test_negatives(const std::vector<SceneAnnotation>& scenes,
                                 const std::vector<Expression>& positives, std::uint64_t seed,
                                 const DatagenConfig& cfg = {});

// ---- splits ----------------------------------------------------------------

struct Splits {
  std::vector<SceneAnnotation> train, val, test;
};

// Per-image-type proportional allocation; remainders by largest fractional
// part, ties to the earlier split. Throws ConfigError if ratios do not sum to 1.
std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& ratios);
Splits stratified_split(const std::vector<SceneAnnotation>& scenes, std::uint64_t seed,
                        const DatagenConfig& cfg = {});

// ---- dataset files ---------------------------------------------------------

inline constexpr const char* kDatasetFormat = "gref-cw-like";
inline constexpr int kDatasetVersion = 1;

struct Dataset {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<SceneAnnotation> scenes;
  std::vector<Expression> expressions;

  const SceneAnnotation* scene(const std::string& image_id) const;
};

// Filtered scenes with positive, image-level and (for the test split)
// instance-level negative expressions.
Dataset annotate(std::vector<SceneAnnotation> raw, bool with_test_negatives, std::uint64_t seed,
                 const DatagenConfig& cfg = {}, TestNegatives* negatives_out = nullptr);

std::string serialize_dataset(const Dataset& ds);
// Throws ParseError (with 1-based line number) on malformed records.
Dataset parse_dataset(const std::string& text, const DatagenConfig& cfg = {});
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path, const DatagenConfig& cfg = {});

}  // namespace weedvg
