#include "weedvg/types.hpp"

namespace weedvg {

namespace {

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(std::string_view s, const std::array<std::string_view, N>& names) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<Enum>(i);
  return std::nullopt;
}

constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "maize", "sugar beet", "bean", "pea", "sunflower", "soy", "potato", "pumpkin", "weed"};
constexpr std::array<std::string_view, kNumSizeBins> kSizeNames = {"tiny", "small", "medium",
                                                                   "large"};
constexpr std::array<std::string_view, kNumGridCells> kCellNames = {
    "top left",    "top centre",    "top right",    "middle left", "centre",
    "middle right", "bottom left", "bottom centre", "bottom right"};
constexpr std::array<std::string_view, kNumImageTypes> kImageTypeNames = {"crop_only", "weed_only",
                                                                          "mixed", "empty"};
constexpr std::array<std::string_view, 3> kSubjectNames = {"crop", "weed", "vegetation"};
constexpr std::array<std::string_view, 2> kLevelNames = {"image", "instance"};
constexpr std::array<std::string_view, 2> kPolarityNames = {"positive", "negative"};
constexpr std::array<std::string_view, 4> kNegativeKindNames = {"none", "replace_category",
                                                                "swap_size", "swap_position"};

}  // namespace

std::string_view to_string(Category c) { return kCategoryNames[static_cast<int>(c)]; }
std::string_view to_string(SizeBin s) { return kSizeNames[static_cast<int>(s)]; }
std::string_view to_string(GridCell g) { return kCellNames[static_cast<int>(g)]; }
std::string_view to_string(ImageType t) { return kImageTypeNames[static_cast<int>(t)]; }
std::string_view to_string(ImageSubject s) { return kSubjectNames[static_cast<int>(s)]; }
std::string_view to_string(Level l) { return kLevelNames[static_cast<int>(l)]; }
std::string_view to_string(Polarity p) { return kPolarityNames[static_cast<int>(p)]; }
std::string_view to_string(NegativeKind k) { return kNegativeKindNames[static_cast<int>(k)]; }

std::optional<Category> parse_category(std::string_view s) { return lookup<Category>(s, kCategoryNames); }
std::optional<SizeBin> parse_size_bin(std::string_view s) { return lookup<SizeBin>(s, kSizeNames); }
std::optional<GridCell> parse_grid_cell(std::string_view s) { return lookup<GridCell>(s, kCellNames); }
std::optional<ImageType> parse_image_type(std::string_view s) {
  return lookup<ImageType>(s, kImageTypeNames);
}
std::optional<ImageSubject> parse_image_subject(std::string_view s) {
  return lookup<ImageSubject>(s, kSubjectNames);
}
std::optional<Level> parse_level(std::string_view s) { return lookup<Level>(s, kLevelNames); }
std::optional<Polarity> parse_polarity(std::string_view s) { return lookup<Polarity>(s, kPolarityNames); }
std::optional<NegativeKind> parse_negative_kind(std::string_view s) {
  return lookup<NegativeKind>(s, kNegativeKindNames);
}

}  // namespace weedvg
