#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace weedvg {

enum class Category { Maize, SugarBeet, Bean, Pea, Sunflower, Soy, Potato, Pumpkin, Weed };
inline constexpr int kNumCategories = 9;

enum class SizeBin { Tiny, Small, Medium, Large };
inline constexpr int kNumSizeBins = 4;

// 3 x 3 position grid, row-major from the top-left cell.
enum class GridCell {
  TopLeft, TopCentre, TopRight,
  MiddleLeft, Centre, MiddleRight,
  BottomLeft, BottomCentre, BottomRight
};
inline constexpr int kNumGridCells = 9;

enum class ImageType { CropOnly, WeedOnly, Mixed, Empty };
inline constexpr int kNumImageTypes = 4;

// Subject of an image-level (non-existence) sentence.
enum class ImageSubject { Crop, Weed, Vegetation };

enum class Level { Image, Instance };
enum class Polarity { Positive, Negative };
enum class NegativeKind { None, ReplaceCategory, SwapSize, SwapPosition };

inline constexpr bool is_crop(Category c) { return c != Category::Weed; }

std::string_view to_string(Category c);
std::string_view to_string(SizeBin s);
std::string_view to_string(GridCell g);
std::string_view to_string(ImageType t);
std::string_view to_string(ImageSubject s);
std::string_view to_string(Level l);
std::string_view to_string(Polarity p);
std::string_view to_string(NegativeKind k);

// Inverse lookups; nullopt for unknown names.
std::optional<Category> parse_category(std::string_view s);
std::optional<SizeBin> parse_size_bin(std::string_view s);
std::optional<GridCell> parse_grid_cell(std::string_view s);
std::optional<ImageType> parse_image_type(std::string_view s);
std::optional<ImageSubject> parse_image_subject(std::string_view s);
std::optional<Level> parse_level(std::string_view s);
std::optional<Polarity> parse_polarity(std::string_view s);
std::optional<NegativeKind> parse_negative_kind(std::string_view s);

inline constexpr std::array<Category, kNumCategories> kAllCategories = {
    Category::Maize, Category::SugarBeet, Category::Bean,   Category::Pea, Category::Sunflower,
    Category::Soy,   Category::Potato,    Category::Pumpkin, Category::Weed};
inline constexpr std::array<SizeBin, kNumSizeBins> kAllSizeBins = {
    SizeBin::Tiny, SizeBin::Small, SizeBin::Medium, SizeBin::Large};
inline constexpr std::array<GridCell, kNumGridCells> kAllGridCells = {
    GridCell::TopLeft,    GridCell::TopCentre,    GridCell::TopRight,
    GridCell::MiddleLeft, GridCell::Centre,       GridCell::MiddleRight,
    GridCell::BottomLeft, GridCell::BottomCentre, GridCell::BottomRight};
inline constexpr std::array<ImageType, kNumImageTypes> kAllImageTypes = {
    ImageType::CropOnly, ImageType::WeedOnly, ImageType::Mixed, ImageType::Empty};

}  // namespace weedvg
