#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace weedvg::io {

using NamedMatrix = std::pair<std::string, Eigen::MatrixXd>;

inline constexpr int kCheckpointVersion = 1;

// JSON checkpoint: {format, version, seed, meta, params: {name: {shape, values}}}
// with row-major values. Doubles round-trip exactly.
using Metadata = std::map<std::string, long long>;

void save_checkpoint(const std::string& path, std::string_view format, std::uint64_t seed,
                     const std::vector<NamedMatrix>& params, const Metadata& meta = {});
// Throws ParseError on format/version mismatch or malformed content.
std::vector<NamedMatrix> load_checkpoint(const std::string& path, std::string_view format,
                                         std::uint64_t* seed = nullptr,
                                         Metadata* meta = nullptr);

// FNV-1a over the raw bytes of every matrix (shape included).
std::uint64_t checksum(std::span<const Eigen::MatrixXd> matrices);
std::string fnv1a_hex(std::string_view data);

}  // namespace weedvg::io
