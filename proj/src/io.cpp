#include "weedvg/io.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "weedvg/errors.hpp"

namespace weedvg::io {

using nlohmann::json;

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

void save_checkpoint(const std::string& path, std::string_view format, std::uint64_t seed,
                     const std::vector<NamedMatrix>& params, const Metadata& meta) {
  json doc;
  doc["format"] = format;
  doc["version"] = kCheckpointVersion;
  doc["seed"] = seed;
  doc["meta"] = meta;
  json& entries = doc["params"] = json::object();
  for (const auto& [name, m] : params) {
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) values.push_back(m(r, c));
    entries[name] = {{"shape", {m.rows(), m.cols()}}, {"values", values}};
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  out << doc.dump() << '\n';
}

std::vector<NamedMatrix> load_checkpoint(const std::string& path, std::string_view format,
                                         std::uint64_t* seed, Metadata* meta) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read checkpoint " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  std::vector<NamedMatrix> out;
  try {
    if (!doc.is_object()) throw ParseError(1, "checkpoint must be a JSON object");
    if (!doc.contains("format") || doc.at("format").get<std::string>() != format) {
      throw ParseError(1, "checkpoint format is not " + std::string(format));
    }
    if (doc.value("version", -1) != kCheckpointVersion) {
      throw ParseError(1, "unsupported checkpoint version " + doc.value("version", json(-1)).dump());
    }
    if (seed) *seed = doc.value("seed", std::uint64_t{0});
    if (meta) *meta = doc.value("meta", Metadata{});
    for (const auto& [name, entry] : doc.at("params").items()) {
      const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
      const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
      const auto values = entry.at("values").get<std::vector<double>>();
      if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(values.size()) != rows * cols) {
        throw ParseError(1, "parameter " + name + " has " + std::to_string(values.size()) +
                                " values for shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
      }
      Eigen::MatrixXd m(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = values[r * cols + c];
      out.emplace_back(name, std::move(m));
    }
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("malformed checkpoint: ") + e.what());
  }
  return out;
}

std::uint64_t checksum(std::span<const Eigen::MatrixXd> matrices) {
  std::uint64_t h = kFnvOffset;
  for (const auto& m : matrices) {
    const Eigen::Index shape[2] = {m.rows(), m.cols()};
    fnv_mix(h, shape, sizeof(shape));
    fnv_mix(h, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  return h;
}

std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = kFnvOffset;
  fnv_mix(h, data.data(), data.size());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace weedvg::io
