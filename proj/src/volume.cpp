#include "rwseg/volume.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "rwseg/error.hpp"

namespace rwseg {

static_assert(std::endian::native == std::endian::little,
              "RVOL/RSEG payloads are written with native float layout");

Volume::Volume(Dims dims, Spacing spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  if (dims_.nx == 0 || dims_.ny == 0 || dims_.nz == 0) {
    throw FormatError("volume dimensions must be positive");
  }
  if (dims_.count() > std::numeric_limits<Index>::max()) {
    throw FormatError("volume too large");
  }
  if (data_.size() != dims_.count()) {
    throw FormatError("payload mismatch: expected " + std::to_string(dims_.count()) + " values, got " +
                      std::to_string(data_.size()));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) throw FormatError("non-finite intensity");
  }
}

void SeedMap::add(std::size_t index, std::size_t label) {
  if (label >= num_labels_) {
    throw std::invalid_argument("seed label " + std::to_string(label) + " out of range");
  }
  if (!entries_.emplace(index, label).second) {
    throw std::invalid_argument("duplicate seed index " + std::to_string(index));
  }
}

void SeedMap::validate(std::size_t num_voxels) const {
  if (!entries_.empty() && entries_.rbegin()->first >= num_voxels) {
    throw FormatError("seed index " + std::to_string(entries_.rbegin()->first) + " out of range");
  }
}

SoftSegmentation::SoftSegmentation(std::size_t num_voxels, std::size_t num_labels,
                                   std::vector<double> rows)
    : num_voxels_(num_voxels), num_labels_(num_labels), rows_(std::move(rows)) {
  if (num_labels_ < 2) throw FormatError("a soft segmentation needs at least two labels");
  if (rows_.size() != num_voxels_ * num_labels_) throw FormatError("payload mismatch");
  for (std::size_t i = 0; i < num_voxels_; ++i) {
    double sum = 0.0;
    for (double p : row(i)) {
      if (!(p >= 0.0 && p <= 1.0)) throw FormatError("probability outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance) throw FormatError("row not normalized");
  }
}

SoftSegmentation SoftSegmentation::uniform(std::size_t num_voxels, std::size_t num_labels) {
  return {num_voxels, num_labels,
          std::vector<double>(num_voxels * num_labels, 1.0 / static_cast<double>(num_labels))};
}

SoftSegmentation SoftSegmentation::one_hot(std::span<const std::uint32_t> labels,
                                           std::size_t num_labels) {
  std::vector<double> rows(labels.size() * num_labels, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_labels) throw FormatError("label out of range");
    rows[i * num_labels + labels[i]] = 1.0;
  }
  return {labels.size(), num_labels, std::move(rows)};
}

PriorWeighting::PriorWeighting(std::vector<double> diagonal) : diagonal_(std::move(diagonal)) {
  for (double w : diagonal_) {
    if (!std::isfinite(w) || w < 0.0) throw FormatError("prior weighting must be finite and >= 0");
  }
}

Volume normalize_intensities(const Volume& v) {
  const auto data = v.data();
  if (data.size() < 2) throw FormatError("degenerate volume");
  double mean = 0.0;
  for (double x : data) mean += x;
  mean /= static_cast<double>(data.size());
  double var = 0.0;
  for (double x : data) var += (x - mean) * (x - mean);
  var /= static_cast<double>(data.size());
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) throw FormatError("degenerate volume");
  std::vector<double> out(data.begin(), data.end());
  for (double& x : out) x /= sd;
  return {v.dims(), v.spacing(), std::move(out)};
}

namespace {

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw std::runtime_error("cannot format number");
  return {buf.data(), ptr};
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::vector<std::string> read_header(std::istream& in, const char* magic, std::size_t fields) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("malformed header: empty file");
  std::istringstream ss(line);
  std::vector<std::string> tokens;
  for (std::string t; ss >> t;) tokens.push_back(t);
  if (tokens.empty() || tokens[0] != magic || tokens.size() != fields + 1) {
    throw FormatError(std::string("malformed header: expected ") + magic);
  }
  tokens.erase(tokens.begin());
  return tokens;
}

template <class T>
T parse_number(const std::string& s) {
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError("malformed header field '" + s + "'");
  return value;
}

std::size_t parse_extent(const std::string& s) {
  const auto v = parse_number<std::size_t>(s);
  if (v == 0) throw FormatError("malformed header: zero extent");
  return v;
}

std::vector<float> read_payload(std::istream& in, std::size_t count) {
  std::vector<float> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
    throw FormatError("payload mismatch: file too short");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("payload mismatch: trailing bytes");
  return values;
}

void write_payload(std::ostream& out, std::span<const double> values) {
  std::vector<float> buf(values.size());
  std::transform(values.begin(), values.end(), buf.begin(), [](double v) { return static_cast<float>(v); });
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, "RVOL1", 6);
  const Dims dims{parse_extent(h[0]), parse_extent(h[1]), parse_extent(h[2])};
  const Spacing spacing{parse_number<double>(h[3]), parse_number<double>(h[4]), parse_number<double>(h[5])};
  const auto raw = read_payload(in, dims.count());
  return {dims, spacing, std::vector<double>(raw.begin(), raw.end())};
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  auto out = open_out(path);
  const auto& d = v.dims();
  const auto& s = v.spacing();
  out << "RVOL1 " << d.nx << ' ' << d.ny << ' ' << d.nz << ' ' << format_double(s.sx) << ' '
      << format_double(s.sy) << ' ' << format_double(s.sz) << '\n';
  write_payload(out, v.data());
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SegmentationFile load_soft_segmentation(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, "RSEG1", 4);
  const Dims dims{parse_extent(h[0]), parse_extent(h[1]), parse_extent(h[2])};
  const std::size_t labels = parse_number<std::size_t>(h[3]);
  if (labels < 2) throw FormatError("malformed header: fewer than two labels");
  const auto raw = read_payload(in, dims.count() * labels);
  std::vector<double> rows(raw.begin(), raw.end());
  for (std::size_t i = 0; i < dims.count(); ++i) {
    double* row = rows.data() + i * labels;
    double sum = 0.0;
    for (std::size_t s = 0; s < labels; ++s) {
      if (!(row[s] >= 0.0 && row[s] <= 1.0)) throw FormatError("probability outside [0,1]");
      sum += row[s];
    }
    if (std::abs(sum - 1.0) > kFileRowSumTolerance) throw FormatError("row not normalized");
    if (sum != 1.0) {
      for (std::size_t s = 0; s < labels; ++s) row[s] = std::min(1.0, row[s] / sum);
    }
  }
  return {dims, SoftSegmentation(dims.count(), labels, std::move(rows))};
}

void save_soft_segmentation(const SoftSegmentation& s, const Dims& dims, const std::filesystem::path& path) {
  if (dims.count() != s.num_voxels()) throw FormatError("segmentation does not match dimensions");
  auto out = open_out(path);
  out << "RSEG1 " << dims.nx << ' ' << dims.ny << ' ' << dims.nz << ' ' << s.num_labels() << '\n';
  write_payload(out, s.data());
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::uint32_t> load_label_map(const std::filesystem::path& path, const Dims& expected,
                                          std::size_t num_labels) {
  const Volume v = load_volume(path);
  if (!(v.dims() == expected)) throw FormatError("label map dimensions do not match volume");
  std::vector<std::uint32_t> labels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    if (x < 0.0 || x != std::floor(x) || x >= static_cast<double>(num_labels)) {
      throw FormatError("label map value out of range at voxel " + std::to_string(i));
    }
    labels[i] = static_cast<std::uint32_t>(x);
  }
  return labels;
}

SeedMap seed_map_from_json(const nlohmann::json& doc) {
  try {
    const auto num_labels = doc.at("num_labels").get<std::size_t>();
    if (num_labels < 2) throw FormatError("num_labels must be >= 2");
    SeedMap seeds(num_labels);
    for (const auto& e : doc.at("seeds")) {
      seeds.add(e.at("index").get<std::size_t>(), e.at("label").get<std::size_t>());
    }
    return seeds;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed seed map: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid seed map: ") + e.what());
  }
}

nlohmann::json to_json(const SeedMap& seeds) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [index, label] : seeds.entries()) list.push_back({{"index", index}, {"label", label}});
  return {{"num_labels", seeds.num_labels()}, {"seeds", std::move(list)}};
}

SeedMap load_seed_map(const std::filesystem::path& path) {
  auto in = open_in(path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed seed map: ") + e.what());
  }
  return seed_map_from_json(doc);
}

void save_seed_map(const SeedMap& seeds, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << to_json(seeds).dump(2) << '\n';
}

}  // namespace rwseg
