#include "rwseg/service.hpp"

#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "httplib.h"
#include "json.hpp"
#include "rwseg/error.hpp"

namespace rwseg {

std::vector<std::size_t> slice_voxels(const Dims& dims, SliceAxis axis, std::size_t index) {
  std::vector<std::size_t> out;
  switch (axis) {
    case SliceAxis::z:
      if (index >= dims.nz) throw std::out_of_range("slice index out of range");
      for (std::size_t y = 0; y < dims.ny; ++y)
        for (std::size_t x = 0; x < dims.nx; ++x) out.push_back(linear_index(dims, x, y, index));
      break;
    case SliceAxis::y:
      if (index >= dims.ny) throw std::out_of_range("slice index out of range");
      for (std::size_t z = 0; z < dims.nz; ++z)
        for (std::size_t x = 0; x < dims.nx; ++x) out.push_back(linear_index(dims, x, index, z));
      break;
    case SliceAxis::x:
      if (index >= dims.nx) throw std::out_of_range("slice index out of range");
      for (std::size_t z = 0; z < dims.nz; ++z)
        for (std::size_t y = 0; y < dims.ny; ++y) out.push_back(linear_index(dims, index, y, z));
      break;
  }
  return out;
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>(v >> shift & 0xff));
}

void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = png.size();
  png.append(type, 4);
  png += data;
  const auto* bytes = reinterpret_cast<const Bytef*>(png.data() + start);
  put_u32(png, static_cast<std::uint32_t>(crc32(0L, bytes, static_cast<uInt>(png.size() - start))));
}

}  // namespace

std::string encode_png(const Slice& slice, double lo, double hi) {
  if (slice.values.size() != slice.width * slice.height) throw std::invalid_argument("slice payload mismatch");
  const double range = hi > lo ? hi - lo : 1.0;
  std::string raw;
  raw.reserve(slice.height * (slice.width + 1));
  for (std::size_t r = 0; r < slice.height; ++r) {
    raw.push_back('\0');  // filter type none
    for (std::size_t c = 0; c < slice.width; ++c) {
      const double v = (slice.values[r * slice.width + c] - lo) / range;
      raw.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) {
    throw std::runtime_error("zlib compression failed");
  }
  packed.resize(packed_size);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string header;
  put_u32(header, static_cast<std::uint32_t>(slice.width));
  put_u32(header, static_cast<std::uint32_t>(slice.height));
  header += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, no interlace
  put_chunk(png, "IHDR", header);
  put_chunk(png, "IDAT", packed);
  put_chunk(png, "IEND", {});
  return png;
}

namespace {

using nlohmann::json;

struct HttpError {
  int status;
  std::string message;
};

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

std::size_t parse_count(const httplib::Request& req, const std::string& key) {
  if (!req.has_param(key)) throw HttpError{400, "missing query parameter '" + key + "'"};
  const std::string text = req.get_param_value(key);
  if (text.empty() || text.size() > 18 || !std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw HttpError{400, "query parameter '" + key + "' must be a nonnegative integer"};
  }
  return std::stoull(text);
}

SliceAxis parse_axis(const httplib::Request& req) {
  const std::string text = req.has_param("axis") ? req.get_param_value("axis") : "";
  if (text == "x") return SliceAxis::x;
  if (text == "y") return SliceAxis::y;
  if (text == "z") return SliceAxis::z;
  throw HttpError{400, "axis must be x, y or z"};
}

Slice cut(const Dims& dims, SliceAxis axis, std::size_t index, auto&& value_at) {
  std::vector<std::size_t> voxels;
  try {
    voxels = slice_voxels(dims, axis, index);
  } catch (const std::out_of_range& e) {
    throw HttpError{400, e.what()};
  }
  Slice s;
  s.width = axis == SliceAxis::x ? dims.ny : dims.nx;
  s.height = axis == SliceAxis::z ? dims.ny : dims.nz;
  s.values.reserve(voxels.size());
  for (const auto i : voxels) s.values.push_back(value_at(i));
  return s;
}

void send_slice(const httplib::Request& req, httplib::Response& res, SliceAxis axis, std::size_t index,
                const Slice& slice, double lo, double hi) {
  const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
  if (format == "png") {
    res.set_content(encode_png(slice, lo, hi), "image/png");
    return;
  }
  if (format != "json") throw HttpError{400, "format must be json or png"};
  const char* names[] = {"x", "y", "z"};
  send_json(res, {{"axis", names[static_cast<int>(axis)]},
                  {"index", index},
                  {"width", slice.width},
                  {"height", slice.height},
                  {"values", slice.values}});
}

bool is_index(const json& v) { return v.is_number_integer(); }

SeedMap parse_seeds(const std::string& body, std::size_t num_voxels, std::size_t num_labels) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    throw HttpError{400, std::string("malformed JSON: ") + e.what()};
  }
  if (!doc.is_object() || !doc.contains("seeds") || !doc["seeds"].is_array()) {
    throw HttpError{400, "expected {\"num_labels\": S, \"seeds\": [{\"index\": i, \"label\": l}, ...]}"};
  }
  if (doc.contains("num_labels")) {
    if (!is_index(doc["num_labels"])) throw HttpError{400, "num_labels must be an integer"};
    if (doc["num_labels"].get<long long>() != static_cast<long long>(num_labels)) {
      throw HttpError{422, "num_labels must be " + std::to_string(num_labels)};
    }
  }
  SeedMap seeds(num_labels);
  for (const auto& e : doc["seeds"]) {
    if (!e.is_object() || !e.contains("index") || !e.contains("label") || !is_index(e["index"]) ||
        !is_index(e["label"])) {
      throw HttpError{400, "every seed needs integer 'index' and 'label'"};
    }
    const long long index = e["index"].get<long long>();
    const long long label = e["label"].get<long long>();
    if (index < 0 || static_cast<unsigned long long>(index) >= num_voxels) {
      throw HttpError{422, "seed index " + std::to_string(index) + " outside [0, " + std::to_string(num_voxels) + ")"};
    }
    if (label < 0 || static_cast<unsigned long long>(label) >= num_labels) {
      throw HttpError{422, "seed label " + std::to_string(label) + " outside [0, " + std::to_string(num_labels) + ")"};
    }
    try {
      seeds.add(static_cast<std::size_t>(index), static_cast<std::size_t>(label));
    } catch (const std::invalid_argument& ex) {
      throw HttpError{422, ex.what()};
    }
  }
  return seeds;
}

template <class Handler>
httplib::Server::Handler guarded(Handler handler) {
  return [handler](const httplib::Request& req, httplib::Response& res) {
    try {
      handler(req, res);
    } catch (const HttpError& e) {
      send_json(res, {{"error", e.message}}, e.status);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

}  // namespace

SegmentationService::SegmentationService(Volume volume, std::size_t num_labels, SolveOptions solve)
    : volume_(std::move(volume)), num_labels_(num_labels), solve_options_(solve), seeds_(num_labels) {
  if (num_labels_ < 2) throw std::invalid_argument("need at least two labels");
  bank_ = std::make_shared<LaplacianBank>(build_default_bank(normalize_intensities(volume_)));
  weights_.laplacian_weights.assign(bank_->size(), 1.0);
  const auto [lo, hi] = std::minmax_element(volume_.data().begin(), volume_.data().end());
  lo_ = *lo;
  hi_ = *hi;
}

SeedMap SegmentationService::seeds() const {
  std::shared_lock lock(session_);
  return seeds_;
}

std::optional<SoftSegmentation> SegmentationService::segmentation() const {
  std::shared_lock lock(session_);
  return segmentation_;
}

void SegmentationService::attach(httplib::Server& server) {
  server.Get("/api/volume/meta", guarded([this](const httplib::Request&, httplib::Response& res) {
    const Dims& d = volume_.dims();
    const Spacing& sp = volume_.spacing();
    std::shared_lock lock(session_);
    send_json(res, {{"dims", {d.nx, d.ny, d.nz}},
                    {"spacing", {sp.sx, sp.sy, sp.sz}},
                    {"num_labels", num_labels_},
                    {"range", {lo_, hi_}},
                    {"num_seeds", seeds_.size()},
                    {"has_segmentation", segmentation_.has_value()}});
  }));

  server.Get("/api/volume/slice", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const SliceAxis axis = parse_axis(req);
    const std::size_t index = parse_count(req, "index");
    const Slice s = cut(volume_.dims(), axis, index, [this](std::size_t i) { return volume_[i]; });
    send_slice(req, res, axis, index, s, lo_, hi_);
  }));

  server.Get("/api/seeds", guarded([this](const httplib::Request&, httplib::Response& res) {
    send_json(res, to_json(seeds()));
  }));

  server.Post("/api/seeds", guarded([this](const httplib::Request& req, httplib::Response& res) {
    SeedMap parsed = parse_seeds(req.body, volume_.size(), num_labels_);
    const std::size_t count = parsed.size();
    {
      std::unique_lock lock(session_);
      seeds_ = std::move(parsed);
    }
    send_json(res, {{"count", count}});
  }));

  server.Post("/api/segment", guarded([this](const httplib::Request& req, httplib::Response& res) {
    std::unique_lock solving(solving_, std::try_to_lock);
    if (!solving.owns_lock()) throw HttpError{409, "a segmentation is already running"};

    RWProblem problem;
    {
      std::shared_lock lock(session_);
      problem = RWProblem{bank_, weights_, {}, seeds_, num_labels_};
    }
    if (!req.body.empty()) {
      json doc;
      try {
        doc = json::parse(req.body);
      } catch (const json::parse_error& e) {
        throw HttpError{400, std::string("malformed JSON: ") + e.what()};
      }
      if (!doc.is_null() && !(doc.is_object() && doc.empty())) {
        try {
          problem.weights = WeightVector{doc.at("laplacian_weights").get<std::vector<double>>(),
                                         doc.value("prior_weights", std::vector<double>{})};
        } catch (const json::exception& e) {
          throw HttpError{400, std::string("malformed weights: ") + e.what()};
        }
      }
    }
    if (problem.seeds.empty()) throw HttpError{422, "no seeds; POST /api/seeds first"};
    try {
      problem.validate();
    } catch (const std::invalid_argument& e) {
      throw HttpError{422, e.what()};
    }

    const auto start = std::chrono::steady_clock::now();
    SolveReport report = [&] {
      try {
        return solve(problem, solve_options_);
      } catch (const SolverError& e) {
        throw HttpError{422, e.what()};
      }
    }();
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    {
      std::unique_lock lock(session_);
      weights_ = problem.weights;
      segmentation_ = std::move(report.segmentation);
    }
    send_json(res, {{"iterations", report.iterations},
                    {"max_relative_residual", report.max_relative_residual},
                    {"seconds", seconds}});
  }));

  server.Get("/api/prob/slice", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::size_t label = parse_count(req, "label");
    if (label >= num_labels_) throw HttpError{400, "label out of range"};
    const SliceAxis axis = parse_axis(req);
    const std::size_t index = parse_count(req, "index");
    std::shared_lock lock(session_);
    if (!segmentation_) throw HttpError{404, "no segmentation yet"};
    const Slice s = cut(volume_.dims(), axis, index, [&](std::size_t i) { return segmentation_->at(i, label); });
    lock.unlock();
    send_slice(req, res, axis, index, s, 0.0, 1.0);
  }));
}

}  // namespace rwseg
