#pragma once

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kpbev/boxes.hpp"
#include "kpbev/encoders.hpp"
#include "kpbev/geom.hpp"

namespace kpbev {

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian");

// ---------------------------------------------------------------------------
// number formatting / parsing
// ---------------------------------------------------------------------------

/// Shortest decimal representation that round-trips.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("failed to parse number '" + std::string(s) + "' in " + context);
  }
  return v;
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// point cloud CSV: header "x,y,vr,rcs,dt"
// ---------------------------------------------------------------------------

inline constexpr std::string_view kPointCloudHeader = "x,y,vr,rcs,dt";

inline PointCloud<double> load_point_cloud_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open point cloud file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::strip_cr(line) != kPointCloudHeader) {
    throw IoError("point cloud file " + path.string() + " must start with header '" +
                  std::string(kPointCloudHeader) + "'");
  }
  std::vector<Vec2> positions;
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 5) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": expected 5 columns, got " + std::to_string(fields.size()));
    }
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    double row[5];
    for (int i = 0; i < 5; ++i) row[i] = parse_double(fields[i], ctx);
    positions.push_back({row[0], row[1]});
    values.insert(values.end(), row, row + 5);
  }
  PointCloud<double> pc;
  pc.features = Tensor<double>({positions.size(), 5}, std::move(values));
  pc.positions = std::move(positions);
  pc.validate();
  return pc;
}

template <typename T>
void save_point_cloud_csv(const std::filesystem::path& path, const PointCloud<T>& pc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write point cloud file: " + path.string());
  out << kPointCloudHeader << "\n";
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (std::size_t f = 0; f < 5; ++f) {
      if (f) out << ",";
      out << format_double(static_cast<double>(pc.features(i, f)));
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// detection / ground-truth CSV: header "frame,cx,cy,w,l,yaw,score,class"
// (score left empty for ground truth)
// ---------------------------------------------------------------------------

inline constexpr std::string_view kBoxHeader = "frame,cx,cy,w,l,yaw,score,class";

inline std::vector<OrientedBox> load_boxes_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open box file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::strip_cr(line) != kBoxHeader) {
    throw IoError("box file " + path.string() + " must start with header '" +
                  std::string(kBoxHeader) + "'");
  }
  std::vector<OrientedBox> boxes;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 8) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": expected 8 columns, got " + std::to_string(fields.size()));
    }
    const std::string ctx = path.string() + ":" + std::to_string(line_no);
    OrientedBox b;
    b.frame = static_cast<int>(parse_double(fields[0], ctx));
    b.cx = parse_double(fields[1], ctx);
    b.cy = parse_double(fields[2], ctx);
    b.width = parse_double(fields[3], ctx);
    b.length = parse_double(fields[4], ctx);
    b.yaw = parse_double(fields[5], ctx);
    if (!fields[6].empty()) b.score = parse_double(fields[6], ctx);
    b.label = std::string(fields[7]);
    boxes.push_back(std::move(b));
  }
  return boxes;
}

inline void save_boxes_csv(const std::filesystem::path& path,
                           const std::vector<OrientedBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write box file: " + path.string());
  out << kBoxHeader << "\n";
  for (const OrientedBox& b : boxes) {
    out << b.frame << "," << format_double(b.cx) << "," << format_double(b.cy) << ","
        << format_double(b.width) << "," << format_double(b.length) << ","
        << format_double(b.yaw) << ",";
    if (b.score) out << format_double(*b.score);
    out << "," << b.label << "\n";
  }
}

// ---------------------------------------------------------------------------
// FMAP: binary feature-map container
//
//   magic "FMAP" | u16 version=1 | u32 W | u32 H | u32 C
//   | f64 cell_size | f64 origin_x | f64 origin_y
//   | W*H*C little-endian f32, row-major in (iy, ix, c)
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kFmapVersion = 1;

template <typename T>
void write_fmap(const std::filesystem::path& path, const FeatureMap<T>& map) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write feature map file: " + path.string());
  const auto put = [&out](const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  };
  put("FMAP", 4);
  const std::uint16_t version = kFmapVersion;
  put(&version, 2);
  const std::uint32_t w = static_cast<std::uint32_t>(map.grid.width);
  const std::uint32_t h = static_cast<std::uint32_t>(map.grid.height);
  const std::uint32_t c = static_cast<std::uint32_t>(map.channels());
  put(&w, 4);
  put(&h, 4);
  put(&c, 4);
  put(&map.grid.cell_size, 8);
  put(&map.grid.x_min, 8);
  put(&map.grid.y_min, 8);
  // tensor layout {H, W, C} is already (iy, ix, c) row-major
  if constexpr (std::is_same_v<T, float>) {
    put(map.data.data(), map.data.size() * 4);
  } else {
    std::vector<float> buf(map.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(map.data[i]);
    put(buf.data(), buf.size() * 4);
  }
  if (!out) throw IoError("short write on feature map file: " + path.string());
}

inline FeatureMap<float> read_fmap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature map file: " + path.string());
  const auto get = [&in, &path](void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) {
      throw IoError("truncated feature map file: " + path.string());
    }
  };
  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, "FMAP", 4) != 0) {
    throw IoError("not a feature map file: " + path.string());
  }
  std::uint16_t version = 0;
  get(&version, 2);
  if (version != kFmapVersion) {
    throw IoError("unsupported feature map version " + std::to_string(version));
  }
  std::uint32_t w = 0, h = 0, c = 0;
  get(&w, 4);
  get(&h, 4);
  get(&c, 4);
  double cell_size = 0, origin_x = 0, origin_y = 0;
  get(&cell_size, 8);
  get(&origin_x, 8);
  get(&origin_y, 8);
  FeatureMap<float> map;
  map.grid = GridSpec::create(origin_x, origin_y, origin_x + w * cell_size,
                              origin_y + h * cell_size, cell_size);
  map.data = Tensor<float>({h, w, c});
  get(map.data.data(), map.data.size() * 4);
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0) {
    throw IoError("trailing bytes in feature map file: " + path.string());
  }
  return map;
}

}  // namespace kpbev
