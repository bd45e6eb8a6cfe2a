#include "pulmo/volume.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace pulmo {

using nlohmann::json;

std::string to_string(ValueKind k) {
  switch (k) {
    case ValueKind::hu_int16: return "hu_int16";
    case ValueKind::normalized_u8: return "normalized_u8";
  }
  throw DataError("unknown value kind");
}

ValueKind value_kind_from_string(const std::string& s) {
  if (s == "hu_int16") return ValueKind::hu_int16;
  if (s == "normalized_u8") return ValueKind::normalized_u8;
  throw DataError("volume header: unknown value_kind '" + s + "'");
}

namespace {

std::string raw_path_for(const std::string& json_path) {
  std::filesystem::path p(json_path);
  p.replace_extension(".raw");
  return p.string();
}

json read_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string(what) + ": cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

struct Header {
  Index3 dims;
  Vec3 spacing, origin;
  std::string kind;
};

Header parse_header(const std::string& path) {
  const json j = read_json_file(path, "volume header");
  Header h;
  try {
    const auto d = j.at("dims");
    const auto s = j.at("spacing_mm");
    const auto o = j.at("origin_mm");
    if (d.size() != 3 || s.size() != 3 || o.size() != 3)
      throw DataError("volume header: dims/spacing_mm/origin_mm must have 3 entries in " + path);
    for (int a = 0; a < 3; ++a) {
      h.dims[a] = d.at(a).get<int>();
      h.spacing[a] = s.at(a).get<double>();
      h.origin[a] = o.at(a).get<double>();
    }
    h.kind = j.at("value_kind").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("volume header: missing or mistyped field in " + path + ": " + e.what());
  }
  for (int a = 0; a < 3; ++a) {
    if (h.dims[a] <= 0) throw DataError("volume header: non-positive dims in " + path);
    if (!(h.spacing[a] > 0.0)) throw DataError("volume header: non-positive spacing in " + path);
  }
  return h;
}

std::vector<std::int16_t> read_payload(const std::string& raw, std::int64_t n, const std::string& header_path) {
  std::ifstream in(raw, std::ios::binary);
  if (!in) throw DataError("volume payload: cannot open " + raw + " (header " + header_path + ")");
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::int64_t>(in.tellg());
  if (bytes != n * 2)
    throw DataError("volume payload: " + raw + " holds " + std::to_string(bytes) + " bytes, header expects " +
                    std::to_string(n * 2));
  in.seekg(0);
  std::vector<std::int16_t> buf(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(buf.data()), n * 2);
  if (!in) throw DataError("volume payload: short read from " + raw);
  return buf;  // payload is little-endian on disk; all supported targets are little-endian
}

void write_pair(const json& header, const std::int16_t* data, std::int64_t n, const std::string& path) {
  {
    std::ofstream out(path);
    if (!out) throw DataError("save: cannot open " + path + " for writing");
    out << header.dump(2) << "\n";
    if (!out) throw DataError("save: write failed for " + path);
  }
  const std::string raw = raw_path_for(path);
  std::ofstream out(raw, std::ios::binary);
  if (!out) throw DataError("save: cannot open " + raw + " for writing");
  out.write(reinterpret_cast<const char*>(data), n * 2);
  if (!out) throw DataError("save: write failed for " + raw);
}

}  // namespace

Volume load_volume(const std::string& path) {
  const Header h = parse_header(path);
  Volume v;
  v.dims = h.dims;
  v.spacing_mm = h.spacing;
  v.origin_mm = h.origin;
  v.value_kind = value_kind_from_string(h.kind);
  v.data = read_payload(raw_path_for(path), v.size(), path);
  return v;
}

void save_volume(const Volume& v, const std::string& path) {
  if (v.size() == 0 || static_cast<std::int64_t>(v.data.size()) != v.size())
    throw DataError("save: volume data size does not match dims");
  json j;
  j["dims"] = v.dims;
  j["spacing_mm"] = v.spacing_mm;
  j["origin_mm"] = v.origin_mm;
  j["value_kind"] = to_string(v.value_kind);
  write_pair(j, v.data.data(), v.size(), path);
}

void save_mask(const Mask& m, const std::string& path) {
  std::vector<std::int16_t> buf(m.data.begin(), m.data.end());
  json j;
  j["dims"] = m.dims;
  j["spacing_mm"] = m.spacing_mm;
  j["origin_mm"] = Vec3{0.0, 0.0, 0.0};
  j["value_kind"] = "mask_u8";
  write_pair(j, buf.data(), static_cast<std::int64_t>(buf.size()), path);
}

Mask load_mask(const std::string& path) {
  const Header h = parse_header(path);
  if (h.kind != "mask_u8") throw DataError("load_mask: " + path + " is not a mask (value_kind " + h.kind + ")");
  const auto buf = read_payload(raw_path_for(path), voxel_count(h.dims), path);
  Mask m;
  m.dims = h.dims;
  m.spacing_mm = h.spacing;
  m.data.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) m.data[i] = buf[i] != 0;
  return m;
}

}  // namespace pulmo
