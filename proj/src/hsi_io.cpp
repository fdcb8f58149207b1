#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "cropdoc/errors.hpp"
#include "cropdoc/hsi.hpp"

namespace cropdoc {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void dump(const std::filesystem::path& path, const std::string& header, const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

// Splits "<magic>\n<json>\n<payload>" and parses the JSON line.
json split_header(const std::string& bytes, const char* magic, const std::filesystem::path& path,
                  std::size_t& payload_offset) {
  const std::string expected = std::string(magic) + "\n";
  if (bytes.compare(0, expected.size(), expected) != 0) {
    throw FormatError(path.string() + ": bad magic, expected " + magic);
  }
  const auto nl = bytes.find('\n', expected.size());
  if (nl == std::string::npos) throw FormatError(path.string() + ": header truncated");
  json header;
  try {
    header = json::parse(bytes.substr(expected.size(), nl - expected.size()));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (!header.is_object() || header.value("version", 0) != kFormatVersion) {
    throw FormatError(path.string() + ": unsupported header version");
  }
  payload_offset = nl + 1;
  return header;
}

std::size_t positive_extent(const json& header, const char* key, const std::filesystem::path& path) {
  const auto it = header.find(key);
  if (it == header.end() || !it->is_number_unsigned() || it->get<std::size_t>() == 0) {
    throw FormatError(path.string() + ": header field '" + key + "' missing or not a positive integer");
  }
  return it->get<std::size_t>();
}

void check_payload(std::size_t have, std::size_t want, const std::filesystem::path& path) {
  if (have < want) {
    throw FormatError(path.string() + ": payload truncated (" + std::to_string(have) + " of " +
                      std::to_string(want) + " bytes)");
  }
  if (have > want) throw FormatError(path.string() + ": trailing bytes after payload");
}

}  // namespace

void write_cube(const HsiCube& cube, const std::filesystem::path& path) {
  json header = {{"version", kFormatVersion},
                 {"height", cube.height()},
                 {"width", cube.width()},
                 {"bands", cube.bands()},
                 {"wavelengths", std::vector<double>(cube.wavelengths().begin(), cube.wavelengths().end())}};
  std::string payload;
  payload.reserve(cube.reflectance().size() * 4);
  for (float v : cube.reflectance()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
  }
  dump(path, "HSIC\n" + header.dump() + "\n", payload);
}

HsiCube read_cube(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  std::size_t offset = 0;
  const json header = split_header(bytes, "HSIC", path, offset);
  const std::size_t height = positive_extent(header, "height", path);
  const std::size_t width = positive_extent(header, "width", path);
  const std::size_t bands = positive_extent(header, "bands", path);
  std::vector<double> wavelengths;
  try {
    wavelengths = header.at("wavelengths").get<std::vector<double>>();
  } catch (const json::exception&) {
    throw FormatError(path.string() + ": header field 'wavelengths' missing or malformed");
  }
  if (wavelengths.size() != bands) {
    throw FormatError(path.string() + ": header lists " + std::to_string(wavelengths.size()) +
                      " wavelengths for " + std::to_string(bands) + " bands");
  }
  const std::size_t count = height * width * bands;
  check_payload(bytes.size() - offset, count * 4, path);
  std::vector<float> values(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[4 * i + k]) << (8 * k);
    values[i] = std::bit_cast<float>(bits);
  }
  try {
    return HsiCube(height, width, std::move(wavelengths), std::move(values));
  } catch (const ArgumentError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_labels(const LabelMap& labels, const std::filesystem::path& path) {
  json header = {{"version", kFormatVersion}, {"height", labels.height()}, {"width", labels.width()}};
  std::string payload(labels.ids().begin(), labels.ids().end());
  dump(path, "HSIL\n" + header.dump() + "\n", payload);
}

LabelMap read_labels(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  std::size_t offset = 0;
  const json header = split_header(bytes, "HSIL", path, offset);
  const std::size_t height = positive_extent(header, "height", path);
  const std::size_t width = positive_extent(header, "width", path);
  check_payload(bytes.size() - offset, height * width, path);
  std::vector<std::uint8_t> ids(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return LabelMap(height, width, std::move(ids));
}

}  // namespace cropdoc
