#include "cropdoc/keyvalue.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

#include "cropdoc/errors.hpp"

namespace cropdoc {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) throw ArgumentError("format_double: conversion failed");
  return std::string(buf, ptr);
}

KeyValues KeyValues::parse(std::istream& in, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError(source + ":" + std::to_string(line_no) + ": empty key");
    if (kv.find(key)) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    kv.entries_.emplace_back(key, value);
    kv.lines_.push_back(line_no);
  }
  return kv;
}

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  return parse(in, source);
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return parse(in, path.string());
}

std::optional<KeyValues::Located> KeyValues::find(const std::string& key) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == key) return Located{i, i < lines_.size() ? lines_[i] : 0};
  }
  return std::nullopt;
}

void KeyValues::fail(const std::string& key, const std::string& message) const {
  const auto loc = find(key);
  std::string where = source_;
  if (loc && loc->line) where += ":" + std::to_string(loc->line);
  throw FormatError(where + ": " + key + ": " + message);
}

bool KeyValues::has(const std::string& key) const { return find(key).has_value(); }

std::optional<std::string> KeyValues::get(const std::string& key) const {
  const auto loc = find(key);
  if (!loc) return std::nullopt;
  used_.insert(key);
  return entries_[loc->index].second;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  double out = 0.0;
  const char* end = v->data() + v->size();
  auto [ptr, ec] = std::from_chars(v->data(), end, out);
  if (ec != std::errc{} || ptr != end || !std::isfinite(out)) fail(key, "expected a real number, got '" + *v + "'");
  return out;
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  const char* end = v->data() + v->size();
  auto [ptr, ec] = std::from_chars(v->data(), end, out);
  if (ec != std::errc{} || ptr != end) fail(key, "expected a non-negative integer, got '" + *v + "'");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  fail(key, "expected a boolean, got '" + *v + "'");
}

std::optional<std::vector<double>> KeyValues::get_list(const std::string& key) const {
  const auto v = get(key);
  if (!v) return std::nullopt;
  std::vector<double> out;
  std::istringstream in(*v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    double x = 0.0;
    const char* end = item.data() + item.size();
    auto [ptr, ec] = std::from_chars(item.data(), end, x);
    if (item.empty() || ec != std::errc{} || ptr != end) fail(key, "bad list element '" + item + "'");
    out.push_back(x);
  }
  return out;
}

void KeyValues::set(const std::string& key, const std::string& value) {
  if (const auto loc = find(key)) {
    entries_[loc->index].second = value;
    return;
  }
  entries_.emplace_back(key, value);
  lines_.push_back(0);
}

void KeyValues::set(const std::string& key, double value) { set(key, format_double(value)); }

void KeyValues::set(const std::string& key, std::size_t value) { set(key, std::to_string(value)); }

std::vector<std::string> KeyValues::unused() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) {
    if (!used_.count(k)) out.push_back(k);
  }
  return out;
}

std::string KeyValues::dump() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

}  // namespace cropdoc
