#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cropdoc {

/// Flat `key=value` text: one entry per line, `#` starts a comment, blank
/// lines ignored. Parse and conversion errors carry the source line number.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::istream& in, const std::string& source = "<input>");
  static KeyValues parse(const std::string& text, const std::string& source = "<input>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Comma-separated reals.
  std::optional<std::vector<double>> get_list(const std::string& key) const;

  // Later sets of an existing key overwrite in place.
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::size_t value);

  // Keys never read through a getter.
  std::vector<std::string> unused() const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string dump() const;

 private:
  struct Located {
    std::size_t index;
    std::size_t line;
  };
  std::optional<Located> find(const std::string& key) const;
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

  std::string source_ = "<input>";
  std::vector<std::pair<std::string, std::string>> entries_;
  std::vector<std::size_t> lines_;
  mutable std::set<std::string> used_;
};

/// Shortest decimal text that round-trips the double exactly.
std::string format_double(double value);

}  // namespace cropdoc
