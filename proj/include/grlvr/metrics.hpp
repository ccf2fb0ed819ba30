#pragma once

#include <concepts>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace grlvr {

/// Flat JSON object builder with a fixed float format: 17 significant digits, null for
/// NaN/Inf. Field order is insertion order.
class JsonObject {
 public:
  JsonObject& field(std::string_view key, double v);
  JsonObject& field(std::string_view key, std::optional<double> v);
  JsonObject& field(std::string_view key, bool v);
  JsonObject& field(std::string_view key, std::string_view v);
  JsonObject& field(std::string_view key, const char* v) { return field(key, std::string_view(v)); }
  template <std::integral T>
    requires(!std::same_as<T, bool>)
  JsonObject& field(std::string_view key, T v) {
    return raw(key, std::to_string(v));
  }
  JsonObject& field(std::string_view key, const JsonObject& nested) {
    return raw(key, nested.str());
  }
  /// Inserts pre-serialized JSON text.
  JsonObject& raw(std::string_view key, std::string_view json);

  std::string str() const { return "{" + body_ + "}"; }

 private:
  void key(std::string_view k);
  std::string body_;
};

std::string format_real(double v);
std::string json_escape(std::string_view s);

/// Append-only JSONL sink; every line is flushed so partial runs stay readable.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  bool is_open() const { return file_ != nullptr; }
  void write(const JsonObject& obj);

 private:
  std::FILE* file_ = nullptr;
};

}  // namespace grlvr
