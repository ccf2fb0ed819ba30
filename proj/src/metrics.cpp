#include "grlvr/metrics.hpp"

#include <cmath>
#include <system_error>

#include <fmt/format.h>

namespace grlvr {

std::string format_real(double v) {
  if (!std::isfinite(v)) return "null";
  return fmt::format("{:.17g}", v);
}

std::string json_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size() + 2);
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20)
          out += fmt::format("\\u{:04x}", static_cast<int>(c));
        else
          out += c;
    }
  }
  out += '"';
  return out;
}

void JsonObject::key(std::string_view k) {
  if (!body_.empty()) body_ += ',';
  body_ += json_escape(k);
  body_ += ':';
}

JsonObject& JsonObject::raw(std::string_view k, std::string_view json) {
  key(k);
  body_ += json;
  return *this;
}

JsonObject& JsonObject::field(std::string_view k, double v) { return raw(k, format_real(v)); }

JsonObject& JsonObject::field(std::string_view k, std::optional<double> v) {
  return raw(k, v ? format_real(*v) : std::string("null"));
}

JsonObject& JsonObject::field(std::string_view k, bool v) { return raw(k, v ? "true" : "false"); }

JsonObject& JsonObject::field(std::string_view k, std::string_view v) {
  return raw(k, json_escape(v));
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) {
  file_ = std::fopen(path.string().c_str(), "wb");
  if (!file_)
    throw std::system_error(errno, std::generic_category(), "cannot open " + path.string());
}

MetricsWriter::~MetricsWriter() {
  if (file_) std::fclose(file_);
}

void MetricsWriter::write(const JsonObject& obj) {
  if (!file_) return;
  const std::string line = obj.str() + "\n";
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0)
    throw std::system_error(errno, std::generic_category(), "metrics write failed");
}

}  // namespace grlvr
