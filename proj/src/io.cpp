#include "mbmapq/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mbmapq/errors.hpp"

namespace mbmapq {

std::string g17(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::BadInput, "cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorKind::BadInput, "short write on " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::BadInput, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void JsonWriter::comma_slot() {
  if (after_key_) {
    after_key_ = false;
    return;
  }
  if (!pending_.empty()) {
    if (pending_.back()) buf_ += ',';
    pending_.back() = 1;
  }
}

JsonWriter& JsonWriter::begin_object() {
  comma_slot();
  buf_ += '{';
  pending_.push_back(0);
  return *this;
}

JsonWriter& JsonWriter::end_object() {
  pending_.pop_back();
  buf_ += '}';
  return *this;
}

JsonWriter& JsonWriter::begin_array() {
  comma_slot();
  buf_ += '[';
  pending_.push_back(0);
  return *this;
}

JsonWriter& JsonWriter::end_array() {
  pending_.pop_back();
  buf_ += ']';
  return *this;
}

static void append_escaped(std::string& buf, const std::string& s) {
  buf += '"';
  for (char c : s) {
    switch (c) {
      case '"': buf += "\\\""; break;
      case '\\': buf += "\\\\"; break;
      case '\n': buf += "\\n"; break;
      case '\t': buf += "\\t"; break;
      case '\r': buf += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char tmp[8];
          std::snprintf(tmp, sizeof(tmp), "\\u%04x", c);
          buf += tmp;
        } else {
          buf += c;
        }
    }
  }
  buf += '"';
}

JsonWriter& JsonWriter::key(const std::string& k) {
  comma_slot();
  append_escaped(buf_, k);
  buf_ += ':';
  after_key_ = true;
  return *this;
}

JsonWriter& JsonWriter::value(double v) {
  comma_slot();
  if (std::isnan(v) || std::isinf(v)) {
    buf_ += '"';
    buf_ += g17(v);
    buf_ += '"';
  } else {
    buf_ += g17(v);
  }
  return *this;
}

JsonWriter& JsonWriter::value(int v) {
  comma_slot();
  buf_ += std::to_string(v);
  return *this;
}

JsonWriter& JsonWriter::value(long long v) {
  comma_slot();
  buf_ += std::to_string(v);
  return *this;
}

JsonWriter& JsonWriter::value(unsigned long long v) {
  comma_slot();
  buf_ += std::to_string(v);
  return *this;
}

JsonWriter& JsonWriter::value(bool v) {
  comma_slot();
  buf_ += v ? "true" : "false";
  return *this;
}

JsonWriter& JsonWriter::value(const char* v) { return value(std::string(v)); }

JsonWriter& JsonWriter::value(const std::string& v) {
  comma_slot();
  append_escaped(buf_, v);
  return *this;
}

void JsonWriter::write(const std::string& path) const {
  write_text_file(path, buf_ + "\n");
}

}  // namespace mbmapq
