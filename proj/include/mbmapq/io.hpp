#pragma once

#include <string>
#include <vector>

namespace mbmapq {

// shortest round-trip decimal form used for every numeric output
std::string g17(double x);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// Minimal streaming JSON emitter. All artifact JSON goes through this so the
// byte layout (key order, float format, LF endings) is fully deterministic.
class JsonWriter {
 public:
  JsonWriter& begin_object();
  JsonWriter& end_object();
  JsonWriter& begin_array();
  JsonWriter& end_array();
  JsonWriter& key(const std::string& k);
  JsonWriter& value(double v);
  JsonWriter& value(int v);
  JsonWriter& value(long long v);
  JsonWriter& value(unsigned long long v);
  JsonWriter& value(bool v);
  JsonWriter& value(const char* v);
  JsonWriter& value(const std::string& v);

  JsonWriter& kv(const std::string& k, double v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, int v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, long long v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, unsigned long long v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, bool v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, const std::string& v) { return key(k).value(v); }
  JsonWriter& kv(const std::string& k, const char* v) { return key(k).value(v); }

  template <typename T>
  JsonWriter& kv_array(const std::string& k, const std::vector<T>& xs) {
    key(k).begin_array();
    for (const T& x : xs) value(x);
    return end_array();
  }

  const std::string& str() const { return buf_; }
  void write(const std::string& path) const;

 private:
  void comma_slot();
  std::string buf_;
  std::vector<char> pending_;  // per nesting level: needs a comma before next item
  bool after_key_ = false;
};

}  // namespace mbmapq
