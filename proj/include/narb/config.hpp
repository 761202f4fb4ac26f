#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "narb/estimator.hpp"
#include "narb/simharness.hpp"

namespace narb {

//! Flat `key = value` configuration text. Lines starting with '#' (or the
//! remainder after an unquoted '#') are comments; keys may be dotted
//! (balance.k1 = 4). Every lookup marks its key consumed, so callers can
//! reject misspelled keys after building their structs.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::string& path);
  static ConfigMap parse_text(std::string_view text);

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  //! Keys present in the file but never looked up.
  std::vector<std::string> unconsumed() const;
  //! Throws std::invalid_argument naming every leftover key.
  void require_all_consumed(const std::string& context) const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

//! Builders mapping dotted config keys onto the library structs. Key
//! listings live in the README; unknown keys are the caller's concern via
//! require_all_consumed.
EstimatorConfig estimator_config_from(const ConfigMap& cfg);
SimConfig sim_config_from(const ConfigMap& cfg);

}  // namespace narb
