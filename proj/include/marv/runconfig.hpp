#pragma once

#include <map>
#include <string>

#include "marv/data.hpp"
#include "marv/model.hpp"
#include "marv/training.hpp"

namespace marv {

// Flat key=value run configuration with file < flag override precedence and
// a stable fingerprint over the canonicalized contents.
class RunConfig {
 public:
  static RunConfig defaults();

  void apply_file(const std::string& path);
  void set(const std::string& key, const std::string& value);  // unknown key throws

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  std::string canonical() const;   // sorted key=value lines
  std::string fingerprint() const; // 16 hex digits

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  ToyDatasetSpec dataset_spec() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace marv
