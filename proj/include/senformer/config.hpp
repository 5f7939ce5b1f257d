#pragma once

// Run configuration in a small TOML subset:
//
//   file    := { line }
//   line    := ws [ header | pair ] ws [ "#" comment ] newline
//   header  := "[" ( "model" | "train" | "data" ) "]"
//   pair    := key ws "=" ws value
//   value   := integer | float | "true" | "false" | '"' chars '"'
//
// Keys before the first header are top level (only `defaults_version`).
// Unknown sections or keys, duplicate keys, malformed values, bad enum names
// and out-of-range numbers are rejected with the offending line number.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "senformer/model.hpp"
#include "senformer/training.hpp"

namespace senf {

inline constexpr int kDefaultsVersion = 1;

struct DataConfig {
  std::string train_path;  // empty: generate synthetically
  std::string val_path;
  std::uint64_t synth_seed = 0;
  std::size_t train_count = 512;
  std::size_t val_count = 128;
  std::size_t size = 64;
};

struct RunConfig {
  ModelConfig model;  // model.seed mirrors train.seed
  TrainConfig train;
  DataConfig data;

  bool operator==(const RunConfig& other) const;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

RunConfig default_run_config();
RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>");
RunConfig parse_config(const std::filesystem::path& path);
// Effective configuration with every key spelled out; parses back to an equal
// RunConfig.
std::string echo_config(const RunConfig& config);

}  // namespace senf
