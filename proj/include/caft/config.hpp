#pragma once

// Run configuration: model shape, optimizer, and variant settings.
//
// Values resolve as defaults <- preset <- config file <- command-line flags.
// Every setting has a flat `key = value` spelling; unknown keys are rejected.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace caft {

enum class Variant : std::uint8_t { caft, flat_loss, no_part, plain_vit, flat_text };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  std::size_t dim = 64;           // joint embedding width D (text and vision)
  std::size_t sub_layers = 4;     // L1
  std::size_t whole_layers = 2;   // L2
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t context_sub = 32;   // sub-caption context length
  std::size_t chunks = 4;         // N
  std::size_t sub_captions = 8;   // K
  std::size_t vocab_size = 0;     // filled from the vocabulary

  std::size_t image_size = 32;
  std::size_t superpixels = 64;
  std::vector<std::size_t> schedule{16, 8, 4};
  std::size_t stage_blocks = 2;
  std::size_t kmeans_iters = 10;
  double position_weight = 0.5;
  double group_temperature = 0.07;

  std::size_t pool_heads = 4;
  double init_temperature = 0.07;  // logit scale starts at 1 / init_temperature
  double init_bias = -10.0;
  double adapter_gate = 0.2;

  /// Canonical text of every shape-determining field.
  std::string canonical() const;
  std::uint64_t digest() const;
};

struct TrainConfig {
  std::string preset = "desk";
  Variant variant = Variant::caft;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  std::size_t warmup_steps = 100;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  double train_fraction = 8.0 / 9.0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  static RunConfig preset(const std::string& name);

  /// Applies one `key = value` setting; throws std::invalid_argument on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Parses a flat `key = value` file ('#' starts a comment).
  void apply_file(const std::string& path);
  void apply_text(const std::string& text);

  /// Fully resolved settings in a stable order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
};

std::string format_double(double v);

}  // namespace caft
