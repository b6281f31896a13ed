#pragma once

// AdamW with warmup + cosine decay, the training loop, checkpoints, and the
// per-step metrics log.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "caft/config.hpp"
#include "caft/model.hpp"
#include "caft/rng.hpp"
#include "caft/synthdata.hpp"

namespace caft {

/// Checkpoint written for a different model shape or format version.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable, truncated, or corrupt checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total_steps);

struct AdamMoments {
  std::vector<std::vector<double>> m, v;

  static AdamMoments zeros_like(const ParamStore& store);
};

/// One decoupled-weight-decay Adam update at 1-based step `t`.
void adamw_step(ParamStore& store, const std::vector<std::vector<double>>& grads, AdamMoments& moments, double lr,
                std::size_t t, const TrainConfig& cfg);

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

struct TrainState {
  RunConfig config;
  std::unique_ptr<CaftModel> model;
  AdamMoments moments;
  std::uint64_t step = 0;
  Rng rng;  // batch assembly stream

  static TrainState fresh(const RunConfig& config);
};

struct MetricsRow {
  std::uint64_t step = 0;
  double lr = 0, part_loss = 0, whole_loss = 0, total = 0, tau_p = 0, tau_w = 0;
};

std::string metrics_header();
std::string format_metrics(const MetricsRow& row);

/// Training samples with their cached encoder inputs.
struct TrainData {
  std::vector<const AnnotatedSample*> samples;
  std::vector<PreparedImage> prepared;
  Vocabulary vocab;

  static TrainData build(const std::vector<AnnotatedSample>& corpus, const std::vector<std::size_t>& indices,
                         const ModelConfig& cfg, Variant variant, const Vocabulary& vocab);
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch);
std::size_t total_steps(std::size_t samples, const TrainConfig& cfg);

/// Sample order for a 0-based epoch.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

/// Runs optimizer steps until `until_step` (capped at the schedule length).
/// NumericError is rethrown with the offending step prefixed.
void train(TrainState& state, const TrainData& data, std::uint64_t until_step,
           const std::function<void(const MetricsRow&)>& on_step = {});

std::string encode_checkpoint(const TrainState& state);
/// `expected`, when given, must describe the same model shape.
TrainState decode_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr);
void checkpoint_save(const TrainState& state, const std::string& path);
TrainState checkpoint_load(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace caft
