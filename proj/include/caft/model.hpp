#pragma once

// The full model: text encoder, vision encoder, and alignment head sharing
// one parameter store, plus the training-time loss wiring per variant.

#include <memory>
#include <string>
#include <vector>

#include "caft/alignment.hpp"
#include "caft/config.hpp"
#include "caft/nn.hpp"
#include "caft/text.hpp"
#include "caft/vision.hpp"

namespace caft {

class CaftModel {
 public:
  /// Parameters drawn from the "init" stream of `seed`.
  CaftModel(const ModelConfig& cfg, std::uint64_t seed);
  CaftModel(const CaftModel&) = delete;
  CaftModel& operator=(const CaftModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const TextEncoder& text() const { return text_; }
  const VisionEncoder& vision() const { return vision_; }
  const AlignmentHead& head() const { return head_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  TextEncoder text_;
  VisionEncoder vision_;
  AlignmentHead head_;
};

struct LossParts {
  Tensor part, whole, total;
};

/// Training losses for one assembled batch. `whole_tokens` (one sequence per
/// image) is only read by the flat-text variant.
LossParts compute_losses(const CaftModel& model, const std::vector<const PreparedImage*>& images,
                         const BatchAssembly& batch, Variant variant,
                         const std::vector<std::vector<std::size_t>>& whole_tokens = {});

/// Joined long caption, tokenized into one truncated sub-caption context.
std::vector<std::size_t> flat_caption_tokens(const std::vector<std::string>& sentences, const Vocabulary& vocab,
                                             std::size_t context);

}  // namespace caft
