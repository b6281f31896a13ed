#pragma once

// Fine-to-coarse visual encoder: superpixels, superpixel tokens, and
// progressive soft grouping with a CLS token carried through every stage.

#include <cstdint>
#include <utility>
#include <vector>

#include "caft/config.hpp"
#include "caft/image_io.hpp"
#include "caft/nn.hpp"
#include "caft/tensor.hpp"

namespace caft {

struct SuperpixelMap {
  std::size_t height = 0, width = 0, count = 0;
  std::vector<std::uint32_t> labels;  // row-major, values in [0, count)

  bool operator==(const SuperpixelMap&) const = default;
};

/// Factor pair (rows, cols) of `count` whose cell aspect best matches the image.
std::pair<std::size_t, std::size_t> grid_factors(std::size_t count, std::size_t height, std::size_t width);

/// k-means over (r, g, b, lambda*x, lambda*y) from a uniform grid, then
/// connectivity repair. Labels are numbered in raster order of first appearance.
SuperpixelMap superpixelize(const ImageGrid& image, std::size_t count, std::size_t iterations,
                            double position_weight = 0.5);

/// Regular rows x cols patch partition.
SuperpixelMap grid_map(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols);

inline constexpr std::size_t kPixelFeatures = 27;

/// Colors of the clamped 3x3 neighbourhood of every pixel: [h*w, 27].
std::vector<double> pixel_features(const ImageGrid& image);

/// Image reduced to what the encoder consumes.
struct PreparedImage {
  SuperpixelMap map;
  std::vector<double> features;   // [count, 27] mean pixel features per region
  std::vector<double> centroids;  // [count, 2] normalized (x, y) in (0, 1)
};

PreparedImage prepare_with_map(const ImageGrid& image, SuperpixelMap map);
/// Superpixels for the hierarchical variants, a patch grid for plain-vit.
PreparedImage prepare_image(const ImageGrid& image, const ModelConfig& cfg, Variant variant);

/// Deterministic farthest-point sampling under cosine distance, starting at row 0.
std::vector<std::size_t> farthest_point_sample(const double* x, std::size_t rows, std::size_t cols, std::size_t k);

struct GroupResult {
  Tensor tokens;      // [B, K, C]
  Tensor assignment;  // [B, M, K], rows sum to 1
  Tensor cls;         // [B, 1, C]
};

struct SegmentHierarchy {
  std::vector<Tensor> stage_tokens;  // [B, M_s, C] after each stage's blocks
  std::vector<Tensor> assignments;   // [B, M_s, M_{s+1}]
  Tensor cls;                        // [B, C] final CLS (before projection)
  Tensor v_fine;                     // [B, M_fine, D] tokens used for part-level alignment
  Tensor v_coarse;                   // [B, D]
  /// Row-stochastic maps to compose from superpixels to the v_fine tokens.
  std::vector<Tensor> fine_path;
};

/// Soft map from every pixel of image `b` to the v_fine tokens: [h*w, M_fine].
std::vector<double> pixel_to_fine(const SegmentHierarchy& h, std::size_t b, const SuperpixelMap& map);

class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  /// [B, S, C]: projected region features plus the centroid embedding.
  Tensor superpixel_tokens(const std::vector<const PreparedImage*>& images) const;
  /// Groups tokens [B, M, C] into `target` tokens, then runs the stage's merge block with CLS.
  GroupResult group_stage(const Tensor& tokens, const Tensor& cls, std::size_t target, std::size_t stage) const;
  SegmentHierarchy encode(const std::vector<const PreparedImage*>& images, Variant variant) const;

  const Tensor& log_temperature(std::size_t stage) const { return log_temp_.at(stage); }

 private:
  ModelConfig cfg_;
  Linear feat_proj_, pos_proj_, proj_fine_, proj_coarse_;
  Tensor cls_;
  std::vector<std::vector<TransformerBlock>> stage_blocks_;  // schedule.size() + 1 stages
  std::vector<TransformerBlock> merge_blocks_;
  std::vector<Tensor> log_temp_;
  LayerNormParams ln_fine_, ln_final_;
};

}  // namespace caft
