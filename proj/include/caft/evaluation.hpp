#pragma once

// Retrieval recall, the alpha sweep over combined scores, and zero-shot
// grounding (attention -> pixel heatmap -> Otsu mask -> IoU).

#include <cstdint>
#include <string>
#include <vector>

#include "caft/image_io.hpp"
#include "caft/model.hpp"
#include "caft/synthdata.hpp"

namespace caft {

/// Index of the row maximum; ties go to the lowest index.
std::size_t argmax_lowest(const double* row, std::size_t n);

/// scores: [Q, G] row-major.
double recall_at_1(const std::vector<double>& scores, std::size_t queries, std::size_t candidates,
                   const std::vector<std::size_t>& truth);

struct OtsuResult {
  std::vector<std::uint8_t> mask;  // 1 = foreground
  int threshold = -1;              // histogram bin; mask = bin > threshold
  bool degenerate = false;
};

/// 256-bin Otsu over min-max normalized values, exact integer arithmetic.
OtsuResult otsu_threshold(const std::vector<double>& heatmap);
/// Bin of every value under the min-max normalization used by otsu_threshold.
std::vector<int> otsu_bins(const std::vector<double>& heatmap);

double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);
double miou(const std::vector<std::vector<std::uint8_t>>& preds, const std::vector<std::vector<std::uint8_t>>& truths);

/// Segment weights pushed to pixels through `pixel_map` ([pixels, M]), normalized to sum 1.
std::vector<double> project_heatmap(const std::vector<double>& pixel_map, const std::vector<double>& weights);

struct RetrievalResult {
  double alpha = 0.0;
  double i2t_r1 = 0.0, t2i_r1 = 0.0;
};

struct GroundingRow {
  std::string query_id;
  double iou = 0.0;
  double mass_in_mask = 0.0;
};

struct EvalReport {
  std::vector<RetrievalResult> sweep;
  RetrievalResult whole_only;
  std::vector<GroundingRow> grounding;  // sorted by query_id
  double miou = 0.0;
  double mean_mass_in_mask = 0.0;
};

struct EvalOptions {
  std::vector<double> alphas{0.0, 0.3, 0.7, 1.0};
  bool grounding = true;
  std::size_t image_chunk = 32;
};

/// Whole and part score matrices, [images, captions] each.
struct ScoreMatrices {
  std::size_t images = 0, captions = 0;
  std::vector<double> whole, part;
};

/// Samples are ordered by id internally, so input order does not matter.
ScoreMatrices score_corpus(const CaftModel& model, Variant variant, const std::vector<const AnnotatedSample*>& samples,
                           const std::vector<const PreparedImage*>& prepared, const Vocabulary& vocab,
                           std::size_t image_chunk = 32);

EvalReport evaluate(const CaftModel& model, Variant variant, std::vector<const AnnotatedSample*> samples,
                    const Vocabulary& vocab, const EvalOptions& options, std::size_t corpus_size);

/// Heatmap of one query over one prepared image.
struct GroundingMap {
  std::vector<double> heatmap;   // sums to 1
  std::vector<double> segment_weights;
  OtsuResult otsu;
};

GroundingMap ground_query(const CaftModel& model, Variant variant, const PreparedImage& image, const std::string& text,
                          const Vocabulary& vocab);

double mass_inside(const std::vector<double>& heatmap, const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> binary_mask(const GrayImage& image);
GrayImage heatmap_image(const std::vector<double>& heatmap, std::size_t height, std::size_t width);
GrayImage mask_image(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);

std::string format_report(const EvalReport& report);

}  // namespace caft
