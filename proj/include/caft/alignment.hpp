#pragma once

// Batch construction, text-grounded attention pooling, the part- and
// whole-level sigmoid losses, and the combined inference score.

#include <cstdint>
#include <string>
#include <vector>

#include "caft/config.hpp"
#include "caft/nn.hpp"
#include "caft/rng.hpp"
#include "caft/tensor.hpp"
#include "caft/text.hpp"

namespace caft {

/// What assemble_batch needs from one training sample.
struct CaptionSource {
  std::vector<std::string> long_caption;                 // sentences
  std::vector<std::vector<std::string>> other_captions;  // each a sentence list
};

struct BatchAssembly {
  std::size_t batch = 0, k = 0, n = 0;
  /// [B*K] token sequences, row-major by image.
  std::vector<std::vector<std::size_t>> sub_tokens;
  std::vector<std::string> sub_text;
  /// 0 = the long caption, c + 1 = other caption c.
  std::vector<std::size_t> provenance;
  /// Validity of the whole-caption chunks, [B*N].
  std::vector<std::uint8_t> chunk_mask;
};

BatchAssembly assemble_batch(const std::vector<CaptionSource>& samples, std::size_t k, std::size_t n,
                             const Vocabulary& vocab, std::size_t context, Rng& rng);

struct PoolResult {
  Tensor v_tg;  // [B_img, Q, D]
  Tensor attn;  // [Q, B_img, M] head-averaged weights
};

class AlignmentHead {
 public:
  AlignmentHead() = default;
  AlignmentHead(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  /// Every query (rows of [Q, D]) against every image's fine tokens ([B, M, D]).
  PoolResult attn_pool(const Tensor& queries, const Tensor& v_fine) const;

  const Tensor& log_scale_part() const { return log_scale_p_; }
  const Tensor& bias_part() const { return bias_p_; }
  const Tensor& log_scale_whole() const { return log_scale_w_; }
  const Tensor& bias_whole() const { return bias_w_; }

 private:
  std::size_t dim_ = 0, heads_ = 0;
  Linear q_, k_, v_, o_;
  Tensor log_scale_p_, bias_p_, log_scale_w_, bias_w_;
};

/// -log sigmoid(y * (exp(log_scale) * cos + bias)) per entry of `cos`.
Tensor sigmoid_terms(const Tensor& cos, const std::vector<double>& y, const Tensor& log_scale, const Tensor& bias);

/// Cosine of every v_tg[i, q] with query q: [B, Q].
Tensor pooled_cosine(const Tensor& v_tg, const Tensor& queries);

/// owner[q]: image whose caption query q belongs to. Mean over B * Q terms.
Tensor part_loss(const Tensor& v_fine, const Tensor& t_sub, const std::vector<std::size_t>& owner,
                 const AlignmentHead& head);
Tensor whole_loss(const Tensor& v_coarse, const Tensor& t_whole, const AlignmentHead& head);
Tensor total_loss(const Tensor& part, const Tensor& whole);

struct SimilarityReport {
  std::size_t images = 0, captions = 0;
  double alpha = 0.0;
  std::vector<double> whole;  // [images, captions]
  std::vector<double> part;
  std::vector<double> combined;
};

/// Combines precomputed whole/part score matrices: (1 - alpha) * whole + alpha * part.
SimilarityReport combine_scores(std::vector<double> whole, std::vector<double> part, std::size_t images,
                                std::size_t captions, double alpha);

}  // namespace caft
