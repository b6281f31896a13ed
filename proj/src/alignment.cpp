#include "caft/alignment.hpp"

#include <cmath>
#include <stdexcept>

#include "caft/ops.hpp"

namespace caft {

BatchAssembly assemble_batch(const std::vector<CaptionSource>& samples, std::size_t k, std::size_t n,
                             const Vocabulary& vocab, std::size_t context, Rng& rng) {
  if (k < n) throw std::invalid_argument("assemble_batch: K must be >= N");
  if (samples.empty()) throw std::invalid_argument("assemble_batch: empty batch");
  BatchAssembly out;
  out.batch = samples.size();
  out.k = k;
  out.n = n;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = samples[b];
    if (s.long_caption.empty()) throw std::invalid_argument("assemble_batch: sample " + std::to_string(b) + " has no caption");
    const Chunking ch = chunk_random(s.long_caption.size(), n, rng);
    for (std::size_t c = 0; c < n; ++c) {
      out.sub_text.push_back(join_chunk(s.long_caption, ch.chunks[c]));
      out.provenance.push_back(0);
      out.chunk_mask.push_back(ch.mask[c]);
    }
    // Remaining K - N sub-captions: whole sentences of the other captions.
    std::vector<std::pair<std::size_t, const std::string*>> pool;
    for (std::size_t c = 0; c < s.other_captions.size(); ++c)
      for (const auto& sent : s.other_captions[c]) pool.emplace_back(c + 1, &sent);
    for (std::size_t e = n; e < k; ++e) {
      if (pool.empty()) {
        const std::size_t i = rng.below(s.long_caption.size());
        out.sub_text.push_back(s.long_caption[i]);
        out.provenance.push_back(0);
      } else {
        const auto& pick = pool[rng.below(pool.size())];
        out.sub_text.push_back(*pick.second);
        out.provenance.push_back(pick.first);
      }
    }
  }
  for (const auto& t : out.sub_text) out.sub_tokens.push_back(tokenize_chunk(t, vocab, context));
  return out;
}

AlignmentHead::AlignmentHead(ParamStore& store, const ModelConfig& cfg, Rng& rng)
    : dim_(cfg.dim), heads_(cfg.pool_heads) {
  if (heads_ == 0 || dim_ % heads_ != 0) throw std::invalid_argument("attention pooling: heads must divide the width");
  q_ = Linear::create(store, "align.pool.q", dim_, dim_, rng);
  k_ = Linear::create(store, "align.pool.k", dim_, dim_, rng, false);
  v_ = Linear::create(store, "align.pool.v", dim_, dim_, rng);
  o_ = Linear::create(store, "align.pool.o", dim_, dim_, rng);
  const double ls = std::log(1.0 / cfg.init_temperature);
  log_scale_p_ = store.add_constant("align.part.log_scale", {1}, ls);
  bias_p_ = store.add_constant("align.part.bias", {1}, cfg.init_bias);
  log_scale_w_ = store.add_constant("align.whole.log_scale", {1}, ls);
  bias_w_ = store.add_constant("align.whole.bias", {1}, cfg.init_bias);
}

PoolResult AlignmentHead::attn_pool(const Tensor& queries, const Tensor& v_fine) const {
  if (queries.rank() != 2 || queries.dim(1) != dim_ || v_fine.rank() != 3 || v_fine.dim(2) != dim_) {
    throw ShapeError("attn_pool: expected queries [Q, " + std::to_string(dim_) + "] and tokens [B, M, " +
                     std::to_string(dim_) + "], got " + shape_str(queries.shape()) + " and " +
                     shape_str(v_fine.shape()));
  }
  const std::size_t Q = queries.dim(0), B = v_fine.dim(0), M = v_fine.dim(1), H = heads_, dh = dim_ / heads_;
  const Tensor q = ops::transpose(ops::reshape(q_(queries), {Q, H, dh}), {1, 0, 2});                       // [H, Q, dh]
  const Tensor k = ops::transpose(ops::reshape(k_(v_fine), {B, M, H, dh}), {2, 3, 0, 1});                  // [H, dh, B, M]
  const Tensor v = ops::transpose(ops::reshape(v_(v_fine), {B, M, H, dh}), {2, 0, 1, 3});                  // [H, B, M, dh]
  Tensor scores = ops::matmul(q, ops::reshape(k, {H, dh, B * M}));
  scores = ops::scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor attn = ops::softmax_last(ops::reshape(scores, {H, Q, B, M}));
  Tensor ctx = ops::matmul(ops::transpose(attn, {0, 2, 1, 3}), v);                                         // [H, B, Q, dh]
  ctx = ops::reshape(ops::transpose(ctx, {1, 2, 0, 3}), {B, Q, dim_});
  return PoolResult{o_(ctx), ops::mean_axis(attn, 0)};
}

Tensor sigmoid_terms(const Tensor& cos, const std::vector<double>& y, const Tensor& log_scale, const Tensor& bias) {
  if (y.size() != cos.numel()) throw std::invalid_argument("sigmoid_terms: label count mismatch");
  const Tensor logit = add_scalar(ops::scale(cos, ops::exp(log_scale)), bias);
  const Tensor signed_logit = ops::mul(logit, Tensor::from(cos.shape(), y));
  return ops::scale(ops::log_sigmoid(signed_logit), -1.0);
}

Tensor pooled_cosine(const Tensor& v_tg, const Tensor& queries) {
  return ops::sum_axis(ops::mul(ops::l2_normalize_last(v_tg), ops::l2_normalize_last(queries)), -1);
}

Tensor part_loss(const Tensor& v_fine, const Tensor& t_sub, const std::vector<std::size_t>& owner,
                 const AlignmentHead& head) {
  const std::size_t B = v_fine.dim(0), Q = t_sub.dim(0);
  if (owner.size() != Q) throw std::invalid_argument("part_loss: owner count mismatch");
  const PoolResult pool = head.attn_pool(t_sub, v_fine);
  std::vector<double> y(B * Q);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t q = 0; q < Q; ++q) y[i * Q + q] = owner[q] == i ? 1.0 : -1.0;
  const Tensor terms = sigmoid_terms(pooled_cosine(pool.v_tg, t_sub), y, head.log_scale_part(), head.bias_part());
  return ops::scale(ops::sum_unordered(terms), 1.0 / static_cast<double>(B * Q));
}

Tensor whole_loss(const Tensor& v_coarse, const Tensor& t_whole, const AlignmentHead& head) {
  if (v_coarse.rank() != 2 || v_coarse.shape() != t_whole.shape()) {
    throw ShapeError("whole_loss: mismatched batches " + shape_str(v_coarse.shape()) + " and " +
                     shape_str(t_whole.shape()));
  }
  const std::size_t B = v_coarse.dim(0);
  const Tensor cos =
      ops::matmul(ops::l2_normalize_last(v_coarse), ops::transpose_last2(ops::l2_normalize_last(t_whole)));
  std::vector<double> y(B * B, -1.0);
  for (std::size_t i = 0; i < B; ++i) y[i * B + i] = 1.0;
  return ops::scale(ops::sum_unordered(sigmoid_terms(cos, y, head.log_scale_whole(), head.bias_whole())),
                    1.0 / static_cast<double>(B * B));
}

Tensor total_loss(const Tensor& part, const Tensor& whole) { return ops::add(part, whole); }

SimilarityReport combine_scores(std::vector<double> whole, std::vector<double> part, std::size_t images,
                                std::size_t captions, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  if (whole.size() != images * captions || part.size() != images * captions) {
    throw std::invalid_argument("combine_scores: score matrix size mismatch");
  }
  SimilarityReport r{images, captions, alpha, std::move(whole), std::move(part), {}};
  r.combined.resize(r.whole.size());
  for (std::size_t i = 0; i < r.whole.size(); ++i) {
    if (alpha == 0.0) {
      r.combined[i] = r.whole[i];
    } else if (alpha == 1.0) {
      r.combined[i] = r.part[i];
    } else {
      r.combined[i] = (1.0 - alpha) * r.whole[i] + alpha * r.part[i];
    }
  }
  return r;
}

}  // namespace caft
