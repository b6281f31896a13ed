#include "caft/model.hpp"

#include <stdexcept>

#include "caft/ops.hpp"

namespace caft {

namespace {

Rng init_stream(std::uint64_t seed) { return Rng::stream(seed, "init"); }

}  // namespace

CaftModel::CaftModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng = init_stream(seed);
  text_ = TextEncoder(store_, cfg_, rng);
  vision_ = VisionEncoder(store_, cfg_, rng);
  head_ = AlignmentHead(store_, cfg_, rng);
}

std::vector<std::size_t> flat_caption_tokens(const std::vector<std::string>& sentences, const Vocabulary& vocab,
                                             std::size_t context) {
  std::vector<std::size_t> all(sentences.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return tokenize_chunk(join_chunk(sentences, all), vocab, context);
}

LossParts compute_losses(const CaftModel& model, const std::vector<const PreparedImage*>& images,
                         const BatchAssembly& batch, Variant variant,
                         const std::vector<std::vector<std::size_t>>& whole_tokens) {
  const std::size_t B = batch.batch, K = batch.k, N = batch.n;
  if (images.size() != B) throw std::invalid_argument("compute_losses: image count differs from the batch");
  const SegmentHierarchy vis = model.vision().encode(images, variant);
  const Tensor t_sub = model.text().encode_sub(batch.sub_tokens);

  Tensor t_whole;
  if (variant == Variant::flat_text) {
    if (whole_tokens.size() != B) throw std::invalid_argument("compute_losses: flat-text needs one caption per image");
    t_whole = model.text().encode_sub(whole_tokens);
  } else {
    std::vector<std::size_t> first;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < N; ++c) first.push_back(b * K + c);
    const Tensor chunks = ops::embedding_lookup(t_sub, first, {B, N});
    t_whole = model.text().encode_whole(model.text().adapt(chunks), batch.chunk_mask);
  }

  LossParts out;
  if (variant == Variant::no_part) {
    out.part = Tensor::scalar(0.0);
  } else {
    std::vector<std::size_t> owner(B * K);
    for (std::size_t q = 0; q < B * K; ++q) owner[q] = q / K;
    out.part = part_loss(vis.v_fine, t_sub, owner, model.head());
  }
  out.whole = whole_loss(vis.v_coarse, t_whole, model.head());
  out.total = total_loss(out.part, out.whole);
  return out;
}

}  // namespace caft
