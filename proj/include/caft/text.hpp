#pragma once

// Caption hierarchy: sentence splitting, chunking into N sub-captions,
// word-level tokenization, and the two-level text encoder.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caft/config.hpp"
#include "caft/nn.hpp"
#include "caft/rng.hpp"
#include "caft/tensor.hpp"

namespace caft {

inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kUnk = 3;

/// Lowercased alphanumeric runs; everything else separates words.
std::vector<std::string> words_of(const std::string& text);

class Vocabulary {
 public:
  /// Reserved tokens followed by the distinct words in sorted order.
  static Vocabulary from_words(const std::vector<std::string>& words);
  /// One token per line, line number = id.
  static Vocabulary load(const std::string& path);
  static Vocabulary parse(const std::string& text);
  void save(const std::string& path) const;
  std::string to_text() const;

  std::size_t id(const std::string& word) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

std::vector<std::string> split_sentences(const std::string& caption);

/// Sentence indices per chunk plus validity flags.
struct Chunking {
  std::vector<std::vector<std::size_t>> chunks;
  std::vector<std::uint8_t> mask;

  std::vector<std::size_t> sizes() const;
};

/// 1-3 consecutive sentences per chunk; excess discarded, shortfall resampled.
Chunking chunk_random(std::size_t num_sentences, std::size_t n, Rng& rng);
/// Fairest consecutive split; trailing chunks repeat the last sentence (masked) when L < N.
Chunking chunk_balanced(std::size_t num_sentences, std::size_t n);

std::string join_chunk(const std::vector<std::string>& sentences, const std::vector<std::size_t>& chunk);

std::vector<std::size_t> tokenize_chunk(const std::string& text, const Vocabulary& vocab, std::size_t context);

struct CaptionHierarchy {
  std::vector<std::string> sentences;
  Chunking chunking;
  std::vector<std::vector<std::size_t>> token_ids;
};

CaptionHierarchy build_caption(const std::vector<std::string>& sentences, const Chunking& chunking,
                               const Vocabulary& vocab, std::size_t context);

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  /// One row per token sequence; rows never see each other. Returns [R, D].
  Tensor encode_sub(const std::vector<std::vector<std::size_t>>& tokens) const;
  /// g * MLP(t) + (1 - g) * t, row-wise.
  Tensor adapt(const Tensor& t_sub) const;
  /// t_adapted: [B, N, D]; mask: B*N validity flags. Returns [B, D].
  Tensor encode_whole(const Tensor& t_adapted, const std::vector<std::uint8_t>& mask) const;

  const Tensor& gate() const { return gate_; }

 private:
  std::size_t dim_ = 0, context_ = 0, chunks_ = 0, heads_ = 0, vocab_ = 0;
  Tensor tok_emb_, pos_sub_, pos_whole_, cls_, gate_;
  std::vector<TransformerBlock> sub_blocks_, whole_blocks_;
  LayerNormParams ln_sub_, ln_whole_;
  Linear proj_sub_, proj_whole_, adapter_fc1_, adapter_fc2_;
};

}  // namespace caft
