#pragma once

// Parameter storage and the transformer building blocks shared by the text
// and vision encoders.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caft/rng.hpp"
#include "caft/tensor.hpp"

namespace caft {

struct Param {
  std::string name;
  Tensor value;
  /// AdamW applies weight decay only to these (matrices and embedding tables).
  bool decay = false;
};

/// Ordered, named collection of trainable tensors.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> init, bool decay);
  Tensor add_normal(const std::string& name, Shape shape, double stddev, Rng& rng, bool decay);
  Tensor add_constant(const std::string& name, Shape shape, double value, bool decay = false);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

/// Affine map x W + b over the last axis.
struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], undefined when created without one

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams create(ParamStore& store, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const;
};

/// Boolean attention mask (nonzero = blocked) whose shape is a suffix of the
/// score tensor shape [batch, heads, queries, keys].
struct AttentionMask {
  std::vector<std::uint8_t> blocked;
  Shape shape;

  bool empty() const { return blocked.empty(); }
  static AttentionMask causal(std::size_t length);
  /// Blocks keys whose entry in `key_valid` ([batch * length]) is zero.
  static AttentionMask key_padding(const std::vector<std::uint8_t>& key_valid, std::size_t batch,
                                   std::size_t heads, std::size_t length);
};

/// Pre-LayerNorm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
/// Keys carry no bias: a per-query constant shift cancels in the softmax.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                   std::size_t mlp_ratio, Rng& rng);

  /// x: [batch, length, dim]
  Tensor operator()(const Tensor& x, const AttentionMask& mask = {}) const;

 private:
  std::size_t dim_ = 0, heads_ = 0;
  LayerNormParams ln1_, ln2_;
  Linear q_, k_, v_, out_, fc1_, fc2_;
};

/// Scales row r of x ([..., rows, cols]) by s[..., r] (s has the leading shape of x).
Tensor scale_rows(const Tensor& x, const Tensor& s);

/// Elementwise reciprocal, composed as exp(-log(x)); x must be positive.
Tensor reciprocal(const Tensor& x);

/// x + y where y is a single-element tensor added to every entry.
Tensor add_scalar(const Tensor& x, const Tensor& y);

}  // namespace caft
