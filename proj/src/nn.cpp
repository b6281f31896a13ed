#include "caft/nn.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "caft/ops.hpp"

namespace caft {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> init, bool decay) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(init), true);
  index_[name] = params_.size();
  params_.push_back(Param{name, t, decay});
  return t;
}

Tensor ParamStore::add_normal(const std::string& name, Shape shape, double stddev, Rng& rng, bool decay) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return add(name, std::move(shape), std::move(v), decay);
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double value, bool decay) {
  std::vector<double> v(shape_numel(shape), value);
  return add(name, std::move(shape), std::move(v), decay);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second].value;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      bool with_bias) {
  Linear l;
  l.weight = store.add_normal(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true);
  if (with_bias) l.bias = store.add_constant(name + ".bias", {out}, 0.0);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, weight);
  return bias.defined() ? ops::add(y, bias) : y;
}

LayerNormParams LayerNormParams::create(ParamStore& store, const std::string& name, std::size_t dim) {
  return LayerNormParams{store.add_constant(name + ".gain", {dim}, 1.0), store.add_constant(name + ".bias", {dim}, 0.0)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return ops::layernorm(x, gain, bias); }

AttentionMask AttentionMask::causal(std::size_t length) {
  AttentionMask m;
  m.shape = {length, length};
  m.blocked.assign(length * length, 0);
  for (std::size_t q = 0; q < length; ++q)
    for (std::size_t k = q + 1; k < length; ++k) m.blocked[q * length + k] = 1;
  return m;
}

AttentionMask AttentionMask::key_padding(const std::vector<std::uint8_t>& key_valid, std::size_t batch,
                                         std::size_t heads, std::size_t length) {
  if (key_valid.size() != batch * length) throw std::invalid_argument("key_padding: mask size mismatch");
  AttentionMask m;
  m.shape = {batch, heads, length, length};
  m.blocked.assign(batch * heads * length * length, 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < length; ++q)
        for (std::size_t k = 0; k < length; ++k)
          m.blocked[((b * heads + h) * length + q) * length + k] = key_valid[b * length + k] ? 0 : 1;
  return m;
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                                   std::size_t mlp_ratio, Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("heads must divide the model width");
  ln1_ = LayerNormParams::create(store, name + ".ln1", dim);
  q_ = Linear::create(store, name + ".q", dim, dim, rng);
  k_ = Linear::create(store, name + ".k", dim, dim, rng, false);
  v_ = Linear::create(store, name + ".v", dim, dim, rng);
  out_ = Linear::create(store, name + ".attn_out", dim, dim, rng);
  ln2_ = LayerNormParams::create(store, name + ".ln2", dim);
  fc1_ = Linear::create(store, name + ".fc1", dim, mlp_ratio * dim, rng);
  fc2_ = Linear::create(store, name + ".fc2", mlp_ratio * dim, dim, rng);
}

Tensor TransformerBlock::operator()(const Tensor& x, const AttentionMask& mask) const {
  if (x.rank() != 3 || x.dim(-1) != dim_) {
    throw ShapeError("transformer block: expected [batch, length, " + std::to_string(dim_) + "], got " +
                     shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), len = x.dim(1), dh = dim_ / heads_;
  const Tensor h = ln1_(x);
  auto split_heads = [&](const Tensor& t) {  // [batch, heads, len, dh]
    return ops::transpose(ops::reshape(t, {batch, len, heads_, dh}), {0, 2, 1, 3});
  };
  const Tensor q = split_heads(q_(h));
  const Tensor k = split_heads(k_(h));
  const Tensor v = split_heads(v_(h));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (!mask.empty()) scores = ops::masked_fill(scores, mask.blocked, mask.shape, -1e9);
  const Tensor attn = ops::softmax_last(scores);
  Tensor ctx = ops::transpose(ops::matmul(attn, v), {0, 2, 1, 3});  // [batch, len, heads, dh]
  ctx = ops::reshape(ctx, {batch, len, dim_});
  const Tensor x1 = ops::add(x, out_(ctx));
  const Tensor m = fc2_(ops::gelu(fc1_(ln2_(x1))));
  return ops::add(x1, m);
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  const std::size_t r = x.rank();
  if (r < 2 || s.rank() != r - 1 || !std::equal(s.shape().begin(), s.shape().end(), x.shape().begin())) {
    throw ShapeError("scale_rows: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(s.shape()));
  }
  std::vector<std::size_t> to_front(r), to_back(r);
  to_front[0] = r - 1;
  for (std::size_t i = 1; i < r; ++i) to_front[i] = i - 1;
  for (std::size_t i = 0; i + 1 < r; ++i) to_back[i] = i + 1;
  to_back[r - 1] = 0;
  return ops::transpose(ops::mul(ops::transpose(x, to_front), s), to_back);
}

Tensor reciprocal(const Tensor& x) { return ops::exp(ops::scale(ops::log(x), -1.0)); }

Tensor add_scalar(const Tensor& x, const Tensor& y) {
  Shape expanded = x.shape();
  expanded.push_back(1);
  return ops::reshape(ops::add(ops::reshape(x, expanded), y), x.shape());
}

}  // namespace caft
