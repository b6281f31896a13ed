#include "caft/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "caft/ops.hpp"

namespace caft {

namespace {

const char* const kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool has_alnum(const std::string& s) {
  return std::any_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) != 0; });
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  std::set<std::string> distinct;
  for (const auto& w : words)
    for (auto& x : words_of(w)) distinct.insert(x);
  Vocabulary v;
  for (const char* r : kReserved) {
    v.ids_[r] = v.tokens_.size();
    v.tokens_.emplace_back(r);
  }
  for (const auto& w : distinct) {
    v.ids_[w] = v.tokens_.size();
    v.tokens_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::parse(const std::string& text) {
  Vocabulary v;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t id = v.tokens_.size();
    if (id < 4 && line != kReserved[id]) {
      throw std::runtime_error("vocabulary line " + std::to_string(id + 1) + ": expected " + kReserved[id]);
    }
    if (line.empty()) throw std::runtime_error("vocabulary line " + std::to_string(id + 1) + " is empty");
    if (!v.ids_.emplace(line, id).second) throw std::runtime_error("vocabulary: duplicate token '" + line + "'");
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() < 4) throw std::runtime_error("vocabulary: missing reserved tokens");
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string Vocabulary::to_text() const {
  std::string s;
  for (const auto& t : tokens_) s += t + "\n";
  return s;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  out << to_text();
  if (!out) throw std::runtime_error("cannot write vocabulary " + path);
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::string> split_sentences(const std::string& caption) {
  if (!has_alnum(caption)) throw std::invalid_argument("caption has no alphanumeric content");
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < caption.size(); ++i) {
    const char c = caption[i];
    cur.push_back(c);
    const bool terminal = c == '.' || c == '!' || c == '?';
    const bool boundary = i + 1 == caption.size() || std::isspace(static_cast<unsigned char>(caption[i + 1]));
    if (terminal && boundary) {
      std::string s = trim(cur);
      if (has_alnum(s)) out.push_back(std::move(s));
      cur.clear();
    }
  }
  std::string tail = trim(cur);
  if (has_alnum(tail)) out.push_back(std::move(tail));
  return out;
}

std::vector<std::size_t> Chunking::sizes() const {
  std::vector<std::size_t> s;
  for (const auto& c : chunks) s.push_back(c.size());
  return s;
}

Chunking chunk_random(std::size_t num_sentences, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("chunk_random: N must be >= 1");
  if (num_sentences == 0) throw std::invalid_argument("chunk_random: no sentences");
  const std::size_t L = num_sentences;
  Chunking out;
  out.mask.assign(n, 1);
  if (L < n) {
    std::vector<std::size_t> picks(L);
    for (std::size_t i = 0; i < L; ++i) picks[i] = i;
    for (std::size_t i = L; i < n; ++i) picks.push_back(rng.below(L));
    std::sort(picks.begin(), picks.end());
    for (auto p : picks) out.chunks.push_back({p});
    return out;
  }
  std::vector<std::size_t> sizes;
  if (L > 3 * n) {
    for (std::size_t k = 0; k < n; ++k) sizes.push_back(1 + rng.below(3));
  } else {
    // ways[j][r]: compositions of r into j parts, each in [1, 3].
    std::vector<std::vector<double>> ways(n + 1, std::vector<double>(L + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t j = 1; j <= n; ++j)
      for (std::size_t r = 1; r <= L; ++r)
        for (std::size_t s = 1; s <= 3 && s <= r; ++s) ways[j][r] += ways[j - 1][r - s];
    std::size_t rem = L;
    for (std::size_t j = n; j >= 1; --j) {
      double u = rng.uniform() * ways[j][rem];
      std::size_t pick = 0;
      for (std::size_t s = 1; s <= 3 && s <= rem; ++s) {
        const double w = ways[j - 1][rem - s];
        if (w == 0.0) continue;
        pick = s;
        if (u < w) break;
        u -= w;
      }
      sizes.push_back(pick);
      rem -= pick;
    }
  }
  std::size_t next = 0;
  for (auto s : sizes) {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < s; ++i) c.push_back(next++);
    out.chunks.push_back(std::move(c));
  }
  return out;
}

Chunking chunk_balanced(std::size_t num_sentences, std::size_t n) {
  if (n == 0) throw std::invalid_argument("chunk_balanced: N must be >= 1");
  if (num_sentences == 0) throw std::invalid_argument("chunk_balanced: no sentences");
  const std::size_t L = num_sentences;
  Chunking out;
  if (L < n) {
    for (std::size_t k = 0; k < n; ++k) {
      out.chunks.push_back({std::min(k, L - 1)});
      out.mask.push_back(k < L ? 1 : 0);
    }
    return out;
  }
  std::size_t next = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t size = L / n + (k < L % n ? 1 : 0);
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < size; ++i) c.push_back(next++);
    out.chunks.push_back(std::move(c));
    out.mask.push_back(1);
  }
  return out;
}

std::string join_chunk(const std::vector<std::string>& sentences, const std::vector<std::size_t>& chunk) {
  std::string s;
  for (auto i : chunk) {
    if (!s.empty()) s += ' ';
    s += sentences.at(i);
  }
  return s;
}

std::vector<std::size_t> tokenize_chunk(const std::string& text, const Vocabulary& vocab, std::size_t context) {
  if (context < 3) throw std::invalid_argument("tokenize_chunk: context must be >= 3");
  std::vector<std::size_t> out{kBos};
  for (const auto& w : words_of(text)) {
    if (out.size() + 1 >= context) break;
    out.push_back(vocab.id(w));
  }
  out.push_back(kEos);
  out.resize(context, kPad);
  return out;
}

CaptionHierarchy build_caption(const std::vector<std::string>& sentences, const Chunking& chunking,
                               const Vocabulary& vocab, std::size_t context) {
  CaptionHierarchy h;
  h.sentences = sentences;
  h.chunking = chunking;
  for (const auto& c : chunking.chunks) h.token_ids.push_back(tokenize_chunk(join_chunk(sentences, c), vocab, context));
  return h;
}

TextEncoder::TextEncoder(ParamStore& store, const ModelConfig& cfg, Rng& rng)
    : dim_(cfg.dim), context_(cfg.context_sub), chunks_(cfg.chunks), heads_(cfg.heads), vocab_(cfg.vocab_size) {
  if (vocab_ < 5) throw std::invalid_argument("text encoder: vocabulary size not set");
  if (dim_ % 4 != 0) throw std::invalid_argument("text encoder: width must be divisible by 4");
  const double s = 0.02;
  tok_emb_ = store.add_normal("text.tok_emb", {vocab_, dim_}, s, rng, true);
  pos_sub_ = store.add_normal("text.pos_sub", {context_, dim_}, s, rng, false);
  for (std::size_t l = 0; l < cfg.sub_layers; ++l)
    sub_blocks_.emplace_back(store, "text.sub" + std::to_string(l), dim_, heads_, cfg.mlp_ratio, rng);
  ln_sub_ = LayerNormParams::create(store, "text.ln_sub", dim_);
  proj_sub_ = Linear::create(store, "text.proj_sub", dim_, dim_, rng, false);

  adapter_fc1_ = Linear::create(store, "text.adapter.fc1", dim_, dim_ / 4, rng);
  adapter_fc2_ = Linear::create(store, "text.adapter.fc2", dim_ / 4, dim_, rng);
  gate_ = store.add_constant("text.adapter.gate", {1}, cfg.adapter_gate);

  pos_whole_ = store.add_normal("text.pos_whole", {chunks_ + 1, dim_}, s, rng, false);
  cls_ = store.add_normal("text.cls", {1, dim_}, s, rng, false);
  for (std::size_t l = 0; l < cfg.whole_layers; ++l)
    whole_blocks_.emplace_back(store, "text.whole" + std::to_string(l), dim_, heads_, cfg.mlp_ratio, rng);
  ln_whole_ = LayerNormParams::create(store, "text.ln_whole", dim_);
  proj_whole_ = Linear::create(store, "text.proj_whole", dim_, dim_, rng, false);
}

Tensor TextEncoder::encode_sub(const std::vector<std::vector<std::size_t>>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("encode_sub: no sequences");
  // Causal attention makes everything after EOS irrelevant to the EOS readout,
  // so each row is cut at its EOS and rows of equal length share a batch.
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const auto& seq = tokens[r];
    if (seq.size() != context_) {
      throw std::invalid_argument("encode_sub: sequence length " + std::to_string(seq.size()) + ", expected " +
                                  std::to_string(context_));
    }
    for (auto id : seq)
      if (id >= vocab_) throw std::out_of_range("encode_sub: token id " + std::to_string(id) + " >= vocabulary size");
    const auto eos = std::find(seq.begin(), seq.end(), kEos);
    if (eos == seq.end()) throw std::invalid_argument("encode_sub: sequence without EOS");
    buckets[static_cast<std::size_t>(eos - seq.begin()) + 1].push_back(r);
  }
  std::vector<Tensor> parts;
  std::vector<std::size_t> where(tokens.size());
  std::size_t offset = 0;
  for (const auto& [len, rows] : buckets) {
    std::vector<std::size_t> ids;
    ids.reserve(rows.size() * len);
    for (auto r : rows) ids.insert(ids.end(), tokens[r].begin(), tokens[r].begin() + static_cast<std::ptrdiff_t>(len));
    Tensor x = ops::embedding_lookup(tok_emb_, ids, {rows.size(), len});
    x = ops::add(x, ops::slice(pos_sub_, 0, 0, len));
    const AttentionMask mask = AttentionMask::causal(len);
    for (const auto& b : sub_blocks_) x = b(x, mask);
    x = ln_sub_(ops::slice(x, 1, len - 1, len));
    parts.push_back(ops::reshape(x, {rows.size(), dim_}));
    for (std::size_t i = 0; i < rows.size(); ++i) where[rows[i]] = offset + i;
    offset += rows.size();
  }
  Tensor stacked = parts.size() == 1 ? parts[0] : ops::concat(parts, 0);
  bool identity = true;
  for (std::size_t r = 0; r < where.size(); ++r) identity = identity && where[r] == r;
  if (!identity) stacked = ops::embedding_lookup(stacked, where);
  return proj_sub_(stacked);
}

Tensor TextEncoder::adapt(const Tensor& t_sub) const {
  const Tensor h = adapter_fc2_(ops::gelu(adapter_fc1_(t_sub)));
  const Tensor keep = ops::add(ops::scale(gate_, -1.0), Tensor::scalar(1.0));
  return ops::add(ops::scale(h, gate_), ops::scale(t_sub, keep));
}

Tensor TextEncoder::encode_whole(const Tensor& t_adapted, const std::vector<std::uint8_t>& mask) const {
  if (t_adapted.rank() != 3 || t_adapted.dim(1) != chunks_ || t_adapted.dim(2) != dim_) {
    throw ShapeError("encode_whole: expected [batch, " + std::to_string(chunks_) + ", " + std::to_string(dim_) +
                     "], got " + shape_str(t_adapted.shape()));
  }
  const std::size_t batch = t_adapted.dim(0), len = chunks_ + 1;
  if (mask.size() != batch * chunks_) throw std::invalid_argument("encode_whole: mask size mismatch");
  std::vector<std::uint8_t> valid;
  valid.reserve(batch * len);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t k = 0; k < chunks_; ++k) {
      valid.push_back(mask[b * chunks_ + k] ? 1 : 0);
      any = any || mask[b * chunks_ + k];
    }
    if (!any) throw std::invalid_argument("encode_whole: caption " + std::to_string(b) + " has no valid chunk");
    valid.push_back(1);
  }
  const Tensor cls = ops::embedding_lookup(cls_, std::vector<std::size_t>(batch, 0), {batch, 1});
  Tensor x = ops::add(ops::concat({t_adapted, cls}, 1), pos_whole_);
  const AttentionMask am = AttentionMask::key_padding(valid, batch, heads_, len);
  for (const auto& b : whole_blocks_) x = b(x, am);
  x = ln_whole_(ops::reshape(ops::slice(x, 1, chunks_, len), {batch, dim_}));
  return proj_whole_(x);
}

}  // namespace caft
