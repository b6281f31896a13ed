#include "caft/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "caft/rng.hpp"

namespace caft {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::caft: return "caft";
    case Variant::flat_loss: return "flat-loss";
    case Variant::no_part: return "no-part";
    case Variant::plain_vit: return "plain-vit";
    case Variant::flat_text: return "flat-text";
  }
  return "caft";
}

Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::caft, Variant::flat_loss, Variant::no_part, Variant::plain_vit, Variant::flat_text}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + s + "' (expected caft | flat-loss | no-part | plain-vit | flat-text)");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("setting '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw std::invalid_argument("setting '" + key + "' expects a real number, got '" + v + "'");
  }
  return out;
}

std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_counts(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_count(key, trim(item)));
  if (out.empty()) throw std::invalid_argument("setting '" + key + "' expects a comma-separated list");
  return out;
}

}  // namespace

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "dim=" << dim << ";sub_layers=" << sub_layers << ";whole_layers=" << whole_layers << ";heads=" << heads
     << ";mlp_ratio=" << mlp_ratio << ";context_sub=" << context_sub << ";chunks=" << chunks
     << ";vocab_size=" << vocab_size << ";image_size=" << image_size << ";superpixels=" << superpixels
     << ";schedule=" << join_counts(schedule) << ";stage_blocks=" << stage_blocks << ";pool_heads=" << pool_heads;
  return os.str();
}

std::uint64_t ModelConfig::digest() const { return fnv1a(canonical()); }

void TrainConfig::validate() const {
  if (warmup_steps < 1) throw std::invalid_argument("warmup_steps must be >= 1");
  if (!(base_lr > 0)) throw std::invalid_argument("base_lr must be > 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in (0, 1)");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("train_fraction must lie in (0, 1)");
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.model.dim = 512;
    c.model.sub_layers = 8;
    c.model.whole_layers = 4;
    c.model.heads = 8;
    c.model.context_sub = 77;
    c.model.image_size = 224;
    c.model.superpixels = 196;
    c.model.schedule = {64, 32, 16};
    c.model.pool_heads = 8;
    c.train.preset = "paper";
    c.train.batch_size = 2048;
    c.train.epochs = 32;
    c.train.base_lr = 5e-4;
    c.train.weight_decay = 0.5;
    c.train.warmup_steps = 2000;
    c.train.adam_eps = 1e-8;
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (expected desk | paper)");
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  static const std::map<std::string, std::function<void(RunConfig&, const std::string&, const std::string&)>> setters = {
      {"dim", [](RunConfig& c, auto& k, auto& x) { c.model.dim = parse_count(k, x); }},
      {"sub_layers", [](RunConfig& c, auto& k, auto& x) { c.model.sub_layers = parse_count(k, x); }},
      {"whole_layers", [](RunConfig& c, auto& k, auto& x) { c.model.whole_layers = parse_count(k, x); }},
      {"heads", [](RunConfig& c, auto& k, auto& x) { c.model.heads = parse_count(k, x); }},
      {"mlp_ratio", [](RunConfig& c, auto& k, auto& x) { c.model.mlp_ratio = parse_count(k, x); }},
      {"context_sub", [](RunConfig& c, auto& k, auto& x) { c.model.context_sub = parse_count(k, x); }},
      {"chunks", [](RunConfig& c, auto& k, auto& x) { c.model.chunks = parse_count(k, x); }},
      {"sub_captions", [](RunConfig& c, auto& k, auto& x) { c.model.sub_captions = parse_count(k, x); }},
      {"vocab_size", [](RunConfig& c, auto& k, auto& x) { c.model.vocab_size = parse_count(k, x); }},
      {"image_size", [](RunConfig& c, auto& k, auto& x) { c.model.image_size = parse_count(k, x); }},
      {"superpixels", [](RunConfig& c, auto& k, auto& x) { c.model.superpixels = parse_count(k, x); }},
      {"schedule", [](RunConfig& c, auto& k, auto& x) { c.model.schedule = parse_counts(k, x); }},
      {"stage_blocks", [](RunConfig& c, auto& k, auto& x) { c.model.stage_blocks = parse_count(k, x); }},
      {"kmeans_iters", [](RunConfig& c, auto& k, auto& x) { c.model.kmeans_iters = parse_count(k, x); }},
      {"position_weight", [](RunConfig& c, auto& k, auto& x) { c.model.position_weight = parse_real(k, x); }},
      {"group_temperature", [](RunConfig& c, auto& k, auto& x) { c.model.group_temperature = parse_real(k, x); }},
      {"pool_heads", [](RunConfig& c, auto& k, auto& x) { c.model.pool_heads = parse_count(k, x); }},
      {"init_temperature", [](RunConfig& c, auto& k, auto& x) { c.model.init_temperature = parse_real(k, x); }},
      {"init_bias", [](RunConfig& c, auto& k, auto& x) { c.model.init_bias = parse_real(k, x); }},
      {"adapter_gate", [](RunConfig& c, auto& k, auto& x) { c.model.adapter_gate = parse_real(k, x); }},
      {"preset", [](RunConfig& c, auto&, auto& x) { c.train.preset = x; }},
      {"variant", [](RunConfig& c, auto&, auto& x) { c.train.variant = parse_variant(x); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& x) { c.train.batch_size = parse_count(k, x); }},
      {"epochs", [](RunConfig& c, auto& k, auto& x) { c.train.epochs = parse_count(k, x); }},
      {"base_lr", [](RunConfig& c, auto& k, auto& x) { c.train.base_lr = parse_real(k, x); }},
      {"weight_decay", [](RunConfig& c, auto& k, auto& x) { c.train.weight_decay = parse_real(k, x); }},
      {"beta1", [](RunConfig& c, auto& k, auto& x) { c.train.beta1 = parse_real(k, x); }},
      {"beta2", [](RunConfig& c, auto& k, auto& x) { c.train.beta2 = parse_real(k, x); }},
      {"adam_eps", [](RunConfig& c, auto& k, auto& x) { c.train.adam_eps = parse_real(k, x); }},
      {"warmup_steps", [](RunConfig& c, auto& k, auto& x) { c.train.warmup_steps = parse_count(k, x); }},
      {"clip_norm", [](RunConfig& c, auto& k, auto& x) { c.train.clip_norm = parse_real(k, x); }},
      {"seed", [](RunConfig& c, auto& k, auto& x) { c.train.seed = parse_count(k, x); }},
      {"train_fraction", [](RunConfig& c, auto& k, auto& x) { c.train.train_fraction = parse_real(k, x); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw std::invalid_argument("unknown setting '" + key + "'");
  it->second(*this, key, v);
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str());
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
  const auto& m = model;
  const auto& t = train;
  return {
      {"preset", t.preset},
      {"variant", variant_name(t.variant)},
      {"dim", std::to_string(m.dim)},
      {"sub_layers", std::to_string(m.sub_layers)},
      {"whole_layers", std::to_string(m.whole_layers)},
      {"heads", std::to_string(m.heads)},
      {"mlp_ratio", std::to_string(m.mlp_ratio)},
      {"context_sub", std::to_string(m.context_sub)},
      {"chunks", std::to_string(m.chunks)},
      {"sub_captions", std::to_string(m.sub_captions)},
      {"vocab_size", std::to_string(m.vocab_size)},
      {"image_size", std::to_string(m.image_size)},
      {"superpixels", std::to_string(m.superpixels)},
      {"schedule", join_counts(m.schedule)},
      {"stage_blocks", std::to_string(m.stage_blocks)},
      {"kmeans_iters", std::to_string(m.kmeans_iters)},
      {"position_weight", format_double(m.position_weight)},
      {"group_temperature", format_double(m.group_temperature)},
      {"pool_heads", std::to_string(m.pool_heads)},
      {"init_temperature", format_double(m.init_temperature)},
      {"init_bias", format_double(m.init_bias)},
      {"adapter_gate", format_double(m.adapter_gate)},
      {"batch_size", std::to_string(t.batch_size)},
      {"epochs", std::to_string(t.epochs)},
      {"base_lr", format_double(t.base_lr)},
      {"weight_decay", format_double(t.weight_decay)},
      {"beta1", format_double(t.beta1)},
      {"beta2", format_double(t.beta2)},
      {"adam_eps", format_double(t.adam_eps)},
      {"warmup_steps", std::to_string(t.warmup_steps)},
      {"clip_norm", format_double(t.clip_norm)},
      {"seed", std::to_string(t.seed)},
      {"train_fraction", format_double(t.train_fraction)},
  };
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
  return s;
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  c.apply_text(text);
  return c;
}

}  // namespace caft
