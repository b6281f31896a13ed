#include "caft/training.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "caft/ops.hpp"

namespace caft {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t total) {
  const std::size_t warm = cfg.warmup_steps;
  if (total <= warm) {
    throw std::invalid_argument("lr schedule: total steps (" + std::to_string(total) + ") must exceed warmup steps (" +
                                std::to_string(warm) + ")");
  }
  if (step < warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamMoments AdamMoments::zeros_like(const ParamStore& store) {
  AdamMoments m;
  for (const auto& p : store.params()) {
    m.m.emplace_back(p.value.numel(), 0.0);
    m.v.emplace_back(p.value.numel(), 0.0);
  }
  return m;
}

void adamw_step(ParamStore& store, const std::vector<std::vector<double>>& grads, AdamMoments& moments, double lr,
                std::size_t t, const TrainConfig& cfg) {
  auto& params = store.params();
  if (grads.size() != params.size() || moments.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: gradient count differs from parameter count");
  }
  if (t == 0) throw std::invalid_argument("adamw_step: steps are 1-based");
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + params[i].name);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double step_size = lr / bc1;
  const double bc2_sqrt = std::sqrt(bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.mutable_values();
    auto& m = moments.m[i];
    auto& v = moments.v[i];
    const auto& g = grads[i];
    const double decay = params[i].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (decay != 0.0) w[j] -= decay * w[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) / bc2_sqrt + cfg.adam_eps);
    }
  }
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= s;
  }
  return norm;
}

TrainState TrainState::fresh(const RunConfig& config) {
  config.train.validate();
  TrainState s;
  s.config = config;
  s.model = std::make_unique<CaftModel>(config.model, config.train.seed);
  s.moments = AdamMoments::zeros_like(s.model->store());
  s.rng = Rng::stream(config.train.seed, "batch");
  return s;
}

std::string metrics_header() { return "step,lr,part_loss,whole_loss,total,tau_p,tau_w\n"; }

std::string format_metrics(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.step),
                r.lr, r.part_loss, r.whole_loss, r.total, r.tau_p, r.tau_w);
  return buf;
}

TrainData TrainData::build(const std::vector<AnnotatedSample>& corpus, const std::vector<std::size_t>& indices,
                           const ModelConfig& cfg, Variant variant, const Vocabulary& vocab) {
  TrainData d;
  d.vocab = vocab;
  for (auto i : indices) {
    d.samples.push_back(&corpus.at(i));
    d.prepared.push_back(prepare_image(corpus[i].image, cfg, variant));
  }
  return d;
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) { return (samples + batch - 1) / batch; }

std::size_t total_steps(std::size_t samples, const TrainConfig& cfg) {
  return cfg.epochs * steps_per_epoch(samples, cfg.batch_size);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::stream(splitmix64(seed) + static_cast<std::uint64_t>(epoch), "epoch.order");
  rng.shuffle(order);
  return order;
}

void train(TrainState& state, const TrainData& data, std::uint64_t until_step,
           const std::function<void(const MetricsRow&)>& on_step) {
  const auto& tc = state.config.train;
  const auto& mc = state.config.model;
  const std::size_t n = data.samples.size();
  if (n == 0) throw std::invalid_argument("train: empty dataset");
  const std::size_t spe = steps_per_epoch(n, tc.batch_size);
  const std::size_t total = total_steps(n, tc);
  until_step = std::min<std::uint64_t>(until_step, total);
  CaftModel& model = *state.model;
  auto& params = model.store().params();

  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  while (state.step < until_step) {
    const std::uint64_t t = state.step + 1;
    try {
      const std::size_t epoch = (t - 1) / spe, pos = (t - 1) % spe;
      if (epoch != cached_epoch) {
        order = epoch_order(tc.seed, epoch, n);
        cached_epoch = epoch;
      }
      const std::size_t begin = pos * tc.batch_size, end = std::min(n, begin + tc.batch_size);
      std::vector<CaptionSource> sources;
      std::vector<const PreparedImage*> images;
      std::vector<std::vector<std::size_t>> whole_tokens;
      for (std::size_t i = begin; i < end; ++i) {
        const auto* s = data.samples[order[i]];
        CaptionSource src{s->sentences, {}};
        for (const auto& sc : s->short_captions) src.other_captions.push_back({sc});
        sources.push_back(std::move(src));
        images.push_back(&data.prepared[order[i]]);
        if (tc.variant == Variant::flat_text) whole_tokens.push_back(flat_caption_tokens(s->sentences, data.vocab, mc.context_sub));
      }
      const BatchAssembly batch = assemble_batch(sources, mc.sub_captions, mc.chunks, data.vocab, mc.context_sub, state.rng);

      Tape tape;
      MetricsRow row;
      {
        TapeScope scope(tape);
        model.store().zero_grad();
        const LossParts loss = compute_losses(model, images, batch, tc.variant, whole_tokens);
        tape.backward(loss.total);
        row.part_loss = loss.part.item();
        row.whole_loss = loss.whole.item();
        row.total = loss.total.item();
      }
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.emplace_back(p.value.grad().begin(), p.value.grad().end());
      tape.reset();
      model.store().zero_grad();
      for (std::size_t i = 0; i < params.size(); ++i)
        for (double g : grads[i])
          if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + params[i].name);
      clip_global_norm(grads, tc.clip_norm);
      const double lr = lr_at(t, tc, total);
      adamw_step(model.store(), grads, state.moments, lr, t, tc);
      state.step = t;

      row.step = t;
      row.lr = lr;
      row.tau_p = std::exp(-model.head().log_scale_part().item());
      row.tau_w = std::exp(-model.head().log_scale_whole().item());
      if (on_step) on_step(row);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(t) + ": " + e.what());
    }
  }
}

namespace {

void put_u32(std::string& s, std::uint32_t v) { s.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::string& s, const std::string& v) {
  put_u64(s, v.size());
  s += v;
}
void put_doubles(std::string& s, const std::vector<double>& v) {
  put_u64(s, v.size());
  s.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, b_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, b_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string v = b_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  void doubles(std::span<double> out) {
    const std::uint64_t n = u64();
    if (n != out.size()) throw CheckpointError("checkpoint record has " + std::to_string(n) + " values, expected " + std::to_string(out.size()));
    need(n * sizeof(double));
    std::memcpy(out.data(), b_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string v = b_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TrainState& state) {
  std::string s = "CAFT";
  put_u32(s, kCheckpointVersion);
  put_u64(s, state.config.model.digest());
  put_str(s, state.config.to_text());
  const auto& params = state.model->store().params();
  put_u64(s, params.size());
  for (const auto& p : params) {
    put_str(s, p.name);
    put_u32(s, static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) put_u64(s, e);
    put_doubles(s, std::vector<double>(p.value.values().begin(), p.value.values().end()));
  }
  for (const auto& m : state.moments.m) put_doubles(s, m);
  for (const auto& v : state.moments.v) put_doubles(s, v);
  put_u64(s, state.step);
  put_str(s, state.rng.serialize());
  return s;
}

TrainState decode_checkpoint(const std::string& bytes, const ModelConfig* expected) {
  Reader r(bytes);
  if (r.raw(4) != "CAFT") throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CompatibilityError("checkpoint format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  }
  const std::uint64_t digest = r.u64();
  RunConfig cfg;
  try {
    cfg = RunConfig::from_text(r.str());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config is corrupt: ") + e.what());
  }
  if (cfg.model.digest() != digest) throw CheckpointError("checkpoint config does not match its digest");
  if (expected && expected->digest() != digest) {
    throw CompatibilityError("checkpoint model (" + cfg.model.canonical() + ") differs from the requested model (" +
                             expected->canonical() + ")");
  }
  TrainState s = TrainState::fresh(cfg);
  auto& params = s.model->store().params();
  if (r.u64() != params.size()) throw CompatibilityError("checkpoint parameter count differs from the model");
  for (auto& p : params) {
    const std::string name = r.str();
    if (name != p.name) throw CompatibilityError("checkpoint parameter '" + name + "' where '" + p.name + "' was expected");
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u64();
    if (shape != p.value.shape()) {
      throw CompatibilityError("checkpoint parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                               shape_str(p.value.shape()));
    }
    r.doubles(p.value.mutable_values());
  }
  for (auto& m : s.moments.m) r.doubles(m);
  for (auto& v : s.moments.v) r.doubles(v);
  s.step = r.u64();
  try {
    s.rng.deserialize(r.str());
  } catch (const std::runtime_error& e) {
    throw CheckpointError(std::string("checkpoint rng state: ") + e.what());
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  return s;
}

void checkpoint_save(const TrainState& state, const std::string& path) {
  const std::string bytes = encode_checkpoint(state);
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
}

TrainState checkpoint_load(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), expected);
}

}  // namespace caft
