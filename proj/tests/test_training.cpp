#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "caft/training.hpp"
#include "support.hpp"

using namespace caft;
using caft::test::TempDir;

namespace {

RunConfig tiny_run(std::size_t vocab) {
  RunConfig c;
  c.model = caft::test::tiny_model(vocab);
  c.model.image_size = 24;
  c.model.superpixels = 16;
  c.model.schedule = {8, 4, 2};
  c.train.batch_size = 4;
  c.train.epochs = 4;
  c.train.warmup_steps = 2;
  c.train.base_lr = 1e-3;
  return c;
}

struct Corpus {
  std::vector<AnnotatedSample> samples;
  Vocabulary vocab = synth_vocabulary();
  TrainData data;

  Corpus(std::size_t n, const ModelConfig& m, Variant v = Variant::caft) {
    samples = generate(3, n, m.image_size);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    data = TrainData::build(samples, idx, m, v, vocab);
  }
};

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.base_lr = 3e-3;
  c.warmup_steps = 100;
  const std::size_t total = 1000;
  CHECK(lr_at(0, c, total) == 0.0);
  CHECK(lr_at(50, c, total) == doctest::Approx(1.5e-3).epsilon(1e-15));
  CHECK(lr_at(100, c, total) == c.base_lr);
  CHECK(std::abs(lr_at(total, c, total)) <= 1e-15);
  CHECK(std::abs(lr_at(550, c, total) - c.base_lr / 2) <= 1e-15);
  CHECK(lr_at(total + 5, c, total) == 0.0);
  // Continuous at the junction, nonnegative, nonincreasing after warmup.
  CHECK(std::abs(lr_at(99, c, total) - lr_at(101, c, total)) < 2 * c.base_lr / 100);
  for (std::size_t s = 0; s <= total; ++s) {
    CHECK(lr_at(s, c, total) >= 0.0);
    if (s > 100) CHECK(lr_at(s, c, total) <= lr_at(s - 1, c, total));
  }
  CHECK_THROWS_AS(lr_at(0, c, 100), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(0, c, 50), std::invalid_argument);
}

TEST_CASE("adamw fixed point and closed form") {
  TrainConfig c;
  SUBCASE("zero gradient without decay") {
    ParamStore store;
    Rng rng(1);
    store.add_normal("w", {3, 4}, 1.0, rng, false);
    store.add_normal("b", {4}, 1.0, rng, false);
    const std::vector<double> before(store.get("w").values().begin(), store.get("w").values().end());
    auto m = AdamMoments::zeros_like(store);
    for (std::size_t t = 1; t <= 5; ++t) adamw_step(store, {std::vector<double>(12, 0.0), std::vector<double>(4, 0.0)}, m, 1e-2, t, c);
    CHECK(std::vector<double>(store.get("w").values().begin(), store.get("w").values().end()) == before);
  }
  SUBCASE("one and two steps from zero moments") {
    for (bool decay : {false, true}) {
      ParamStore store;
      const double w0 = 0.8, g1 = -0.3, g2 = 0.5, lr = 0.01;
      store.add("w", {1}, {w0}, decay);
      auto m = AdamMoments::zeros_like(store);
      adamw_step(store, {{g1}}, m, lr, 1, c);
      // Step 1: bias-corrected moments are g and g^2.
      const double wd = decay ? c.weight_decay : 0.0;
      const double w1 = w0 * (1 - lr * wd) - lr * g1 / (std::abs(g1) + c.adam_eps);
      CHECK(store.get("w").item() == doctest::Approx(w1).epsilon(1e-15));
      adamw_step(store, {{g2}}, m, lr, 2, c);
      const double m2 = c.beta1 * (1 - c.beta1) * g1 + (1 - c.beta1) * g2;
      const double v2 = c.beta2 * (1 - c.beta2) * g1 * g1 + (1 - c.beta2) * g2 * g2;
      const double mh = m2 / (1 - c.beta1 * c.beta1), vh = v2 / (1 - c.beta2 * c.beta2);
      const double w2 = w1 * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + c.adam_eps);
      CHECK(store.get("w").item() == doctest::Approx(w2).epsilon(1e-14));
    }
  }
  SUBCASE("errors") {
    ParamStore store;
    store.add("layer.weight", {2}, {1.0, 2.0}, true);
    auto m = AdamMoments::zeros_like(store);
    try {
      adamw_step(store, {{1.0, std::nan("")}}, m, 0.1, 1, c);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
    }
    CHECK_THROWS_AS(adamw_step(store, {}, m, 0.1, 1, c), std::invalid_argument);
    CHECK_THROWS_AS(adamw_step(store, {{0.0, 0.0}}, m, 0.1, 0, c), std::invalid_argument);
  }
}

TEST_CASE("global norm clipping") {
  std::vector<std::vector<double>> g{{3.0}, {0.0, 4.0}};
  CHECK(clip_global_norm(g, 10.0) == 5.0);
  CHECK(g[0][0] == 3.0);
  CHECK(clip_global_norm(g, 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g[1][1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("decay applies to matrices and embeddings only") {
  CaftModel model(tiny_run(40).model, 0);
  for (const auto& p : model.store().params()) {
    CAPTURE(p.name);
    const bool matrix = p.name.ends_with(".weight") || p.name == "text.tok_emb";
    CHECK(p.decay == matrix);
    if (matrix) CHECK(p.value.rank() == 2);
  }
}

TEST_CASE("steps per epoch and metrics rows") {
  CHECK(steps_per_epoch(8, 4) == 2);
  CHECK(steps_per_epoch(9, 4) == 3);
  CHECK(metrics_header() == "step,lr,part_loss,whole_loss,total,tau_p,tau_w\n");
  MetricsRow r{7, 0.1, 1.0 / 3, 2.5, 1.0 / 3 + 2.5, 0.07, 0.5};
  const std::string line = format_metrics(r);
  CHECK(line.back() == '\n');
  std::istringstream is(line);
  std::string cell;
  std::vector<double> cells;
  while (std::getline(is, cell, ',')) cells.push_back(std::stod(cell));
  REQUIRE(cells.size() == 7);
  CHECK(cells[0] == 7);
  CHECK(cells[2] == 1.0 / 3);
  CHECK(cells[5] == 0.07);
  const auto a = epoch_order(5, 0, 10), b = epoch_order(5, 1, 10);
  CHECK(a != b);
  CHECK(a == epoch_order(5, 0, 10));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("one epoch over 8 samples at batch 4 logs two steps") {
  RunConfig cfg = tiny_run(synth_vocabulary().size());
  cfg.train.epochs = 1;
  cfg.train.warmup_steps = 1;
  Corpus corpus(8, cfg.model);
  TrainState state = TrainState::fresh(cfg);
  std::vector<MetricsRow> rows;
  train(state, corpus.data, 1000, [&](const MetricsRow& r) { rows.push_back(r); });
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].step == 1);
  CHECK(rows[1].step == 2);
  CHECK(state.step == 2);
  for (const auto& r : rows) {
    CHECK(r.total == doctest::Approx(r.part_loss + r.whole_loss).epsilon(1e-15));
    CHECK(r.tau_p > 0);
    CHECK(r.tau_w > 0);
  }
  CHECK(rows[0].tau_p == doctest::Approx(0.07).epsilon(1e-3));
}

TEST_CASE("no-part variant leaves the pooling gradients at zero") {
  RunConfig cfg = tiny_run(synth_vocabulary().size());
  Corpus corpus(4, cfg.model);
  CaftModel model(cfg.model, 0);
  std::vector<CaptionSource> sources;
  std::vector<const PreparedImage*> images;
  for (std::size_t i = 0; i < 4; ++i) {
    CaptionSource src{corpus.samples[i].sentences, {}};
    for (const auto& c : corpus.samples[i].short_captions) src.other_captions.push_back({c});
    sources.push_back(src);
    images.push_back(&corpus.data.prepared[i]);
  }
  Rng rng(1);
  const auto batch = assemble_batch(sources, cfg.model.sub_captions, cfg.model.chunks, corpus.vocab,
                                    cfg.model.context_sub, rng);
  for (Variant v : {Variant::no_part, Variant::caft}) {
    Tape tape;
    TapeScope scope(tape);
    model.store().zero_grad();
    tape.backward(compute_losses(model, images, batch, v).total);
    double pool = 0.0, vision_fine = 0.0;
    for (auto& p : model.store().params()) {
      double s = 0.0;
      for (double g : p.value.grad()) s += std::abs(g);
      if (p.name.rfind("align.pool", 0) == 0 || p.name.rfind("align.part", 0) == 0) pool += s;
      if (p.name.rfind("vision.proj_fine", 0) == 0) vision_fine += s;
    }
    if (v == Variant::no_part) {
      CHECK(pool == 0.0);
      CHECK(vision_fine == 0.0);
    } else {
      CHECK(pool > 0.0);
      CHECK(vision_fine > 0.0);
    }
    tape.reset();
  }
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  RunConfig cfg = tiny_run(synth_vocabulary().size());
  Corpus corpus(12, cfg.model);
  auto run = [&](std::uint64_t steps) {
    TrainState s = TrainState::fresh(cfg);
    std::string log;
    train(s, corpus.data, steps, [&](const MetricsRow& r) { log += format_metrics(r); });
    return std::make_pair(encode_checkpoint(s), log);
  };
  const auto a = run(10), b = run(10);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);

  TrainState first = TrainState::fresh(cfg);
  std::string log;
  train(first, corpus.data, 4, [&](const MetricsRow& r) { log += format_metrics(r); });
  TrainState resumed = decode_checkpoint(encode_checkpoint(first));
  train(resumed, corpus.data, 10, [&](const MetricsRow& r) { log += format_metrics(r); });
  CHECK(resumed.step == 10);
  CHECK(encode_checkpoint(resumed) == a.first);
  CHECK(log == a.second);
}

TEST_CASE("checkpoint round trip and validation") {
  RunConfig cfg = tiny_run(synth_vocabulary().size());
  Corpus corpus(8, cfg.model);
  TrainState s = TrainState::fresh(cfg);
  train(s, corpus.data, 3);
  TempDir dir("ckpt");
  checkpoint_save(s, dir.str("a.bin"));
  TrainState back = checkpoint_load(dir.str("a.bin"), &cfg.model);
  checkpoint_save(back, dir.str("b.bin"));
  std::ifstream fa(dir.str("a.bin"), std::ios::binary), fb(dir.str("b.bin"), std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  const std::string bytes = sa.str();
  CHECK(bytes == sb.str());
  CHECK(back.step == 3);
  CHECK(back.rng == s.rng);
  CHECK(back.moments.m == s.moments.m);
  CHECK(back.moments.v == s.moments.v);
  REQUIRE(bytes.size() > 16);
  CHECK(bytes.substr(0, 4) == "CAFT");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  CHECK(version == kCheckpointVersion);

  ModelConfig wider = cfg.model;
  wider.dim = 16;
  CHECK_THROWS_AS(decode_checkpoint(bytes, &wider), CompatibilityError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), CompatibilityError);
  CHECK_THROWS_AS(decode_checkpoint("CAFX" + bytes.substr(4)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CheckpointError);
  Rng rng(4);
  for (int i = 0; i < 40; ++i) CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, rng.below(bytes.size()))), CheckpointError);
  std::string flipped = bytes;
  flipped[8] ^= 1;
  CHECK_THROWS_AS(decode_checkpoint(flipped), CheckpointError);
  CHECK_THROWS_AS(checkpoint_load(dir.str("missing.bin")), CheckpointError);

  // Variants share parameter shapes, so checkpoints move between them.
  RunConfig flat = cfg;
  flat.train.variant = Variant::flat_loss;
  TrainState fs = TrainState::fresh(flat);
  CHECK_NOTHROW(decode_checkpoint(encode_checkpoint(fs), &cfg.model));
}

TEST_CASE("desk model loss falls over the first 200 steps") {
  RunConfig cfg = RunConfig::preset("desk");
  const Vocabulary vocab = synth_vocabulary();
  cfg.model.vocab_size = vocab.size();
  const auto samples = generate(0, 256, cfg.model.image_size);
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const TrainData data = TrainData::build(samples, idx, cfg.model, Variant::caft, vocab);
  TrainState s = TrainState::fresh(cfg);
  std::vector<double> loss;
  train(s, data, 200, [&](const MetricsRow& r) { loss.push_back(r.total); });
  REQUIRE(loss.size() == 200);
  MESSAGE("step 1 loss " << loss.front() << ", step 200 loss " << loss.back());
  CHECK(loss.back() < loss.front());
}
