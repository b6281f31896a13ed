#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "caft/ops.hpp"
#include "caft/synthdata.hpp"
#include "caft/vision.hpp"
#include "support.hpp"

using namespace caft;
using caft::test::random_tensor;

namespace {

ImageGrid solid(std::size_t h, std::size_t w, double r, double g, double b) {
  ImageGrid im{h, w, std::vector<double>(h * w * 3)};
  for (std::size_t p = 0; p < h * w; ++p) {
    im.values[p * 3] = r;
    im.values[p * 3 + 1] = g;
    im.values[p * 3 + 2] = b;
  }
  return im;
}

void paint(ImageGrid& im, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1, const double rgb[3]) {
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x)
      for (std::size_t c = 0; c < 3; ++c) im.values[(y * im.width + x) * 3 + c] = rgb[c];
}

// Random rectangles over a random background, plus per-pixel noise.
ImageGrid random_image(Rng& rng, std::size_t h, std::size_t w) {
  ImageGrid im = solid(h, w, rng.uniform(), rng.uniform(), rng.uniform());
  const std::size_t rects = rng.below(6);
  for (std::size_t i = 0; i < rects; ++i) {
    const double rgb[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const std::size_t y0 = rng.below(h), x0 = rng.below(w);
    paint(im, y0, x0, y0 + 1 + rng.below(h - y0), x0 + 1 + rng.below(w - x0), rgb);
  }
  const double noise = rng.uniform(0.0, 0.3);
  for (auto& v : im.values) v = std::clamp(v + rng.uniform(-noise, noise), 0.0, 1.0);
  return im;
}

std::size_t component_count(const SuperpixelMap& m) {
  std::vector<std::uint8_t> seen(m.labels.size(), 0);
  std::size_t count = 0;
  for (std::size_t s = 0; s < m.labels.size(); ++s) {
    if (seen[s]) continue;
    ++count;
    std::vector<std::size_t> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      const std::size_t y = q / m.width, x = q % m.width;
      std::vector<std::size_t> nb;
      if (y > 0) nb.push_back(q - m.width);
      if (y + 1 < m.height) nb.push_back(q + m.width);
      if (x > 0) nb.push_back(q - 1);
      if (x + 1 < m.width) nb.push_back(q + 1);
      for (auto r : nb) {
        if (!seen[r] && m.labels[r] == m.labels[q]) {
          seen[r] = 1;
          stack.push_back(r);
        }
      }
    }
  }
  return count;
}

void check_map_invariants(const SuperpixelMap& m) {
  REQUIRE(m.labels.size() == m.height * m.width);
  std::vector<std::size_t> size(m.count, 0);
  for (auto l : m.labels) {
    REQUIRE(l < m.count);
    ++size[l];
  }
  for (auto s : size) CHECK(s >= 1);
  // One 4-connected component per label.
  CHECK(component_count(m) == m.count);
  // Labels appear in raster order.
  std::uint32_t next = 0;
  for (auto l : m.labels) {
    CHECK(l <= next);
    if (l == next) ++next;
  }
}

// Best 2-means partition among all straight column and row cuts, scored on
// the same (r, g, b, lambda x, lambda y) features.
struct Cut {
  bool vertical = true;
  std::size_t at = 0;
};

Cut best_straight_cut(const ImageGrid& im, double lambda) {
  const std::size_t h = im.height, w = im.width;
  auto feature = [&](std::size_t y, std::size_t x, std::size_t f) {
    if (f < 3) return im.at(y, x, f);
    if (f == 3) return lambda * (x + 0.5) / w;
    return lambda * (y + 0.5) / h;
  };
  auto sse = [&](auto side) {
    double total = 0.0;
    for (int part = 0; part < 2; ++part) {
      double mean[5] = {0, 0, 0, 0, 0};
      std::size_t n = 0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if (side(y, x) == part) {
            ++n;
            for (std::size_t f = 0; f < 5; ++f) mean[f] += feature(y, x, f);
          }
      for (auto& m : mean) m /= static_cast<double>(n);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if (side(y, x) == part)
            for (std::size_t f = 0; f < 5; ++f) total += std::pow(feature(y, x, f) - mean[f], 2);
    }
    return total;
  };
  Cut best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (std::size_t c = 1; c < w; ++c) {
    const double e = sse([&](std::size_t, std::size_t x) { return x < c ? 0 : 1; });
    if (e < best_sse) best_sse = e, best = {true, c};
  }
  for (std::size_t r = 1; r < h; ++r) {
    const double e = sse([&](std::size_t y, std::size_t) { return y < r ? 0 : 1; });
    if (e < best_sse) best_sse = e, best = {false, r};
  }
  return best;
}

ModelConfig vision_config() {
  ModelConfig m = caft::test::tiny_model(10);
  m.image_size = 16;
  m.superpixels = 16;
  m.schedule = {8, 4, 2};
  return m;
}

std::vector<const PreparedImage*> ptrs(const std::vector<PreparedImage>& v) {
  std::vector<const PreparedImage*> out;
  for (const auto& p : v) out.push_back(&p);
  return out;
}

}  // namespace

TEST_CASE("grid factors and grid maps") {
  CHECK(grid_factors(64, 32, 32) == std::pair<std::size_t, std::size_t>{8, 8});
  CHECK(grid_factors(196, 224, 224) == std::pair<std::size_t, std::size_t>{14, 14});
  CHECK(grid_factors(8, 16, 32) == std::pair<std::size_t, std::size_t>{2, 4});
  CHECK_THROWS_AS(grid_factors(0, 4, 4), std::invalid_argument);
  const auto m = grid_map(4, 6, 2, 3);
  CHECK(m.labels == std::vector<std::uint32_t>{0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 3, 3, 4, 4, 5, 5});
  check_map_invariants(m);
}

TEST_CASE("uniform image keeps the initial grid") {
  const auto m = superpixelize(solid(16, 16, 0.3, 0.6, 0.9), 4, 10);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) CHECK(m.labels[y * 16 + x] == (y / 8) * 2 + x / 8);
}

TEST_CASE("two-colour images split where the 2-means oracle cuts") {
  const double red[3] = {1, 0, 0};
  for (std::size_t split : {8u, 5u, 11u}) {
    CAPTURE(split);
    ImageGrid im = solid(16, 16, 0, 0, 1);
    paint(im, 0, 0, 16, split, red);
    const Cut cut = best_straight_cut(im, 0.5);
    REQUIRE(cut.vertical);
    CHECK(cut.at == split);
    const auto m = superpixelize(im, 2, 10);
    check_map_invariants(m);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        if (x + 1 < cut.at) CHECK(m.labels[y * 16 + x] == 0);
        if (x > cut.at) CHECK(m.labels[y * 16 + x] == 1);
      }
  }
}

TEST_CASE("superpixel maps satisfy their invariants on random images") {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 8 + rng.below(25), w = 8 + rng.below(25);
    const std::size_t count = 1 + rng.below(std::min<std::size_t>(h * w / 4, 80));
    const ImageGrid im = random_image(rng, h, w);
    CAPTURE(trial);
    const auto m = superpixelize(im, count, 1 + rng.below(10), rng.uniform(0.1, 2.0));
    CHECK(m.count == count);
    check_map_invariants(m);
  }
}

TEST_CASE("superpixelize is deterministic and validates its input") {
  Rng rng(5);
  const ImageGrid im = random_image(rng, 32, 32);
  CHECK(superpixelize(im, 64, 10) == superpixelize(im, 64, 10));
  CHECK_THROWS_AS(superpixelize(im, 257, 10), std::invalid_argument);
  CHECK_NOTHROW(superpixelize(im, 256, 2));
  CHECK_THROWS_AS(superpixelize(im, 0, 10), std::invalid_argument);
}

TEST_CASE("superpixels follow the synthetic shapes") {
  // Nearly every superpixel is dominated by one object mask or the background.
  std::size_t pure = 0, total = 0;
  for (const auto& s : generate(2, 20, 32)) {
    const auto m = superpixelize(s.image, 64, 10);
    std::vector<std::vector<std::size_t>> hits(m.count, std::vector<std::size_t>(s.masks.size() + 1, 0));
    for (std::size_t p = 0; p < m.labels.size(); ++p) {
      std::size_t owner = s.masks.size();
      for (std::size_t o = 0; o < s.masks.size(); ++o)
        if (s.masks[o].pixels[p]) owner = o;
      ++hits[m.labels[p]][owner];
    }
    for (const auto& h : hits) {
      const std::size_t n = std::accumulate(h.begin(), h.end(), std::size_t{0});
      pure += *std::max_element(h.begin(), h.end()) * 10 >= n * 8 ? 1 : 0;
      ++total;
    }
  }
  CHECK(static_cast<double>(pure) / total >= 0.9);
}

TEST_CASE("pixel features and region statistics") {
  Rng rng(8);
  const ImageGrid im = random_image(rng, 5, 7);
  const auto pf = pixel_features(im);
  REQUIRE(pf.size() == 35 * kPixelFeatures);
  // Corner pixel: clamped neighbourhood repeats the corner.
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(pf[c] == im.at(0, 0, c));
    CHECK(pf[4 * 3 + c] == im.at(0, 0, c));
    CHECK(pf[8 * 3 + c] == im.at(1, 1, c));
  }
  const auto prep = prepare_with_map(im, grid_map(5, 7, 1, 1));
  CHECK(prep.centroids[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(prep.centroids[1] == doctest::Approx(0.5).epsilon(1e-15));
  for (std::size_t f = 0; f < kPixelFeatures; ++f) {
    double mean = 0.0;
    for (std::size_t p = 0; p < 35; ++p) mean += pf[p * kPixelFeatures + f];
    CHECK(prep.features[f] == doctest::Approx(mean / 35).epsilon(1e-13));
  }
  CHECK_THROWS_AS(prepare_with_map(im, grid_map(4, 7, 1, 1)), std::invalid_argument);
}

TEST_CASE("superpixel tokens: degenerate pooling and equivariance") {
  const ModelConfig cfg = vision_config();
  ParamStore store;
  Rng rng(9);
  VisionEncoder enc(store, cfg, rng);
  NoGradGuard guard;
  const ImageGrid im = random_image(rng, 16, 16);
  const auto single = prepare_with_map(im, grid_map(16, 16, 1, 1));
  const Tensor tok = enc.superpixel_tokens({&single});
  REQUIRE(tok.shape() == Shape{1, 1, cfg.dim});
  const auto& wf = store.get("vision.feat_proj.weight");
  const auto& bf = store.get("vision.feat_proj.bias");
  const auto& wp = store.get("vision.pos_proj.weight");
  const auto& bp = store.get("vision.pos_proj.bias");
  const auto pf = pixel_features(im);
  for (std::size_t d = 0; d < cfg.dim; ++d) {
    long double expect = bf.at(d) + bp.at(d) + 0.5L * wp.at(d) + 0.5L * wp.at(cfg.dim + d);
    for (std::size_t f = 0; f < kPixelFeatures; ++f) {
      long double mean = 0;
      for (std::size_t p = 0; p < 256; ++p) mean += pf[p * kPixelFeatures + f];
      expect += mean / 256 * wf.at(f * cfg.dim + d);
    }
    CHECK(tok.at(d) == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));
  }

  // Relabelling regions permutes token rows.
  SuperpixelMap m = superpixelize(im, 16, 5);
  const auto base = prepare_with_map(im, m);
  std::vector<std::uint32_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0u);
  rng.shuffle(perm);
  SuperpixelMap relabeled = m;
  for (auto& l : relabeled.labels) l = perm[l];
  const auto moved = prepare_with_map(im, relabeled);
  const Tensor a = enc.superpixel_tokens({&base}), b = enc.superpixel_tokens({&moved});
  for (std::size_t s = 0; s < 16; ++s)
    for (std::size_t d = 0; d < cfg.dim; ++d) CHECK(b.at(perm[s] * cfg.dim + d) == a.at(s * cfg.dim + d));
}

TEST_CASE("farthest point sampling") {
  // Rows: e1, e1-ish, e2, -e1, e2-ish.
  const std::vector<double> x{1, 0, 0.9, 0.1, 0, 1, -1, 0, 0.1, 0.9};
  CHECK(farthest_point_sample(x.data(), 5, 2, 1) == std::vector<std::size_t>{0});
  CHECK(farthest_point_sample(x.data(), 5, 2, 2) == std::vector<std::size_t>{0, 3});
  CHECK(farthest_point_sample(x.data(), 5, 2, 3) == std::vector<std::size_t>{0, 3, 2});
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 2 + rng.below(30), k = 1 + rng.below(rows);
    const auto v = caft::test::random_values(rng, rows * 4);
    const auto picks = farthest_point_sample(v.data(), rows, 4, k);
    CHECK(picks.size() == k);
    CHECK(picks[0] == 0);
    CHECK(std::set<std::size_t>(picks.begin(), picks.end()).size() == k);
  }
  CHECK_THROWS_AS(farthest_point_sample(x.data(), 5, 2, 6), std::invalid_argument);
}

TEST_CASE("grouping separates two planted clusters") {
  const ModelConfig cfg = vision_config();
  ParamStore store;
  Rng rng(12);
  VisionEncoder enc(store, cfg, rng);
  Tensor log_temp = enc.log_temperature(0);
  log_temp.mutable_values()[0] = std::log(0.05);
  NoGradGuard guard;
  const double tau = 0.05;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 6 + rng.below(10), C = cfg.dim;
    std::vector<int> cluster(M);
    std::vector<double> v(M * C);
    // Two random orthogonal directions, each token a small perturbation of one.
    auto a = caft::test::random_values(rng, C), b = caft::test::random_values(rng, C);
    const double ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0) /
                      std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
    for (std::size_t d = 0; d < C; ++d) b[d] -= ab * a[d];
    for (std::size_t i = 0; i < M; ++i) {
      cluster[i] = i == 0 ? 0 : static_cast<int>(rng.below(2));
      if (i == 1) cluster[i] = 1;
      const auto& dir = cluster[i] == 0 ? a : b;
      const double scale = rng.uniform(0.5, 2.0);
      for (std::size_t d = 0; d < C; ++d) v[i * C + d] = scale * (dir[d] + rng.uniform(-0.005, 0.005));
    }
    auto cosine = [&](std::size_t i, std::size_t j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t d = 0; d < C; ++d) {
        dot += v[i * C + d] * v[j * C + d];
        ni += v[i * C + d] * v[i * C + d];
        nj += v[j * C + d] * v[j * C + d];
      }
      return dot / std::sqrt(ni * nj);
    };
    double intra = 1.0, inter = -1.0;
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < M; ++j)
        (cluster[i] == cluster[j] ? intra = std::min(intra, cosine(i, j)) : inter = std::max(inter, cosine(i, j)));
    REQUIRE(intra - inter > 0.9);
    // With one centroid per cluster the own-cluster mass is at least
    // 1 / (1 + exp(-(intra - inter) / tau)).
    const double bound = 1.0 / (1.0 + std::exp(-(intra - inter) / tau));
    REQUIRE(bound >= 0.99);

    const Tensor tokens = Tensor::from({1, M, C}, v);
    const Tensor cls = random_tensor(rng, {1, 1, C}, false);
    const GroupResult g = enc.group_stage(tokens, cls, 2, 0);
    REQUIRE(g.assignment.shape() == Shape{1, M, 2});
    REQUIRE(g.tokens.shape() == Shape{1, 2, C});
    REQUIRE(g.cls.shape() == Shape{1, 1, C});
    // Centroid 0 is token 0 (cluster 0); centroid 1 comes from cluster 1.
    for (std::size_t i = 0; i < M; ++i) {
      const double own = g.assignment.at(i * 2 + static_cast<std::size_t>(cluster[i]));
      CHECK(own >= bound - 1e-12);
      CHECK(own >= 0.99);
    }
  }
}

TEST_CASE("group_stage target bounds and row sums") {
  const ModelConfig cfg = vision_config();
  ParamStore store;
  Rng rng(13);
  VisionEncoder enc(store, cfg, rng);
  NoGradGuard guard;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t B = 1 + rng.below(3), M = 2 + rng.below(12);
    const Tensor tokens = random_tensor(rng, {B, M, cfg.dim}, false);
    const Tensor cls = random_tensor(rng, {B, 1, cfg.dim}, false);
    const std::size_t target = trial % 2 == 0 ? M - 1 : 1 + rng.below(M - 1);
    const GroupResult g = enc.group_stage(tokens, cls, target, trial % 3);
    for (std::size_t r = 0; r < B * M; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < target; ++k) {
        CHECK(g.assignment.at(r * target + k) >= 0.0);
        s += g.assignment.at(r * target + k);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    CHECK_THROWS_AS(enc.group_stage(tokens, cls, M, 0), std::invalid_argument);
    CHECK_THROWS_AS(enc.group_stage(tokens, cls, 0, 0), std::invalid_argument);
  }
}

TEST_CASE("encoder output shapes for the presets") {
  SUBCASE("desk") {
    ModelConfig cfg = RunConfig::preset("desk").model;
    cfg.vocab_size = 10;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.stage_blocks = 1;
    ParamStore store;
    Rng rng(1);
    VisionEncoder enc(store, cfg, rng);
    NoGradGuard guard;
    std::vector<PreparedImage> imgs;
    for (const auto& s : generate(0, 2, cfg.image_size)) imgs.push_back(prepare_image(s.image, cfg, Variant::caft));
    const auto h = enc.encode(ptrs(imgs), Variant::caft);
    CHECK(h.v_fine.shape() == Shape{2, 16, 8});
    CHECK(h.v_coarse.shape() == Shape{2, 8});
    REQUIRE(h.stage_tokens.size() == 4);
    CHECK(h.stage_tokens[0].dim(1) == 64);
    CHECK(h.stage_tokens[1].dim(1) == 16);
    CHECK(h.stage_tokens[2].dim(1) == 8);
    CHECK(h.stage_tokens[3].dim(1) == 4);
    CHECK(h.assignments.size() == 3);
  }
  SUBCASE("paper schedule") {
    ModelConfig cfg = RunConfig::preset("paper").model;
    cfg.vocab_size = 10;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 1;
    cfg.stage_blocks = 1;
    cfg.image_size = 56;
    cfg.kmeans_iters = 2;
    ParamStore store;
    Rng rng(1);
    VisionEncoder enc(store, cfg, rng);
    NoGradGuard guard;
    const auto s = generate(0, 1, 56);
    const auto prep = prepare_image(s[0].image, cfg, Variant::caft);
    const auto h = enc.encode({&prep}, Variant::caft);
    CHECK(h.stage_tokens[0].dim(1) == 196);
    CHECK(h.v_fine.shape() == Shape{1, 64, 8});
    CHECK(h.v_coarse.shape() == Shape{1, 8});
  }
}

TEST_CASE("composed pixel assignments are distributions") {
  const ModelConfig cfg = vision_config();
  ParamStore store;
  Rng rng(14);
  VisionEncoder enc(store, cfg, rng);
  NoGradGuard guard;
  for (Variant variant : {Variant::caft, Variant::flat_loss, Variant::plain_vit}) {
    CAPTURE(variant_name(variant));
    std::vector<PreparedImage> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(prepare_image(random_image(rng, 16, 16), cfg, variant));
    const auto h = enc.encode(ptrs(imgs), variant);
    const std::size_t fine = h.v_fine.dim(1);
    CHECK(fine == (variant == Variant::flat_loss ? cfg.schedule.back() : cfg.schedule.front()));
    for (const auto& a : h.assignments)
      for (std::size_t r = 0; r < a.numel() / a.dim(2); ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.dim(2); ++k) s += a.at(r * a.dim(2) + k);
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
    for (std::size_t b = 0; b < imgs.size(); ++b) {
      const auto p = pixel_to_fine(h, b, imgs[b].map);
      REQUIRE(p.size() == 256 * fine);
      for (std::size_t px = 0; px < 256; ++px) {
        double s = 0.0;
        for (std::size_t k = 0; k < fine; ++k) {
          CHECK(p[px * fine + k] >= 0.0);
          s += p[px * fine + k];
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("encoding is deterministic") {
  const ModelConfig cfg = vision_config();
  auto run = [&] {
    ParamStore store;
    Rng rng(15);
    VisionEncoder enc(store, cfg, rng);
    NoGradGuard guard;
    Rng img_rng(16);
    std::vector<PreparedImage> imgs;
    for (int i = 0; i < 2; ++i) imgs.push_back(prepare_image(random_image(img_rng, 16, 16), cfg, Variant::caft));
    const auto h = enc.encode(ptrs(imgs), Variant::caft);
    std::vector<double> out(h.v_fine.values().begin(), h.v_fine.values().end());
    out.insert(out.end(), h.v_coarse.values().begin(), h.v_coarse.values().end());
    for (const auto& a : h.assignments) out.insert(out.end(), a.values().begin(), a.values().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("vision encoder gradients match finite differences") {
  const ModelConfig cfg = vision_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ParamStore store;
    Rng rng(200 + seed);
    VisionEncoder enc(store, cfg, rng);
    std::vector<PreparedImage> imgs;
    for (int i = 0; i < 2; ++i) imgs.push_back(prepare_image(random_image(rng, 16, 16), cfg, Variant::caft));
    const auto images = ptrs(imgs);
    const Tensor wc = random_tensor(rng, {2, cfg.dim}, false);
    const Tensor wf = random_tensor(rng, {2, cfg.schedule[0], cfg.dim}, false);
    auto coarse = [&] { return caft::test::weighted_sum(enc.encode(images, Variant::caft).v_coarse, wc); };
    auto fine = [&] { return caft::test::weighted_sum(enc.encode(images, Variant::caft).v_fine, wf); };
    const std::vector<Tensor> proj{store.get("vision.feat_proj.weight"), store.get("vision.pos_proj.weight")};
    auto r = caft::test::check_gradients(coarse, proj, 12, seed);
    CHECK_MESSAGE(r.worst < caft::test::kFdTolerance, r.where);
    r = caft::test::check_gradients(fine, proj, 12, seed + 50);
    CHECK_MESSAGE(r.worst < caft::test::kFdTolerance, r.where);
    const Tensor wt = random_tensor(rng, {2, cfg.superpixels, cfg.dim}, false);
    auto tokens = [&] { return caft::test::weighted_sum(enc.superpixel_tokens(images), wt); };
    r = caft::test::check_gradients(tokens, proj, 0, seed);
    CHECK_MESSAGE(r.worst < caft::test::kFdTolerance, r.where);
  }
}
