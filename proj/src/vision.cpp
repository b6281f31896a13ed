#include "caft/vision.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>
#include <string>

#include "caft/kernels.hpp"
#include "caft/ops.hpp"

namespace caft {

std::pair<std::size_t, std::size_t> grid_factors(std::size_t count, std::size_t height, std::size_t width) {
  if (count == 0) throw std::invalid_argument("grid_factors: count must be >= 1");
  std::pair<std::size_t, std::size_t> best{0, 0};
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t rows = 1; rows <= count; ++rows) {
    if (count % rows != 0) continue;
    const std::size_t cols = count / rows;
    if (rows > height || cols > width) continue;
    // Cell aspect (width / height) closest to square.
    const double aspect = (static_cast<double>(width) / cols) / (static_cast<double>(height) / rows);
    const double err = std::abs(std::log(aspect));
    if (err < best_err - 1e-12) {
      best_err = err;
      best = {rows, cols};
    }
  }
  if (best.first == 0) throw std::invalid_argument("grid_factors: no grid of " + std::to_string(count) + " cells fits");
  return best;
}

SuperpixelMap grid_map(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0 || rows > height || cols > width) throw std::invalid_argument("grid_map: bad grid");
  SuperpixelMap m{height, width, rows * cols, std::vector<std::uint32_t>(height * width)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      m.labels[y * width + x] = static_cast<std::uint32_t>((y * rows / height) * cols + x * cols / width);
  return m;
}

namespace {

constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

// 4-connected components of equal labels; returns component id per pixel.
std::vector<std::uint32_t> components(const SuperpixelMap& m, std::vector<std::vector<std::size_t>>& members) {
  const std::size_t h = m.height, w = m.width;
  std::vector<std::uint32_t> comp(h * w, kNone);
  members.clear();
  std::deque<std::size_t> queue;
  for (std::size_t p = 0; p < h * w; ++p) {
    if (comp[p] != kNone) continue;
    const auto id = static_cast<std::uint32_t>(members.size());
    members.emplace_back();
    comp[p] = id;
    queue.push_back(p);
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      members.back().push_back(q);
      const std::size_t y = q / w, x = q % w;
      const std::size_t nb[4] = {y > 0 ? q - w : q, y + 1 < h ? q + w : q, x > 0 ? q - 1 : q, x + 1 < w ? q + 1 : q};
      for (auto r : nb) {
        if (r != q && comp[r] == kNone && m.labels[r] == m.labels[q]) {
          comp[r] = id;
          queue.push_back(r);
        }
      }
    }
  }
  return comp;
}

// Keeps each label's largest component; other components join the label they
// share the longest border with.
void repair_connectivity(SuperpixelMap& m) {
  std::vector<std::vector<std::size_t>> members;
  const auto comp = components(m, members);
  const std::size_t h = m.height, w = m.width;
  std::vector<std::size_t> keeper(m.count, kNone);
  for (std::size_t c = 0; c < members.size(); ++c) {
    const auto lab = m.labels[members[c][0]];
    if (keeper[lab] == kNone || members[c].size() > members[keeper[lab]].size()) keeper[lab] = c;
  }
  std::vector<std::uint8_t> settled(members.size(), 0);
  for (std::size_t l = 0; l < m.count; ++l)
    if (keeper[l] != kNone) settled[keeper[l]] = 1;
  bool pending = true;
  while (pending) {
    pending = false;
    bool progress = false;
    for (std::size_t c = 0; c < members.size(); ++c) {
      if (settled[c]) continue;
      std::vector<std::size_t> border(m.count, 0);
      for (auto q : members[c]) {
        const std::size_t y = q / w, x = q % w;
        const std::size_t nb[4] = {y > 0 ? q - w : q, y + 1 < h ? q + w : q, x > 0 ? q - 1 : q,
                                   x + 1 < w ? q + 1 : q};
        for (auto r : nb)
          if (r != q && comp[r] != c && settled[comp[r]]) ++border[m.labels[r]];
      }
      std::size_t best = kNone, best_count = 0;
      for (std::size_t l = 0; l < m.count; ++l) {
        if (border[l] > best_count) {
          best = l;
          best_count = border[l];
        }
      }
      if (best == kNone) {
        pending = true;
        continue;
      }
      for (auto q : members[c]) m.labels[q] = static_cast<std::uint32_t>(best);
      settled[c] = 1;
      progress = true;
    }
    if (pending && !progress) throw std::logic_error("superpixel repair made no progress");
  }
}

// Splits the largest region in two until every label owns pixels.
void fill_empty_labels(SuperpixelMap& m) {
  const std::size_t h = m.height, w = m.width;
  for (;;) {
    std::vector<std::size_t> size(m.count, 0);
    for (auto l : m.labels) ++size[l];
    const auto empty = std::find(size.begin(), size.end(), 0);
    if (empty == size.end()) return;
    const auto fresh = static_cast<std::uint32_t>(empty - size.begin());
    const auto big = static_cast<std::uint32_t>(std::max_element(size.begin(), size.end()) - size.begin());
    std::size_t start = 0;
    while (m.labels[start] != big) ++start;
    std::vector<std::uint8_t> seen(h * w, 0);
    std::deque<std::size_t> queue{start};
    seen[start] = 1;
    std::vector<std::size_t> order;
    while (!queue.empty()) {
      const std::size_t q = queue.front();
      queue.pop_front();
      order.push_back(q);
      const std::size_t y = q / w, x = q % w;
      const std::size_t nb[4] = {y > 0 ? q - w : q, y + 1 < h ? q + w : q, x > 0 ? q - 1 : q, x + 1 < w ? q + 1 : q};
      for (auto r : nb) {
        if (r != q && !seen[r] && m.labels[r] == big) {
          seen[r] = 1;
          queue.push_back(r);
        }
      }
    }
    for (std::size_t i = 0; i < order.size() / 2; ++i) m.labels[order[i]] = fresh;
    repair_connectivity(m);
  }
}

// Regular grid when `count` factors into the image, otherwise rows of
// near-equal cell counts.
SuperpixelMap initial_map(std::size_t h, std::size_t w, std::size_t count) {
  for (std::size_t rows = 1; rows <= count; ++rows)
    if (count % rows == 0 && rows <= h && count / rows <= w) {
      const auto [r, c] = grid_factors(count, h, w);
      return grid_map(h, w, r, c);
    }
  const double ideal = std::sqrt(static_cast<double>(count) * static_cast<double>(h) / static_cast<double>(w));
  std::size_t rows = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(ideal)), 1, h);
  while ((count + rows - 1) / rows > w) ++rows;
  SuperpixelMap m{h, w, count, std::vector<std::uint32_t>(h * w)};
  std::size_t first = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t cols = count / rows + (r < count % rows ? 1 : 0);
    for (std::size_t y = r * h / rows; y < (r + 1) * h / rows; ++y)
      for (std::size_t x = 0; x < w; ++x) m.labels[y * w + x] = static_cast<std::uint32_t>(first + x * cols / w);
    first += cols;
  }
  return m;
}

void canonicalize(SuperpixelMap& m) {
  std::vector<std::uint32_t> remap(m.count, kNone);
  std::uint32_t next = 0;
  for (auto& l : m.labels) {
    if (remap[l] == kNone) remap[l] = next++;
    l = remap[l];
  }
}

}  // namespace

SuperpixelMap superpixelize(const ImageGrid& image, std::size_t count, std::size_t iterations,
                            double position_weight) {
  const std::size_t h = image.height, w = image.width, n = h * w;
  if (n == 0 || image.values.size() != n * 3) throw std::invalid_argument("superpixelize: malformed image");
  if (count == 0 || count * 4 > n) {
    throw std::invalid_argument("superpixelize: " + std::to_string(count) + " superpixels need at least " +
                                std::to_string(count * 4) + " pixels, image has " + std::to_string(n));
  }
  constexpr std::size_t F = 5;
  std::vector<double> feat(n * F);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* f = &feat[(y * w + x) * F];
      for (std::size_t c = 0; c < 3; ++c) f[c] = image.at(y, x, c);
      f[3] = position_weight * (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      f[4] = position_weight * (static_cast<double>(y) + 0.5) / static_cast<double>(h);
    }
  }
  const SuperpixelMap init = initial_map(h, w, count);
  std::vector<double> centers(count * F, 0.0);
  auto update_centers = [&](const std::vector<std::uint32_t>& labels) {
    std::vector<double> sum(count * F, 0.0);
    std::vector<std::size_t> cnt(count, 0);
    for (std::size_t p = 0; p < n; ++p) {
      ++cnt[labels[p]];
      for (std::size_t f = 0; f < F; ++f) sum[labels[p] * F + f] += feat[p * F + f];
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (cnt[k] == 0) continue;
      for (std::size_t f = 0; f < F; ++f) centers[k * F + f] = sum[k * F + f] / static_cast<double>(cnt[k]);
    }
  };
  update_centers(init.labels);
  std::vector<std::uint32_t> labels = init.labels;
  for (std::size_t it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t p = 0; p < n; ++p) {
      std::uint32_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < count; ++k) {
        double d = 0.0;
        for (std::size_t f = 0; f < F; ++f) {
          const double diff = feat[p * F + f] - centers[k * F + f];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = static_cast<std::uint32_t>(k);
        }
      }
      changed = changed || labels[p] != best;
      labels[p] = best;
    }
    if (!changed) break;
    update_centers(labels);
  }
  SuperpixelMap m{h, w, count, std::move(labels)};
  repair_connectivity(m);
  fill_empty_labels(m);
  canonicalize(m);
  return m;
}

std::vector<double> pixel_features(const ImageGrid& image) {
  const std::size_t h = image.height, w = image.width;
  std::vector<double> out(h * w * kPixelFeatures);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* f = &out[(y * w + x) * kPixelFeatures];
      std::size_t i = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1));
          const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(w) - 1));
          for (std::size_t c = 0; c < 3; ++c) f[i++] = image.at(yy, xx, c);
        }
      }
    }
  }
  return out;
}

PreparedImage prepare_with_map(const ImageGrid& image, SuperpixelMap map) {
  if (map.height != image.height || map.width != image.width) {
    throw std::invalid_argument("superpixel map does not match the image size");
  }
  const std::size_t n = image.height * image.width, S = map.count;
  const auto pf = pixel_features(image);
  PreparedImage out;
  out.features.assign(S * kPixelFeatures, 0.0);
  out.centroids.assign(S * 2, 0.0);
  std::vector<std::size_t> cnt(S, 0);
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t l = map.labels[p];
    if (l >= S) throw std::invalid_argument("superpixel label out of range");
    ++cnt[l];
    for (std::size_t f = 0; f < kPixelFeatures; ++f) out.features[l * kPixelFeatures + f] += pf[p * kPixelFeatures + f];
    out.centroids[l * 2] += static_cast<double>(p % image.width) + 0.5;
    out.centroids[l * 2 + 1] += static_cast<double>(p / image.width) + 0.5;
  }
  for (std::size_t l = 0; l < S; ++l) {
    if (cnt[l] == 0) throw std::invalid_argument("superpixel " + std::to_string(l) + " owns no pixels");
    const double c = static_cast<double>(cnt[l]);
    for (std::size_t f = 0; f < kPixelFeatures; ++f) out.features[l * kPixelFeatures + f] /= c;
    out.centroids[l * 2] /= c * static_cast<double>(image.width);
    out.centroids[l * 2 + 1] /= c * static_cast<double>(image.height);
  }
  out.map = std::move(map);
  return out;
}

PreparedImage prepare_image(const ImageGrid& image, const ModelConfig& cfg, Variant variant) {
  if (variant == Variant::plain_vit) {
    const auto [rows, cols] = grid_factors(cfg.superpixels, image.height, image.width);
    return prepare_with_map(image, grid_map(image.height, image.width, rows, cols));
  }
  return prepare_with_map(image, superpixelize(image, cfg.superpixels, cfg.kmeans_iters, cfg.position_weight));
}

std::vector<std::size_t> farthest_point_sample(const double* x, std::size_t rows, std::size_t cols, std::size_t k) {
  if (k == 0 || k > rows) throw std::invalid_argument("farthest_point_sample: bad sample count");
  std::vector<double> norm(rows);
  for (std::size_t i = 0; i < rows; ++i) norm[i] = std::max(std::sqrt(kernels::dot(x + i * cols, x + i * cols, cols)), 1e-12);
  auto dist = [&](std::size_t i, std::size_t j) {
    return 1.0 - kernels::dot(x + i * cols, x + j * cols, cols) / (norm[i] * norm[j]);
  };
  std::vector<std::size_t> picked{0};
  std::vector<std::uint8_t> used(rows, 0);
  used[0] = 1;
  std::vector<double> mind(rows);
  for (std::size_t i = 0; i < rows; ++i) mind[i] = dist(i, 0);
  while (picked.size() < k) {
    std::size_t best = rows;
    for (std::size_t i = 0; i < rows; ++i)
      if (!used[i] && (best == rows || mind[i] > mind[best])) best = i;
    picked.push_back(best);
    used[best] = 1;
    for (std::size_t i = 0; i < rows; ++i) mind[i] = std::min(mind[i], dist(i, best));
  }
  return picked;
}

std::vector<double> pixel_to_fine(const SegmentHierarchy& h, std::size_t b, const SuperpixelMap& map) {
  if (h.fine_path.empty()) throw std::invalid_argument("segment hierarchy has no assignment path");
  // Compose region -> fine token maps for image b.
  const Tensor& first = h.fine_path[0];
  std::size_t rows = first.dim(1), cols = first.dim(2);
  std::vector<double> acc(first.values().begin() + static_cast<std::ptrdiff_t>(b * rows * cols),
                          first.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * rows * cols));
  for (std::size_t s = 1; s < h.fine_path.size(); ++s) {
    const Tensor& a = h.fine_path[s];
    const std::size_t k = a.dim(1), n = a.dim(2);
    if (k != cols) throw ShapeError("assignment path extents do not chain");
    std::vector<double> next(rows * n, 0.0);
    kernels::serial::gemm_nn(rows, n, k, acc.data(), a.values().data() + b * k * n, next.data());
    acc = std::move(next);
    cols = n;
  }
  if (map.count != rows) throw ShapeError("superpixel map does not match the assignment path");
  std::vector<double> out(map.labels.size() * cols);
  for (std::size_t p = 0; p < map.labels.size(); ++p)
    std::copy_n(acc.begin() + static_cast<std::ptrdiff_t>(map.labels[p] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(p * cols));
  return out;
}

VisionEncoder::VisionEncoder(ParamStore& store, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.schedule.size() != 3) throw std::invalid_argument("vision encoder: schedule needs exactly 3 stages");
  std::size_t prev = cfg.superpixels;
  for (auto s : cfg.schedule) {
    if (s == 0 || s >= prev) throw std::invalid_argument("vision encoder: schedule must be strictly decreasing");
    prev = s;
  }
  const std::size_t C = cfg.dim;
  feat_proj_ = Linear::create(store, "vision.feat_proj", kPixelFeatures, C, rng);
  pos_proj_ = Linear::create(store, "vision.pos_proj", 2, C, rng);
  cls_ = store.add_normal("vision.cls", {1, C}, 0.02, rng, false);
  for (std::size_t s = 0; s <= cfg.schedule.size(); ++s) {
    stage_blocks_.emplace_back();
    for (std::size_t l = 0; l < cfg.stage_blocks; ++l) {
      stage_blocks_.back().emplace_back(store, "vision.stage" + std::to_string(s) + ".block" + std::to_string(l), C,
                                        cfg.heads, cfg.mlp_ratio, rng);
    }
    if (s < cfg.schedule.size()) {
      log_temp_.push_back(
          store.add_constant("vision.group" + std::to_string(s) + ".log_temp", {1}, std::log(cfg.group_temperature)));
      merge_blocks_.emplace_back(store, "vision.group" + std::to_string(s) + ".block", C, cfg.heads, cfg.mlp_ratio,
                                 rng);
    }
  }
  ln_fine_ = LayerNormParams::create(store, "vision.ln_fine", C);
  ln_final_ = LayerNormParams::create(store, "vision.ln_final", C);
  proj_fine_ = Linear::create(store, "vision.proj_fine", C, cfg.dim, rng, false);
  proj_coarse_ = Linear::create(store, "vision.proj_coarse", C, cfg.dim, rng, false);
}

Tensor VisionEncoder::superpixel_tokens(const std::vector<const PreparedImage*>& images) const {
  if (images.empty()) throw std::invalid_argument("superpixel_tokens: no images");
  const std::size_t B = images.size(), S = images[0]->map.count;
  std::vector<double> feats, cents;
  feats.reserve(B * S * kPixelFeatures);
  cents.reserve(B * S * 2);
  for (const auto* im : images) {
    if (im->map.count != S) throw ShapeError("superpixel_tokens: images in a batch need equal region counts");
    feats.insert(feats.end(), im->features.begin(), im->features.end());
    cents.insert(cents.end(), im->centroids.begin(), im->centroids.end());
  }
  const Tensor f = Tensor::from({B, S, kPixelFeatures}, std::move(feats));
  const Tensor c = Tensor::from({B, S, 2}, std::move(cents));
  return ops::add(feat_proj_(f), pos_proj_(c));
}

GroupResult VisionEncoder::group_stage(const Tensor& tokens, const Tensor& cls, std::size_t target,
                                       std::size_t stage) const {
  if (tokens.rank() != 3) throw ShapeError("group_stage: expected [batch, tokens, width], got " + shape_str(tokens.shape()));
  const std::size_t B = tokens.dim(0), M = tokens.dim(1), C = tokens.dim(2);
  if (target == 0 || target >= M) {
    throw std::invalid_argument("group_stage: target " + std::to_string(target) + " must lie in [1, " +
                                std::to_string(M) + ")");
  }
  std::vector<std::size_t> ids;
  ids.reserve(B * target);
  for (std::size_t b = 0; b < B; ++b) {
    for (auto i : farthest_point_sample(tokens.values().data() + b * M * C, M, C, target)) ids.push_back(b * M + i);
  }
  const Tensor centroids = ops::embedding_lookup(ops::reshape(tokens, {B * M, C}), ids, {B, target});
  const Tensor sim = ops::matmul(ops::l2_normalize_last(tokens), ops::transpose_last2(ops::l2_normalize_last(centroids)));
  const Tensor inv_temp = ops::exp(ops::scale(log_temp_.at(stage), -1.0));
  const Tensor assign = ops::softmax_last(ops::scale(sim, inv_temp));
  const Tensor pooled = ops::matmul(ops::transpose_last2(assign), tokens);
  const Tensor coarse = scale_rows(pooled, reciprocal(ops::sum_axis(assign, 1)));
  Tensor seq = merge_blocks_.at(stage)(ops::concat({cls, coarse}, 1));
  return GroupResult{ops::slice(seq, 1, 1, target + 1), assign, ops::slice(seq, 1, 0, 1)};
}

SegmentHierarchy VisionEncoder::encode(const std::vector<const PreparedImage*>& images, Variant variant) const {
  const std::size_t B = images.size(), C = cfg_.dim;
  SegmentHierarchy out;
  Tensor tokens = superpixel_tokens(images);
  Tensor cls = ops::embedding_lookup(cls_, std::vector<std::size_t>(B, 0), {B, 1});
  auto run_blocks = [&](std::size_t s) {
    Tensor seq = ops::concat({cls, tokens}, 1);
    for (const auto& blk : stage_blocks_[s]) seq = blk(seq);
    const std::size_t m = tokens.dim(1);
    cls = ops::slice(seq, 1, 0, 1);
    tokens = ops::slice(seq, 1, 1, m + 1);
    out.stage_tokens.push_back(tokens);
  };
  const bool grouped = variant != Variant::plain_vit;
  Tensor fine;
  run_blocks(0);
  for (std::size_t s = 0; s < cfg_.schedule.size(); ++s) {
    if (grouped) {
      GroupResult g = group_stage(tokens, cls, cfg_.schedule[s], s);
      tokens = g.tokens;
      cls = g.cls;
      out.assignments.push_back(g.assignment);
    } else {
      Tensor seq = merge_blocks_[s](ops::concat({cls, tokens}, 1));
      cls = ops::slice(seq, 1, 0, 1);
      tokens = ops::slice(seq, 1, 1, tokens.dim(1) + 1);
    }
    run_blocks(s + 1);
    if (s == 0) fine = tokens;
  }
  if (variant == Variant::flat_loss) {
    fine = tokens;
    out.fine_path = out.assignments;
  } else if (grouped) {
    fine = out.stage_tokens[1];
    out.fine_path = {out.assignments[0]};
  } else {
    // Strided subgrid of the top-layer patch tokens; each patch maps to the
    // subgrid token whose block contains it.
    const std::size_t S = cfg_.superpixels, F = cfg_.schedule[0];
    const std::size_t h = images[0]->map.height, w = images[0]->map.width;
    const auto [gy, gx] = grid_factors(S, h, w);
    const auto [fy, fx] = grid_factors(F, gy, gx);
    if (gy % fy != 0 || gx % fx != 0) throw std::invalid_argument("plain-vit: fine grid does not divide the patch grid");
    const std::size_t sy = gy / fy, sx = gx / fx;
    std::vector<std::size_t> ids;
    std::vector<double> path(B * S * F, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t r = 0; r < fy; ++r)
        for (std::size_t c = 0; c < fx; ++c) ids.push_back(b * S + (r * sy) * gx + c * sx);
      for (std::size_t p = 0; p < S; ++p) path[(b * S + p) * F + ((p / gx) / sy) * fx + (p % gx) / sx] = 1.0;
    }
    fine = ops::embedding_lookup(ops::reshape(tokens, {B * S, C}), ids, {B, F});
    out.fine_path = {Tensor::from({B, S, F}, std::move(path))};
  }
  out.cls = ops::reshape(cls, {B, C});
  out.v_fine = proj_fine_(ln_fine_(fine));
  out.v_coarse = proj_coarse_(ln_final_(out.cls));
  return out;
}

}  // namespace caft
