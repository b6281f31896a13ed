#include "caft/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "caft/ops.hpp"

namespace caft {

std::size_t argmax_lowest(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

double recall_at_1(const std::vector<double>& scores, std::size_t queries, std::size_t candidates,
                   const std::vector<std::size_t>& truth) {
  if (queries == 0 || candidates == 0) throw std::invalid_argument("recall_at_1: empty score matrix");
  if (scores.size() != queries * candidates || truth.size() != queries) {
    throw std::invalid_argument("recall_at_1: size mismatch");
  }
  std::size_t hits = 0;
  for (std::size_t q = 0; q < queries; ++q) {
    if (truth[q] >= candidates) throw std::invalid_argument("recall_at_1: truth index out of range");
    if (argmax_lowest(&scores[q * candidates], candidates) == truth[q]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(queries);
}

// Values within this many bins below an edge are binned on the edge.
constexpr double kBinSnap = 1e-9;

std::vector<int> otsu_bins(const std::vector<double>& heatmap) {
  if (heatmap.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(heatmap.begin(), heatmap.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  std::vector<int> bins(heatmap.size(), 0);
  if (!(range > 0.0)) return bins;
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    const double u = (heatmap[i] - lo) / range;
    bins[i] = std::clamp(static_cast<int>(std::floor(u * 256.0 + kBinSnap)), 0, 255);
  }
  return bins;
}

OtsuResult otsu_threshold(const std::vector<double>& heatmap) {
  OtsuResult r;
  r.mask.assign(heatmap.size(), 0);
  for (double v : heatmap)
    if (!std::isfinite(v)) throw NumericError("otsu_threshold: non-finite heatmap value");
  if (heatmap.empty() || std::all_of(heatmap.begin(), heatmap.end(), [&](double v) { return v == heatmap[0]; })) {
    r.degenerate = true;
    return r;
  }
  const auto bins = otsu_bins(heatmap);
  std::uint64_t count[256] = {}, total_w = 0, total_s = 0;
  for (int b : bins) {
    ++count[b];
    ++total_w;
    total_s += static_cast<std::uint64_t>(b);
  }
  // Between-class variance times n^2 is (w0*S1 - w1*S0)^2 / (w0*w1); compare
  // candidates by cross-multiplication so ties are exact.
  using u128 = unsigned __int128;
  u128 best_num = 0, best_den = 1;
  std::uint64_t w0 = 0, s0 = 0;
  for (int t = 0; t < 255; ++t) {
    w0 += count[t];
    s0 += count[t] * static_cast<std::uint64_t>(t);
    const std::uint64_t w1 = total_w - w0, s1 = total_s - s0;
    if (w0 == 0 || w1 == 0) continue;
    const u128 a = static_cast<u128>(w0) * s1, b = static_cast<u128>(w1) * s0;
    const u128 diff = a > b ? a - b : b - a;
    const u128 num = diff * diff;
    const u128 den = static_cast<u128>(w0) * w1;
    if (r.threshold < 0 || num * best_den > best_num * den) {
      best_num = num;
      best_den = den;
      r.threshold = t;
    }
  }
  for (std::size_t i = 0; i < bins.size(); ++i) r.mask[i] = bins[i] > r.threshold ? 1 : 0;
  return r;
}

double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const std::vector<std::vector<std::uint8_t>>& preds, const std::vector<std::vector<std::uint8_t>>& truths) {
  if (preds.size() != truths.size()) throw std::invalid_argument("miou: query counts differ");
  if (preds.empty()) throw std::invalid_argument("miou: no queries");
  std::vector<double> v;
  for (std::size_t i = 0; i < preds.size(); ++i) v.push_back(iou(preds[i], truths[i]));
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> project_heatmap(const std::vector<double>& pixel_map, const std::vector<double>& weights) {
  const std::size_t m = weights.size();
  if (m == 0 || pixel_map.size() % m != 0) throw std::invalid_argument("project_heatmap: size mismatch");
  const std::size_t n = pixel_map.size() / m;
  std::vector<double> h(n, 0.0);
  double total = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += pixel_map[p * m + k] * weights[k];
    h[p] = s;
    total += s;
  }
  if (!(total > 0.0)) throw NumericError("project_heatmap: heatmap has no mass");
  for (double& x : h) x /= total;
  return h;
}

double mass_inside(const std::vector<double>& heatmap, const std::vector<std::uint8_t>& mask) {
  if (heatmap.size() != mask.size()) throw std::invalid_argument("mass_inside: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) s += heatmap[i];
  return s;
}

std::vector<std::uint8_t> binary_mask(const GrayImage& image) {
  std::vector<std::uint8_t> m(image.pixels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = image.pixels[i] > 127 ? 1 : 0;
  return m;
}

GrayImage heatmap_image(const std::vector<double>& heatmap, std::size_t height, std::size_t width) {
  if (heatmap.size() != height * width) throw std::invalid_argument("heatmap_image: size mismatch");
  GrayImage g{height, width, std::vector<std::uint8_t>(heatmap.size(), 0)};
  const double hi = heatmap.empty() ? 0.0 : *std::max_element(heatmap.begin(), heatmap.end());
  if (hi > 0.0)
    for (std::size_t i = 0; i < heatmap.size(); ++i)
      g.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::max(0.0, heatmap[i]) / hi));
  return g;
}

GrayImage mask_image(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
  if (mask.size() != height * width) throw std::invalid_argument("mask_image: size mismatch");
  GrayImage g{height, width, std::vector<std::uint8_t>(mask.size(), 0)};
  for (std::size_t i = 0; i < mask.size(); ++i) g.pixels[i] = mask[i] ? 255 : 0;
  return g;
}

namespace {

struct EncodedImages {
  std::size_t count = 0, tokens = 0, dim = 0;
  std::vector<double> coarse;  // [count, dim]
  std::vector<double> fine;    // [count, tokens, dim]
  std::vector<std::vector<double>> pixel_maps;
};

EncodedImages encode_images(const CaftModel& model, Variant variant, const std::vector<const PreparedImage*>& images,
                            std::size_t chunk, bool keep_pixel_maps) {
  NoGradGuard no_grad;
  EncodedImages out;
  out.count = images.size();
  out.dim = model.config().dim;
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    const std::vector<const PreparedImage*> part(images.begin() + static_cast<std::ptrdiff_t>(begin),
                                                 images.begin() + static_cast<std::ptrdiff_t>(end));
    const SegmentHierarchy h = model.vision().encode(part, variant);
    out.tokens = h.v_fine.dim(1);
    out.coarse.insert(out.coarse.end(), h.v_coarse.values().begin(), h.v_coarse.values().end());
    out.fine.insert(out.fine.end(), h.v_fine.values().begin(), h.v_fine.values().end());
    if (keep_pixel_maps)
      for (std::size_t b = 0; b < part.size(); ++b) out.pixel_maps.push_back(pixel_to_fine(h, b, part[b]->map));
  }
  return out;
}

Tensor fine_block(const EncodedImages& e, std::size_t begin, std::size_t end) {
  const std::size_t stride = e.tokens * e.dim;
  return Tensor::from({end - begin, e.tokens, e.dim},
                      std::vector<double>(e.fine.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                          e.fine.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

ScoreMatrices score_encoded(const CaftModel& model, Variant variant, const EncodedImages& enc,
                            const std::vector<const AnnotatedSample*>& samples, const Vocabulary& vocab,
                            std::size_t image_chunk) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const std::size_t I = enc.count, J = samples.size(), N = cfg.chunks, D = cfg.dim;
  ScoreMatrices s{I, J, std::vector<double>(I * J, 0.0), std::vector<double>(I * J, 0.0)};

  // Captions: balanced chunks, sub-caption embeddings, whole embeddings.
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::uint8_t> mask;
  for (const auto* smp : samples) {
    const Chunking ch = chunk_balanced(smp->sentences.size(), N);
    const CaptionHierarchy h = build_caption(smp->sentences, ch, vocab, cfg.context_sub);
    tokens.insert(tokens.end(), h.token_ids.begin(), h.token_ids.end());
    mask.insert(mask.end(), ch.mask.begin(), ch.mask.end());
  }
  std::vector<double> t_sub, t_whole;
  const std::size_t caption_chunk = 64;
  for (std::size_t begin = 0; begin < J; begin += caption_chunk) {
    const std::size_t end = std::min(J, begin + caption_chunk);
    const std::vector<std::vector<std::size_t>> rows(tokens.begin() + static_cast<std::ptrdiff_t>(begin * N),
                                                     tokens.begin() + static_cast<std::ptrdiff_t>(end * N));
    const Tensor ts = model.text().encode_sub(rows);
    t_sub.insert(t_sub.end(), ts.values().begin(), ts.values().end());
    Tensor tw;
    if (variant == Variant::flat_text) {
      std::vector<std::vector<std::size_t>> flat;
      for (std::size_t j = begin; j < end; ++j)
        flat.push_back(flat_caption_tokens(samples[j]->sentences, vocab, cfg.context_sub));
      tw = model.text().encode_sub(flat);
    } else {
      const std::vector<std::uint8_t> m(mask.begin() + static_cast<std::ptrdiff_t>(begin * N),
                                        mask.begin() + static_cast<std::ptrdiff_t>(end * N));
      tw = model.text().encode_whole(model.text().adapt(ops::reshape(ts, {end - begin, N, D})), m);
    }
    t_whole.insert(t_whole.end(), tw.values().begin(), tw.values().end());
  }

  const Tensor vc = Tensor::from({I, D}, enc.coarse);
  const Tensor twt = Tensor::from({J, D}, t_whole);
  const Tensor whole = ops::matmul(ops::l2_normalize_last(vc), ops::transpose_last2(ops::l2_normalize_last(twt)));
  std::copy(whole.values().begin(), whole.values().end(), s.whole.begin());

  std::vector<double> qv;
  std::vector<std::size_t> owner;
  for (std::size_t r = 0; r < J * N; ++r) {
    if (!mask[r]) continue;
    qv.insert(qv.end(), t_sub.begin() + static_cast<std::ptrdiff_t>(r * D),
              t_sub.begin() + static_cast<std::ptrdiff_t>((r + 1) * D));
    owner.push_back(r / N);
  }
  const std::size_t Q = owner.size();
  const Tensor queries = Tensor::from({Q, D}, std::move(qv));
  for (std::size_t begin = 0; begin < I; begin += image_chunk) {
    const std::size_t end = std::min(I, begin + image_chunk);
    const PoolResult pool = model.head().attn_pool(queries, fine_block(enc, begin, end));
    const Tensor cos = pooled_cosine(pool.v_tg, queries);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t q = 0; q < Q; ++q) s.part[i * J + owner[q]] += cos.at((i - begin) * Q + q);
  }
  return s;
}

std::vector<const AnnotatedSample*> sorted_by_id(std::vector<const AnnotatedSample*> v) {
  std::sort(v.begin(), v.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  return v;
}

RetrievalResult retrieval(const std::vector<double>& scores, std::size_t n, double alpha) {
  std::vector<std::size_t> truth(n);
  std::iota(truth.begin(), truth.end(), 0);
  std::vector<double> transposed(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) transposed[j * n + i] = scores[i * n + j];
  return RetrievalResult{alpha, recall_at_1(scores, n, n, truth), recall_at_1(transposed, n, n, truth)};
}

}  // namespace

ScoreMatrices score_corpus(const CaftModel& model, Variant variant, const std::vector<const AnnotatedSample*>& samples,
                           const std::vector<const PreparedImage*>& prepared, const Vocabulary& vocab,
                           std::size_t image_chunk) {
  if (samples.size() != prepared.size()) throw std::invalid_argument("score_corpus: image and caption counts differ");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return samples[a]->id < samples[b]->id; });
  std::vector<const AnnotatedSample*> s;
  std::vector<const PreparedImage*> p;
  for (auto i : order) {
    s.push_back(samples[i]);
    p.push_back(prepared[i]);
  }
  const EncodedImages enc = encode_images(model, variant, p, image_chunk, false);
  return score_encoded(model, variant, enc, s, vocab, image_chunk);
}

EvalReport evaluate(const CaftModel& model, Variant variant, std::vector<const AnnotatedSample*> samples,
                    const Vocabulary& vocab, const EvalOptions& options, std::size_t corpus_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty test set");
  for (double a : options.alphas)
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  samples = sorted_by_id(std::move(samples));
  std::vector<PreparedImage> prepared;
  prepared.reserve(samples.size());
  for (const auto* s : samples) prepared.push_back(prepare_image(s->image, model.config(), variant));
  std::vector<const PreparedImage*> ptrs;
  for (const auto& p : prepared) ptrs.push_back(&p);

  const EncodedImages enc = encode_images(model, variant, ptrs, options.image_chunk, options.grounding);
  const ScoreMatrices sm = score_encoded(model, variant, enc, samples, vocab, options.image_chunk);
  const std::size_t n = samples.size();

  EvalReport report;
  for (double a : options.alphas) {
    const SimilarityReport r = combine_scores(sm.whole, sm.part, n, n, a);
    report.sweep.push_back(retrieval(r.combined, n, a));
  }
  report.whole_only = retrieval(sm.whole, n, 0.0);

  if (options.grounding) {
    NoGradGuard no_grad;
    std::vector<std::vector<std::uint8_t>> preds, truths;
    std::vector<double> masses;
    for (std::size_t i = 0; i < n; ++i) {
      const auto* s = samples[i];
      if (s->short_captions.empty()) continue;
      std::vector<std::vector<std::size_t>> q;
      for (const auto& c : s->short_captions) q.push_back(tokenize_chunk(c, vocab, model.config().context_sub));
      const Tensor tq = model.text().encode_sub(q);
      const PoolResult pool = model.head().attn_pool(tq, fine_block(enc, i, i + 1));
      const std::size_t M = enc.tokens;
      for (std::size_t o = 0; o < q.size(); ++o) {
        std::vector<double> w(pool.attn.values().begin() + static_cast<std::ptrdiff_t>(o * M),
                              pool.attn.values().begin() + static_cast<std::ptrdiff_t>((o + 1) * M));
        const auto heat = project_heatmap(enc.pixel_maps[i], w);
        const auto otsu = otsu_threshold(heat);
        const auto truth = binary_mask(s->masks.at(s->sentence_to_object.at(o)));
        GroundingRow row;
        row.query_id = sample_name(s->id, corpus_size) + "_" + std::to_string(s->sentence_to_object[o]);
        row.iou = iou(otsu.mask, truth);
        row.mass_in_mask = mass_inside(heat, truth);
        report.grounding.push_back(row);
        preds.push_back(otsu.mask);
        truths.push_back(truth);
      }
    }
    std::sort(report.grounding.begin(), report.grounding.end(),
              [](const auto& a, const auto& b) { return a.query_id < b.query_id; });
    if (!preds.empty()) {
      report.miou = miou(preds, truths);
      for (const auto& r : report.grounding) masses.push_back(r.mass_in_mask);
      std::sort(masses.begin(), masses.end());
      report.mean_mass_in_mask = std::accumulate(masses.begin(), masses.end(), 0.0) / static_cast<double>(masses.size());
    }
  }
  return report;
}

GroundingMap ground_query(const CaftModel& model, Variant variant, const PreparedImage& image, const std::string& text,
                          const Vocabulary& vocab) {
  if (words_of(text).empty()) throw std::invalid_argument("ground_query: empty query");
  NoGradGuard no_grad;
  const SegmentHierarchy h = model.vision().encode({&image}, variant);
  const Tensor t = model.text().encode_sub({tokenize_chunk(text, vocab, model.config().context_sub)});
  const PoolResult pool = model.head().attn_pool(t, h.v_fine);
  GroundingMap g;
  g.segment_weights.assign(pool.attn.values().begin(), pool.attn.values().end());
  g.heatmap = project_heatmap(pixel_to_fine(h, 0, image.map), g.segment_weights);
  g.otsu = otsu_threshold(g.heatmap);
  return g;
}

std::string format_report(const EvalReport& r) {
  std::string s = "# caft evaluation report\n";
  for (const auto& x : r.sweep) {
    s += "\n[alpha " + format_double(x.alpha) + "]\nalpha,i2t_r1,t2i_r1\n";
    s += format_double(x.alpha) + "," + format_double(x.i2t_r1) + "," + format_double(x.t2i_r1) + "\n";
  }
  s += "\n[whole]\nalpha,i2t_r1,t2i_r1\n";
  s += "whole," + format_double(r.whole_only.i2t_r1) + "," + format_double(r.whole_only.t2i_r1) + "\n";
  if (!r.grounding.empty()) {
    s += "\n[grounding]\nquery_id,iou\n";
    for (const auto& g : r.grounding) s += g.query_id + "," + format_double(g.iou) + "\n";
    s += "\n[summary]\nmiou," + format_double(r.miou) + "\nmass_in_mask," + format_double(r.mean_mass_in_mask) + "\n";
  }
  return s;
}

}  // namespace caft
