#include "caft/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "caft/rng.hpp"

namespace caft {

namespace fs = std::filesystem;

namespace {

const char* const kColorNames[kPaletteSize] = {"red", "green", "blue", "yellow", "purple", "orange", "white", "gray"};
const std::array<std::uint8_t, 3> kPalette[kPaletteSize] = {
    {{220, 30, 30}}, {{30, 170, 60}}, {{30, 60, 220}}, {{240, 220, 30}},
    {{140, 40, 180}}, {{250, 140, 20}}, {{245, 245, 245}}, {{120, 120, 120}},
};
const char* const kShapeNames[kShapeKinds] = {"circle", "square", "triangle", "cross"};
const char* const kLocations[9] = {"top left",    "top middle", "top right",    "middle left", "center",
                                   "middle right", "bottom left", "bottom middle", "bottom right"};
const char* const kCounts[5] = {"zero", "one", "two", "three", "four"};

std::size_t index_of(const char* const* names, std::size_t n, const std::string& s, const char* what) {
  for (std::size_t i = 0; i < n; ++i)
    if (s == names[i]) return i;
  throw std::runtime_error(std::string("unknown ") + what + " '" + s + "'");
}

bool inside(const ObjectSpec& o, double cs, double px, double py) {
  const double cx = (static_cast<double>(o.cell % 3) + 0.5) * cs;
  const double cy = (static_cast<double>(o.cell / 3) + 0.5) * cs;
  const double r = (o.size == SizeClass::large ? 0.42 : 0.28) * cs;
  const double dx = px - cx, dy = py - cy;
  switch (o.shape) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::triangle: {
      const double top = -r, base = 0.8 * r;
      if (dy < top || dy > base) return false;
      return std::abs(dx) <= r * (dy - top) / (base - top);
    }
    case ShapeKind::cross:
      return (std::abs(dx) <= 0.35 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.35 * r && std::abs(dx) <= r);
  }
  return false;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

}  // namespace

const char* color_name(std::size_t color) { return kColorNames[color % kPaletteSize]; }
const char* shape_name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }
const char* size_name(SizeClass s) { return s == SizeClass::large ? "large" : "small"; }
const char* location_name(std::size_t cell) { return kLocations[cell % 9]; }
std::array<std::uint8_t, 3> palette_rgb(std::size_t color) { return kPalette[color % kPaletteSize]; }

std::string SceneSpec::key() const {
  std::ostringstream os;
  os << canvas << '/' << background;
  for (const auto& o : objects)
    os << '/' << static_cast<int>(o.shape) << ':' << o.color << ':' << static_cast<int>(o.size) << ':' << o.cell;
  return os.str();
}

std::string object_sentence(const ObjectSpec& o) {
  return std::string("A ") + size_name(o.size) + " " + color_name(o.color) + " " + shape_name(o.shape) +
         " sits in the " + location_name(o.cell) + ".";
}

std::string scene_sentence(const SceneSpec& s) {
  return std::string("There are ") + kCounts[s.objects.size()] + " objects on a " + color_name(s.background) +
         " background.";
}

std::vector<std::string> template_words() {
  std::vector<std::string> out{"there", "are", "objects", "on", "a", "background", "sits", "in", "the", "large", "small"};
  for (auto c : kColorNames) out.emplace_back(c);
  for (auto s : kShapeNames) out.emplace_back(s);
  for (auto l : kLocations)
    for (auto& w : words_of(l)) out.push_back(w);
  for (std::size_t c = 2; c <= 4; ++c) out.emplace_back(kCounts[c]);
  return out;
}

Vocabulary synth_vocabulary() { return Vocabulary::from_words(template_words()); }

SceneSpec sample_scene(std::uint64_t seed, std::size_t index, std::size_t canvas) {
  if (canvas < 24) throw std::invalid_argument("canvas must be at least 24x24");
  Rng rng = Rng::stream(splitmix64(seed) + static_cast<std::uint64_t>(index), "synthdata.scene");
  SceneSpec s;
  s.canvas = canvas;
  s.background = rng.below(kPaletteSize);
  const std::size_t count = 2 + rng.below(3);
  std::vector<std::size_t> cells(9);
  for (std::size_t i = 0; i < 9; ++i) cells[i] = i;
  rng.shuffle(cells);
  for (std::size_t i = 0; i < count; ++i) {
    ObjectSpec o;
    o.cell = cells[i];
    for (;;) {
      o.shape = static_cast<ShapeKind>(rng.below(kShapeKinds));
      o.color = rng.below(kPaletteSize - 1);
      if (o.color >= s.background) ++o.color;
      o.size = rng.below(2) ? SizeClass::large : SizeClass::small;
      const bool clash = std::any_of(s.objects.begin(), s.objects.end(), [&](const ObjectSpec& p) {
        return p.color == o.color && p.shape == o.shape;
      });
      if (!clash) break;
    }
    s.objects.push_back(o);
  }
  return s;
}

AnnotatedSample render_scene(const SceneSpec& spec, std::size_t id) {
  const std::size_t n = spec.canvas;
  if (n < 24) throw std::invalid_argument("canvas must be at least 24x24");
  AnnotatedSample a;
  a.id = id;
  a.spec = spec;
  a.image = ImageGrid{n, n, std::vector<double>(n * n * 3)};
  const auto bg = palette_rgb(spec.background);
  for (std::size_t p = 0; p < n * n; ++p)
    for (std::size_t c = 0; c < 3; ++c) a.image.values[p * 3 + c] = bg[c] / 255.0;
  const double cs = static_cast<double>(n) / 3.0;
  for (const auto& o : spec.objects) {
    GrayImage mask{n, n, std::vector<std::uint8_t>(n * n, 0)};
    const auto rgb = palette_rgb(o.color);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        if (!inside(o, cs, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        mask.pixels[y * n + x] = 255;
        for (std::size_t c = 0; c < 3; ++c) a.image.values[(y * n + x) * 3 + c] = rgb[c] / 255.0;
      }
    }
    a.masks.push_back(std::move(mask));
  }
  a.sentences.push_back(scene_sentence(spec));
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    a.sentences.push_back(object_sentence(spec.objects[i]));
    a.short_captions.push_back(a.sentences.back());
    a.sentence_to_object.push_back(i);
  }
  return a;
}

std::vector<AnnotatedSample> generate(std::uint64_t seed, std::size_t count, std::size_t canvas) {
  if (count == 0) throw std::invalid_argument("generate: count must be >= 1");
  std::vector<AnnotatedSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(render_scene(sample_scene(seed, i, canvas), i));
  return out;
}

Split corpus_split(const std::vector<AnnotatedSample>& samples, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must lie in (0, 1)");
  const std::size_t n = samples.size();
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (target == 0 || target >= n) throw std::invalid_argument("train fraction leaves one side of the split empty");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[samples[i].spec.key()].push_back(i);
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [k, g] : groups) order.push_back(&g);
  // Groups visited in first-index order before shuffling, so the result does not depend on key sorting.
  std::sort(order.begin(), order.end(), [](auto a, auto b) { return a->front() < b->front(); });
  Rng rng = Rng::stream(seed, "corpus.split");
  rng.shuffle(order);
  Split s;
  for (const auto* g : order) {
    auto& side = s.train.size() + g->size() <= target ? s.train : s.test;
    side.insert(side.end(), g->begin(), g->end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  if (s.train.empty() || s.test.empty()) throw std::invalid_argument("split left one side empty");
  return s;
}

std::string sample_name(std::size_t id, std::size_t count) {
  std::size_t width = 4;
  for (std::size_t m = count > 0 ? count - 1 : 0; m >= 10000; m /= 10) ++width;
  std::string s = std::to_string(id);
  return std::string(width > s.size() ? width - s.size() : 0, '0') + s;
}

void write_corpus(const std::string& dir, const std::vector<AnnotatedSample>& samples, const CorpusInfo& info) {
  const fs::path root(dir);
  std::error_code ec;
  for (const char* sub : {"images", "masks", "captions"}) {
    fs::create_directories(root / sub, ec);
    if (ec) throw std::runtime_error("cannot create " + (root / sub).string() + ": " + ec.message());
  }
  std::ostringstream manifest;
  manifest << "# caft synthetic corpus seed=" << info.seed << " canvas=" << info.canvas << " count=" << samples.size()
           << "\n";
  for (const auto& a : samples) {
    const std::string name = sample_name(a.id, samples.size());
    spill(root / "images" / (name + ".ppm"), encode_ppm(a.image));
    for (std::size_t k = 0; k < a.masks.size(); ++k)
      spill(root / "masks" / (name + "_" + std::to_string(k) + ".pgm"), encode_pgm(a.masks[k]));
    std::string cap;
    for (const auto& s : a.sentences) cap += s + "\n";
    spill(root / "captions" / (name + ".txt"), cap);
    manifest << name << " background=" << color_name(a.spec.background) << " objects=";
    for (std::size_t k = 0; k < a.spec.objects.size(); ++k) {
      const auto& o = a.spec.objects[k];
      manifest << (k ? "," : "") << size_name(o.size) << ':' << color_name(o.color) << ':' << shape_name(o.shape) << ':'
               << o.cell;
    }
    manifest << "\n";
  }
  spill(root / "manifest.txt", manifest.str());
  spill(root / "vocab.txt", synth_vocabulary().to_text());
}

std::vector<AnnotatedSample> read_corpus(const std::string& dir) {
  const fs::path root(dir);
  std::istringstream manifest(slurp(root / "manifest.txt"));
  std::string line;
  std::vector<AnnotatedSample> out;
  std::size_t canvas = 0, count = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        if (tok.rfind("canvas=", 0) == 0) canvas = std::stoul(tok.substr(7));
        if (tok.rfind("count=", 0) == 0) count = std::stoul(tok.substr(6));
      }
      continue;
    }
    std::istringstream ls(line);
    std::string name, bg, objs;
    if (!(ls >> name >> bg >> objs) || bg.rfind("background=", 0) != 0 || objs.rfind("objects=", 0) != 0) {
      throw std::runtime_error("malformed manifest line: " + line);
    }
    SceneSpec spec;
    spec.canvas = canvas;
    spec.background = index_of(kColorNames, kPaletteSize, bg.substr(11), "color");
    std::istringstream os(objs.substr(8));
    std::string item;
    while (std::getline(os, item, ',')) {
      std::istringstream is(item);
      std::string size, color, shape, cell;
      if (!std::getline(is, size, ':') || !std::getline(is, color, ':') || !std::getline(is, shape, ':') ||
          !std::getline(is, cell)) {
        throw std::runtime_error("malformed object record: " + item);
      }
      ObjectSpec o;
      o.size = size == "large" ? SizeClass::large : SizeClass::small;
      if (size != "large" && size != "small") throw std::runtime_error("unknown size '" + size + "'");
      o.color = index_of(kColorNames, kPaletteSize, color, "color");
      o.shape = static_cast<ShapeKind>(index_of(kShapeNames, kShapeKinds, shape, "shape"));
      o.cell = std::stoul(cell);
      if (o.cell > 8) throw std::runtime_error("object cell out of range: " + cell);
      spec.objects.push_back(o);
    }
    AnnotatedSample a;
    a.id = std::stoul(name);
    a.spec = spec;
    a.image = decode_ppm(slurp(root / "images" / (name + ".ppm")));
    if (a.image.height != canvas || a.image.width != canvas) throw std::runtime_error("image size disagrees with manifest: " + name);
    for (std::size_t k = 0; k < spec.objects.size(); ++k)
      a.masks.push_back(decode_pgm(slurp(root / "masks" / (name + "_" + std::to_string(k) + ".pgm"))));
    std::istringstream cs(slurp(root / "captions" / (name + ".txt")));
    std::string sent;
    while (std::getline(cs, sent))
      if (!sent.empty()) a.sentences.push_back(sent);
    if (a.sentences.size() != spec.objects.size() + 1) throw std::runtime_error("caption count disagrees with manifest: " + name);
    for (std::size_t k = 0; k < spec.objects.size(); ++k) {
      a.short_captions.push_back(a.sentences[k + 1]);
      a.sentence_to_object.push_back(k);
    }
    out.push_back(std::move(a));
  }
  if (out.empty()) throw std::runtime_error("corpus " + dir + " lists no samples");
  if (count != 0 && count != out.size()) throw std::runtime_error("manifest count disagrees with its entries");
  return out;
}

}  // namespace caft
