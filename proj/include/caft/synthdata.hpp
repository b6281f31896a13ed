#pragma once

// Procedural scenes of coloured shapes on a 3x3 placement grid with
// pixel-accurate masks and templated captions.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "caft/image_io.hpp"
#include "caft/text.hpp"

namespace caft {

enum class ShapeKind : std::uint8_t { circle, square, triangle, cross };
enum class SizeClass : std::uint8_t { small, large };

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::size_t kShapeKinds = 4;

const char* color_name(std::size_t color);
const char* shape_name(ShapeKind s);
const char* size_name(SizeClass s);
/// Phrase for a cell 0..8 of the 3x3 grid (row-major), e.g. "top left".
const char* location_name(std::size_t cell);
std::array<std::uint8_t, 3> palette_rgb(std::size_t color);

struct ObjectSpec {
  ShapeKind shape = ShapeKind::circle;
  std::size_t color = 0;
  SizeClass size = SizeClass::small;
  std::size_t cell = 0;

  bool operator==(const ObjectSpec&) const = default;
};

struct SceneSpec {
  std::size_t canvas = 32;
  std::size_t background = 0;
  std::vector<ObjectSpec> objects;

  bool operator==(const SceneSpec&) const = default;
  std::string key() const;
};

struct AnnotatedSample {
  std::size_t id = 0;
  SceneSpec spec;
  ImageGrid image;
  std::vector<GrayImage> masks;         // one per object, values {0, 255}
  std::vector<std::string> sentences;   // scene sentence first, then one per object
  std::vector<std::string> short_captions;
  std::vector<std::size_t> sentence_to_object;  // for sentences[1..]
};

std::string object_sentence(const ObjectSpec& o);
std::string scene_sentence(const SceneSpec& s);
/// Every word the templates can produce.
std::vector<std::string> template_words();
Vocabulary synth_vocabulary();

SceneSpec sample_scene(std::uint64_t seed, std::size_t index, std::size_t canvas);
AnnotatedSample render_scene(const SceneSpec& spec, std::size_t id);
/// Deterministic per (seed, index).
std::vector<AnnotatedSample> generate(std::uint64_t seed, std::size_t count, std::size_t canvas);

struct Split {
  std::vector<std::size_t> train, test;  // indices into the input, ascending
};

/// Seeded split keeping identical scenes on one side.
Split corpus_split(const std::vector<AnnotatedSample>& samples, double train_fraction, std::uint64_t seed);

struct CorpusInfo {
  std::uint64_t seed = 0;
  std::size_t canvas = 0;
};

void write_corpus(const std::string& dir, const std::vector<AnnotatedSample>& samples, const CorpusInfo& info);
std::vector<AnnotatedSample> read_corpus(const std::string& dir);
std::string sample_name(std::size_t id, std::size_t count);

}  // namespace caft
