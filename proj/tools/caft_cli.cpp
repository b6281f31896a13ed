// caft: generate corpora, train, evaluate, and ground queries.
//
// Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure, 5 compatibility.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "caft/evaluation.hpp"
#include "caft/training.hpp"

namespace fs = std::filesystem;
using namespace caft;

namespace {

enum Exit { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4, kCompat = 5 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<double> parse_alphas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double a = 0;
    try {
      a = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("malformed alpha '" + item + "'");
    }
    if (used != item.size() || !(a >= 0.0 && a <= 1.0)) throw UsageError("alpha '" + item + "' must be a number in [0, 1]");
    out.push_back(a);
  }
  if (out.empty()) throw UsageError("--alphas needs at least one value");
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

std::vector<AnnotatedSample> load_corpus(const std::string& dir) {
  try {
    return read_corpus(dir);
  } catch (const ImageIoError& e) {
    throw IoError(e.what());
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

Vocabulary load_vocab(const std::string& path) {
  try {
    return Vocabulary::load(path);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
}

void log_config(const RunConfig& cfg) {
  std::cerr << "resolved config:\n";
  for (const auto& [k, v] : cfg.entries()) std::cerr << "  " << k << " = " << v << "\n";
}

TrainState load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw IoError("cannot read checkpoint " + path);
  return checkpoint_load(path);
}

void check_vocab(const TrainState& st, const Vocabulary& vocab) {
  if (st.config.model.vocab_size != vocab.size()) {
    throw CompatibilityError("checkpoint expects a vocabulary of " + std::to_string(st.config.model.vocab_size) +
                             " tokens, got " + std::to_string(vocab.size()));
  }
}

struct GenArgs {
  std::uint64_t seed = 0;
  std::size_t count = 0, canvas = 32;
  std::string out;
};

int run_gen(const GenArgs& a) {
  if (a.count == 0) throw UsageError("--count must be >= 1");
  if (a.canvas < 24) throw UsageError("--canvas must be >= 24");
  const auto samples = generate(a.seed, a.count, a.canvas);
  ensure_dir(a.out);
  try {
    write_corpus(a.out, samples, CorpusInfo{a.seed, a.canvas});
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  std::cout << "samples " << samples.size() << "\nvocabulary " << synth_vocabulary().size() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, preset = "desk", variant, out, config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, max_steps;
};

int run_train(const TrainArgs& a) {
  RunConfig cfg;
  try {
    cfg = RunConfig::preset(a.preset);
    if (!a.config_file.empty()) {
      if (!fs::exists(a.config_file)) throw IoError("cannot read config file " + a.config_file);
      cfg.apply_file(a.config_file);
    }
    for (const auto& kv : a.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!a.variant.empty()) cfg.train.variant = parse_variant(a.variant);
    if (a.seed) cfg.train.seed = *a.seed;
    if (a.epochs) cfg.train.epochs = *a.epochs;
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto corpus = load_corpus(a.data);
  const Vocabulary vocab = load_vocab((fs::path(a.data) / "vocab.txt").string());
  cfg.model.vocab_size = vocab.size();
  log_config(cfg);

  const Split split = corpus_split(corpus, cfg.train.train_fraction, cfg.train.seed);
  const TrainData data = TrainData::build(corpus, split.train, cfg.model, cfg.train.variant, vocab);
  TrainState state = TrainState::fresh(cfg);

  ensure_dir(a.out);
  const std::string metrics_path = (fs::path(a.out) / "metrics.csv").string();
  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw IoError("cannot write " + metrics_path);
  {
    std::ofstream cfg_out(fs::path(a.out) / "config.txt", std::ios::binary);
    cfg_out << cfg.to_text();
    if (!cfg_out) throw IoError("cannot write resolved config");
  }
  metrics << metrics_header();
  const std::size_t total = total_steps(data.samples.size(), cfg.train);
  std::cerr << "training " << data.samples.size() << " samples, " << total << " steps\n";
  const std::uint64_t until = a.max_steps ? std::min<std::uint64_t>(*a.max_steps, total) : total;
  train(state, data, until, [&](const MetricsRow& row) {
    metrics << format_metrics(row);
    metrics.flush();
    if (row.step % 50 == 0 || row.step == until) {
      std::cerr << "step " << row.step << "/" << until << " loss " << row.total << "\n";
    }
  });
  if (!metrics) throw IoError("cannot write " + metrics_path);
  try {
    checkpoint_save(state, (fs::path(a.out) / "checkpoint.bin").string());
  } catch (const CheckpointError& e) {
    throw IoError(e.what());
  }
  std::cout << "steps " << state.step << "\ncheckpoint " << (fs::path(a.out) / "checkpoint.bin").string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string data, ckpt, alphas = "0.0,0.3,0.7,1.0", report;
  bool no_grounding = false;
};

int run_eval(const EvalArgs& a) {
  const auto alphas = parse_alphas(a.alphas);
  const TrainState st = load_checkpoint(a.ckpt);
  const auto corpus = load_corpus(a.data);
  const Vocabulary vocab = load_vocab((fs::path(a.data) / "vocab.txt").string());
  check_vocab(st, vocab);
  log_config(st.config);
  const Split split = corpus_split(corpus, st.config.train.train_fraction, st.config.train.seed);
  std::vector<const AnnotatedSample*> test;
  for (auto i : split.test) test.push_back(&corpus[i]);
  EvalOptions opt;
  opt.alphas = alphas;
  opt.grounding = !a.no_grounding;
  const EvalReport r = evaluate(*st.model, st.config.train.variant, test, vocab, opt, corpus.size());
  const std::string text = format_report(r);
  if (!a.report.empty()) {
    const auto parent = fs::path(a.report).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    std::ofstream out(a.report, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write report " + a.report);
    for (const auto& row : r.sweep)
      std::cout << "alpha " << format_double(row.alpha) << " i2t_r1 " << format_double(row.i2t_r1) << " t2i_r1 "
                << format_double(row.t2i_r1) << "\n";
    std::cout << "whole i2t_r1 " << format_double(r.whole_only.i2t_r1) << " t2i_r1 "
              << format_double(r.whole_only.t2i_r1) << "\n";
    if (opt.grounding) std::cout << "miou " << format_double(r.miou) << "\n";
    std::cout << "report " << a.report << "\n";
  } else {
    std::cout << text;
  }
  return kOk;
}

struct GroundArgs {
  std::string ckpt, image, text, out, truth_mask, vocab;
};

int run_ground(const GroundArgs& a) {
  if (words_of(a.text).empty()) throw UsageError("--text must contain at least one word");
  ImageGrid image;
  try {
    image = read_ppm(a.image);
  } catch (const ImageIoError& e) {
    throw IoError(e.what());
  }
  std::optional<GrayImage> truth;
  if (!a.truth_mask.empty()) {
    try {
      truth = read_pgm(a.truth_mask);
    } catch (const ImageIoError& e) {
      throw IoError(e.what());
    }
    if (truth->height != image.height || truth->width != image.width) throw UsageError("truth mask size differs from the image");
  }
  const TrainState st = load_checkpoint(a.ckpt);
  const Vocabulary vocab = a.vocab.empty() ? synth_vocabulary() : load_vocab(a.vocab);
  check_vocab(st, vocab);
  const Variant variant = st.config.train.variant;
  PreparedImage prepared;
  try {
    prepared = prepare_image(image, st.config.model, variant);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("image unsuitable for this model: ") + e.what());
  }
  const GroundingMap g = ground_query(*st.model, variant, prepared, a.text, vocab);
  ensure_dir(a.out);
  try {
    write_pgm((fs::path(a.out) / "heatmap.pgm").string(), heatmap_image(g.heatmap, image.height, image.width));
    write_pgm((fs::path(a.out) / "mask.pgm").string(), mask_image(g.otsu.mask, image.height, image.width));
  } catch (const ImageIoError& e) {
    throw IoError(e.what());
  }
  std::cout << "heatmap " << (fs::path(a.out) / "heatmap.pgm").string() << "\nmask "
            << (fs::path(a.out) / "mask.pgm").string() << "\n";
  if (g.otsu.degenerate) std::cout << "degenerate heatmap\n";
  if (truth) {
    const auto tm = binary_mask(*truth);
    std::cout << "mass_in_mask " << format_double(mass_inside(g.heatmap, tm)) << "\niou "
              << format_double(iou(g.otsu.mask, tm)) << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caft: hierarchical image-text alignment on synthetic scenes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic corpus");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--count", gen.count, "number of samples")->required();
  gen_cmd->add_option("--canvas", gen.canvas, "image side in pixels");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", tr.data, "corpus directory")->required();
  train_cmd->add_option("--preset", tr.preset, "desk | paper");
  train_cmd->add_option("--variant", tr.variant, "caft | flat-loss | no-part | plain-vit | flat-text");
  train_cmd->add_option("--seed", tr.seed, "run seed");
  train_cmd->add_option("--epochs", tr.epochs, "override epoch count");
  train_cmd->add_option("--max-steps", tr.max_steps, "stop after this many steps");
  train_cmd->add_option("--config", tr.config_file, "flat key = value config file");
  train_cmd->add_option("--set", tr.sets, "key=value override (repeatable)");
  train_cmd->add_option("--out", tr.out, "output directory")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  eval_cmd->add_option("--data", ev.data, "corpus directory")->required();
  eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint")->required();
  eval_cmd->add_option("--alphas", ev.alphas, "comma-separated weights in [0, 1]");
  eval_cmd->add_option("--report", ev.report, "report path");
  eval_cmd->add_flag("--no-grounding", ev.no_grounding, "skip the grounding table");

  GroundArgs gr;
  auto* ground_cmd = app.add_subcommand("ground", "heatmap and Otsu mask for one query");
  ground_cmd->add_option("--ckpt", gr.ckpt, "checkpoint")->required();
  ground_cmd->add_option("--image", gr.image, "PPM image")->required();
  ground_cmd->add_option("--text", gr.text, "query text")->required();
  ground_cmd->add_option("--out", gr.out, "output directory")->required();
  ground_cmd->add_option("--truth-mask", gr.truth_mask, "PGM ground-truth mask");
  ground_cmd->add_option("--vocab", gr.vocab, "vocabulary file (default: the synthetic vocabulary)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*ground_cmd) return run_ground(gr);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const CompatibilityError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return kCompat;
  } catch (const CheckpointError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
