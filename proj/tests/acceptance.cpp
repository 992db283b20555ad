// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Criterion numbers given on the
// command line restrict the run to those criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "aquila/checkpoint.hpp"
#include "aquila/tensor_io.hpp"
#include "aquila/trainer.hpp"
#include "commands.hpp"
#include "support.hpp"

using namespace aquila;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "aquila_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void cli_ok(const std::vector<std::string>& args) {
  const CliResult r = cli(args);
  if (r.code != 0) throw Error("aquila " + args[0] + " failed: " + r.err);
}

std::map<std::string, double> metric_lines(const std::string& text) {
  std::map<std::string, double> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
  }
  return out;
}

bool same_bytes(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0;
}

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

// Every regular file under `a` exists under `b` with the same bytes, and
// vice versa.
bool same_tree(const fs::path& a, const fs::path& b, std::string* first_diff) {
  std::set<std::string> names;
  for (const fs::path& root : {a, b})
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), root).string());
  for (const std::string& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n) || read_file(a / n) != read_file(b / n)) {
      *first_diff = n;
      return false;
    }
  }
  return !names.empty();
}

Dataset toy_data(std::uint64_t seed, std::size_t scenes) {
  DatasetOptions opt;
  opt.seed = seed;
  opt.scenes = scenes;
  opt.negatives = true;
  opt.scene.image_size = 64;
  return testing::in_memory_dataset(opt);
}

Outcome gradient_suite() {
  const Stopwatch clock;
  double worst_op = 0, worst_model = 0;
  std::string worst_name;
  for (const testing::OpCase& c : testing::op_cases()) {
    for (std::uint64_t seed : {101, 102, 103}) {
      Rng rng(seed);
      std::vector<Tensor<double>> inputs;
      for (const Shape& s : c.shapes) inputs.push_back(testing::random_tensor(s, rng));
      const double err = testing::op_gradient_error(inputs, c.build, rng);
      if (err > worst_op) {
        worst_op = err;
        worst_name = c.name;
      }
    }
  }

  // The whole stage-2 objective of the toy model on a two-region sample:
  // projectors and language model trainable, encoder frozen.
  for (std::uint64_t seed : {201, 202, 203}) {
    const Dataset data = toy_data(seed, 1);
    const auto it = std::find_if(data.samples.begin(), data.samples.end(),
                                 [](const DatasetSample& s) { return s.kind == "conversation"; });
    if (it == data.samples.end()) return {false, "no two-region sample generated"};
    AquilaModel<double> model(testing::toy_model_config(data.vocab.size()), seed);
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      auto& p = model.params()[i];
      p.trainable = starts_with(p.name, "projector.") || starts_with(p.name, "lm.");
    }
    const FeaturePyramid<double> pyramid = model.encode(data.images[it->image_index].cast<double>());
    auto loss = [&](Tape<double>& tape) { return model.loss(tape, as_constants(tape, pyramid), it->record, data.vocab); };
    Rng rng(seed);
    worst_model = std::max(worst_model, testing::param_gradient_error(model.params(), loss, rng, 8));
  }
  const double secs = clock.seconds();
  const bool pass = worst_op < 1e-4 && worst_model < 1e-4 && secs < 120;
  return {pass, "worst op error " + fmt("%.3g", worst_op) + " (" + worst_name + "), worst stage-2 parameter error " +
                    fmt("%.3g", worst_model) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome mask_pool_oracle() {
  Rng rng(2024);
  double worst = 0;
  std::size_t cases = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t side = 64 + 32 * rng.below(3);
    FeaturePyramid<double> pyr;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      const std::size_t n = side / kPyramidStrides[l];
      pyr.levels[l] = testing::random_tensor({kPyramidChannels[l], n, n}, rng);
    }
    const double density = rng.uniform(0.001, 0.6);
    Tensor<float> grid({side, side});
    for (float& v : grid.data()) v = rng.uniform() < density ? 1.0f : 0.0f;
    grid[rng.below(grid.size())] = 1.0f;
    const RegionMask mask(grid);

    Tape<double> tape(false);
    const auto pooled = mask_pool(as_constants(tape, pyr), mask);
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      // Brute force: every mask pixel votes for the feature cell it falls in.
      const Tensor<double>& f = pyr.levels[l];
      const std::size_t stride = kPyramidStrides[l], n = f.dim(1), C = f.dim(0);
      std::vector<double> acc(C, 0.0);
      double pixels = 0;
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          if (grid.at(y, x) == 0.0f) continue;
          pixels += 1;
          for (std::size_t c = 0; c < C; ++c) acc[c] += f[(c * n + y / stride) * n + x / stride];
        }
      for (std::size_t c = 0; c < C; ++c) worst = std::max(worst, std::abs(pooled[l].value()[c] - acc[c] / pixels));
      ++cases;
    }
  }

  // Block-aligned masks: every cell is fully covered or empty, so the
  // downsampled grid is exactly the cell pattern.
  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t side = 64 + 32 * rng.below(3);
    const std::size_t stride = kPyramidStrides[rng.below(kPyramidLevels)], n = side / stride;
    Tensor<double> cells({n, n});
    for (double& v : cells.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    Tensor<float> grid({side, side});
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) grid.at(y, x) = static_cast<float>(cells.at(y / stride, x / stride));
    if (downsample_mask<double>(grid, n, n) == cells) ++exact;
  }
  const bool pass = worst < 1e-6 && exact == 100;
  return {pass, std::to_string(cases / kPyramidLevels) + " cases per level, worst deviation " + fmt("%.3g", worst) +
                    ", block-aligned downsampling exact in " + std::to_string(exact) + "/100"};
}

Outcome freezing_contract() {
  const Dataset data = toy_data(300, 4);
  AquilaModel<float> model(testing::toy_model_config(data.vocab.size()), 7);
  std::vector<Tensor<float>> init;
  for (std::size_t i = 0; i < model.params().size(); ++i) init.push_back(model.params()[i].value);
  TrainOptions opt;
  opt.seed = 7;
  opt.steps = 60;
  train_stage(model, StagePlan::for_stage(1), data, opt);

  std::size_t stage1_changed = 0, projector_moved = 0, frozen = 0;
  for (std::size_t i = 0; i < init.size(); ++i) {
    const auto& p = model.params()[i];
    const bool same = same_bytes(p.value, init[i]);
    if (starts_with(p.name, "encoder.") || starts_with(p.name, "lm.")) {
      ++frozen;
      if (!same) ++stage1_changed;
    } else if (!same) {
      ++projector_moved;
    }
  }
  opt.optim.lr = 3e-4;
  train_stage(model, StagePlan::for_stage(2), data, opt);
  std::size_t stage2_changed = 0, encoder = 0;
  for (std::size_t i = 0; i < init.size(); ++i) {
    const auto& p = model.params()[i];
    if (!starts_with(p.name, "encoder.")) continue;
    ++encoder;
    if (!same_bytes(p.value, init[i])) ++stage2_changed;
  }
  const bool pass = stage1_changed == 0 && stage2_changed == 0 && projector_moved > 0 && encoder > 0;
  return {pass, "after stage 1 (60 steps) " + std::to_string(stage1_changed) + "/" + std::to_string(frozen) +
                    " encoder/lm parameters changed, " + std::to_string(projector_moved) +
                    " projector parameters moved; after stage 2 " + std::to_string(stage2_changed) + "/" +
                    std::to_string(encoder) + " encoder parameters changed"};
}

double sample_loss(const AquilaModel<float>& m, const Dataset& d, const DatasetSample& s) {
  Tape<float> tape(false);
  return m.loss(tape, as_constants(tape, m.encode(d.images[s.image_index])), s.record, d.vocab).value()[0];
}

Outcome overfit_reproduction() {
  const Stopwatch clock;
  const std::string data = path("overfit_data");
  cli_ok({"gen-data", "--seed", "500", "--scenes", "4", "--negatives", "--out", data, "--force"});
  {
    std::istringstream in(read_file(fs::path(data) / "manifest.jsonl"));
    std::string line, kept;
    for (int i = 0; i < 32 && std::getline(in, line); ++i) kept += line + "\n";
    write_file(fs::path(data) / "manifest.jsonl", kept);
  }
  const std::string cfg = path("overfit.cfg");
  write_file(cfg, "seed = 3\nstage1.steps = 300\nstage2.steps = 1500\n");
  const std::string s1 = path("overfit_s1"), s2 = path("overfit_s2");
  cli_ok({"train", "--config", cfg, "--stage", "1", "--data", data, "--out", s1});
  cli_ok({"train", "--config", cfg, "--stage", "2", "--data", data, "--init", s1, "--out", s2});

  const Dataset ds = load_dataset(data);
  if (ds.samples.size() != 32) return {false, "expected 32 samples, found " + std::to_string(ds.samples.size())};
  const Checkpoint ck = load_checkpoint(s2);
  double mean = 0;
  for (const auto& s : ds.samples) mean += sample_loss(*ck.model, ds, s);
  mean /= double(ds.samples.size());

  std::size_t matches = 0;
  for (const auto& s : ds.samples) {
    std::vector<std::string> args{"infer", "--ckpt", s2, "--image", (fs::path(data) / s.image_path).string(),
                                  "--prompt", s.record.prompt_text};
    std::string masks;
    for (const auto& m : s.mask_paths) masks += (masks.empty() ? "" : ",") + (fs::path(data) / m).string();
    if (!masks.empty()) {
      args.push_back("--mask");
      args.push_back(masks);
    }
    const CliResult r = cli(args);
    if (r.code == 0 && r.out == s.record.response_text + "\n") ++matches;
  }

  // Post-overfit, the two-region answers should depend on which region
  // fills which slot.
  std::size_t swaps = 0, swap_sensitive = 0;
  for (const auto& s : ds.samples) {
    if (s.record.region_masks.size() != 2) continue;
    DatasetSample swapped = s;
    std::swap(swapped.record.region_masks[0], swapped.record.region_masks[1]);
    ++swaps;
    if (sample_loss(*ck.model, ds, swapped) > sample_loss(*ck.model, ds, s)) ++swap_sensitive;
  }
  const double secs = clock.seconds();
  const bool pass = mean < 0.05 && matches == 32 && secs < 900;
  return {pass, "mean loss " + fmt("%.4g", mean) + ", exact match " + std::to_string(matches) + "/32, region swap raises loss on " +
                    std::to_string(swap_sensitive) + "/" + std::to_string(swaps) + " two-region samples, " +
                    fmt("%.0f", secs) + " s"};
}

Outcome generalization() {
  const Stopwatch clock;
  const std::string train = path("gen_train"), held = path("gen_held");
  cli_ok({"gen-data", "--seed", "1000", "--scenes", "256", "--negatives", "--out", train, "--force"});
  cli_ok({"gen-data", "--seed", "900000", "--scenes", "64", "--negatives", "--out", held, "--force"});
  const std::string cfg = path("gen.cfg");
  write_file(cfg, "seed = 5\nstage1.steps = 200\nstage2.epochs = 4\n");
  const std::string s1 = path("gen_s1"), s2 = path("gen_s2");
  cli_ok({"train", "--config", cfg, "--stage", "1", "--data", train, "--out", s1});
  cli_ok({"train", "--config", cfg, "--stage", "2", "--data", train, "--init", s1, "--out", s2});
  const CliResult ev = cli({"eval", "--ckpt", s2, "--data", held, "--kinds", "region_short,negative_category"});
  if (ev.code != 0) throw Error("eval failed: " + ev.err);
  auto m = metric_lines(ev.out);
  const double shortm = m["region_short.exact_match"], neg = m["negative_category.exact_match"];
  const bool pass = shortm >= 0.90 && neg >= 0.90;
  return {pass, "held-out region_short exact match " + fmt("%.4f", shortm) + ", negative_category exact match " +
                    fmt("%.4f", neg) + ", " + fmt("%.0f", clock.seconds()) + " s"};
}

std::size_t word_count(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

Outcome sequence_arithmetic() {
  const Vocab vocab = dataset_vocab();
  std::vector<std::string> words;
  for (std::int32_t id = special::kCount; id < static_cast<std::int32_t>(vocab.size()); ++id) words.push_back(vocab.token(id));
  const std::size_t D = 8;
  Rng rng(606);
  std::size_t holds = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t regions = rng.below(4), n_words = rng.below(16), n_resp = rng.below(12), n_img = 1 + rng.below(64);
    std::vector<std::string> body;
    for (std::size_t i = 0; i < n_words; ++i) body.push_back(words[rng.below(words.size())]);
    for (std::size_t i = 0; i < regions; ++i) body.insert(body.begin() + rng.below(body.size() + 1), "<region>");
    std::string instruction, response;
    for (const auto& w : body) instruction += w + " ";
    for (std::size_t i = 0; i < n_resp; ++i) response += words[rng.below(words.size())] + " ";

    PromptRecord record;
    record.prompt_text = with_image_prefix(instruction);
    record.response_text = response;
    Tape<double> tape(false);
    std::vector<RegionEmbedding<double>> embeddings;
    for (std::size_t i = 0; i < regions; ++i) {
      Tensor<float> g({64, 64});
      g[rng.below(g.size())] = 1.0f;
      record.region_masks.emplace_back(g);
      embeddings.push_back({tape.constant(testing::random_tensor({D}, rng)), tape.constant(testing::random_tensor({D}, rng))});
    }
    const auto image = tape.constant(testing::random_tensor({n_img, D}, rng));
    const auto table = tape.constant(testing::random_tensor({vocab.size(), D}, rng));
    const auto seq = assemble<double>(record, image, embeddings, table, vocab);

    // T = 3 + N_img + (prompt tokens - 1 - regions) + 2 regions + response tokens.
    const std::size_t prompt_tokens = word_count(record.prompt_text);
    const std::size_t T = 3 + n_img + (prompt_tokens - 1 - regions) + 2 * regions + word_count(response);
    if (seq.plan.length() == T && seq.embeddings.value().dim(0) == T) ++holds;
  }
  return {holds == 1000, "length formula holds on " + std::to_string(holds) + "/1000 random records"};
}

// gen-data, both stages and eval on the toy architecture.
std::string pipeline(const std::string& tag) {
  const std::string data = path(tag + "_data"), s1 = path(tag + "_s1"), s2 = path(tag + "_s2"), cfg = path(tag + ".cfg");
  cli_ok({"gen-data", "--seed", "77", "--scenes", "3", "--negatives", "--image-size", "64", "--out", data, "--force"});
  write_file(cfg, "seed = 9\nimage_size = 64\nd_model = 32\nspatial_size = 32\nlm.layers = 1\nlm.ffn = 64\n"
                  "lm.max_pos = 128\nstage1.steps = 20\nstage2.steps = 30\n");
  cli_ok({"train", "--config", cfg, "--stage", "1", "--data", data, "--out", s1});
  cli_ok({"train", "--config", cfg, "--stage", "2", "--data", data, "--init", s1, "--out", s2});
  const CliResult ev = cli({"eval", "--ckpt", s2, "--data", data, "--kinds",
                            "caption,conversation,negative_category,negative_spatial,region_describe,region_short"});
  if (ev.code != 0) throw Error("eval failed: " + ev.err);
  return ev.out;
}

Outcome determinism() {
  const std::string a = pipeline("det_a"), b = pipeline("det_b");
  std::string diff;
  bool same = true;
  for (const char* part : {"_data", "_s1", "_s2"}) {
    if (!same_tree(path(std::string("det_a") + part), path(std::string("det_b") + part), &diff)) {
      same = false;
      diff = std::string(part + 1) + "/" + diff;
      break;
    }
  }
  const bool pass = same && a == b && !a.empty();
  return {pass, same ? std::string("datasets, both checkpoints and ") + std::to_string(metric_lines(a).size()) +
                           " metric lines identical" + (a == b ? "" : " except the metrics")
                     : "files differ at " + diff};
}

Outcome checkpoint_round_trip() {
  std::size_t equal = 0;
  for (std::uint64_t k = 0; k < 10; ++k) {
    Rng rng(800 + k);
    ModelConfig c;
    c.image_size = 32 * (2 + rng.below(3));
    c.d_model = 16 * (1 + rng.below(3));
    c.spatial_size = 8 * (1 + rng.below(4));
    c.lm_layers = 1 + rng.below(2);
    c.lm_heads = rng.below(2) ? 2 : 4;
    c.lm_ffn = 2 * c.d_model;
    c.lm_max_pos = 64 + 64 * rng.below(3);
    std::vector<std::string> corpus{"w0"};
    for (std::size_t i = 1, n = 10 + rng.below(60); i < n; ++i) corpus[0] += " w" + std::to_string(i);
    const Vocab vocab = Vocab::build(corpus);
    c.vocab_size = vocab.size();

    AquilaModel<float> model(c, rng.next_u64());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      auto& p = model.params()[i];
      for (float& v : p.value.data()) v += static_cast<float>(rng.normal(0, 0.1));
      if (!starts_with(p.name, "encoder.")) p.trainable = rng.below(2) == 1;
    }
    const fs::path first = path("rt_" + std::to_string(k) + "_a"), second = path("rt_" + std::to_string(k) + "_b");
    save_checkpoint(first, model, vocab, {static_cast<int>(1 + k % 2), rng.below(5000), k});
    const Checkpoint ck = load_checkpoint(first);
    save_checkpoint(second, *ck.model, ck.vocab, ck.meta);
    std::string diff;
    if (same_tree(first, second, &diff)) ++equal;
  }
  return {equal == 10, "save, load, save byte-identical for " + std::to_string(equal) + "/10 random models"};
}

Outcome negative_mining() {
  const TemplateBook templates;
  std::size_t spatial = 0, spatial_ok = 0, category = 0, category_ok = 0, skipped = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene scene = generate_scene(10000 + seed);
    std::vector<std::string> log;
    for (const InstructionSample& x : mine_negatives(scene, templates, seed, &log)) {
      if (x.kind == "negative_spatial") {
        ++spatial;
        const Tensor<float>& g = x.region_masks.at(0).grid();
        bool disjoint = true;
        for (const auto& o : scene.objects)
          for (std::size_t i = 0; i < g.size(); ++i)
            if (g[i] != 0.0f && o.mask.grid()[i] != 0.0f) disjoint = false;
        if (disjoint) ++spatial_ok;
      } else if (x.kind == "negative_category") {
        ++category;
        std::istringstream in(x.prompt_text);
        std::vector<std::string> w;
        for (std::string t; in >> t;) w.push_back(t);
        const auto it = std::find(w.begin(), w.end(), "this");
        if (it == w.end() || it + 2 >= w.end()) continue;
        const std::string asked = *(it + 2);
        const auto names = category_names();
        bool absent = std::find(names.begin(), names.end(), asked) != names.end();
        for (const auto& o : scene.objects)
          if (o.category == asked) absent = false;
        if (absent) ++category_ok;
      }
    }
    skipped += log.size();
  }
  const bool pass = spatial > 0 && category > 0 && spatial_ok == spatial && category_ok == category;
  return {pass, std::to_string(spatial_ok) + "/" + std::to_string(spatial) + " spatial negatives disjoint, " +
                    std::to_string(category_ok) + "/" + std::to_string(category) +
                    " category negatives ask for an absent category, " + std::to_string(skipped) + " skipped"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"mask-pool oracle", mask_pool_oracle},
      {"freezing contract", freezing_contract},
      {"overfit reproduction", overfit_reproduction},
      {"generalization", generalization},
      {"sequence-assembly arithmetic", sequence_arithmetic},
      {"determinism", determinism},
      {"checkpoint round-trip", checkpoint_round_trip},
      {"negative mining", negative_mining},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
