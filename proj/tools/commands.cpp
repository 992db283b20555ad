// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "CLI11.hpp"

#include "aquila/checkpoint.hpp"
#include "aquila/dataset.hpp"
#include "aquila/error.hpp"
#include "aquila/run_config.hpp"
#include "aquila/tensor_io.hpp"
#include "aquila/trainer.hpp"

namespace aquila {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) out.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string fmt_loss(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct GenDataArgs {
  std::uint64_t seed = 0;
  std::size_t scenes = 512;
  std::string out;
  bool negatives = false, parts = false, force = false;
  std::size_t threads = 0;
  std::size_t image_size = 128;
};

void cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream& err) {
  DatasetOptions opt;
  opt.seed = a.seed;
  opt.scenes = a.scenes;
  opt.negatives = a.negatives;
  opt.parts = a.parts;
  opt.threads = a.threads;
  opt.scene.image_size = a.image_size;
  const DatasetSummary summary = write_dataset(a.out, opt, a.force);
  for (const auto& line : summary.log) err << "note: " << line << "\n";
  for (const auto& [kind, n] : summary.counts) out << "samples." << kind << "=" << n << "\n";
  out << "samples.total=" << summary.total << "\n";
}

struct TrainArgs {
  std::string config, data, init, out;
  int stage = 0;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  if (a.stage == 2 && a.init.empty()) throw UsageError("stage 2 requires --init with a stage-1 checkpoint");
  const RunConfig rc = RunConfig::load(a.config);
  const std::string data_dir = a.data.empty() ? rc.data : a.data;
  const std::string out_dir = a.out.empty() ? rc.out : a.out;
  if (data_dir.empty()) throw UsageError("no dataset given (--data)");
  if (out_dir.empty()) throw UsageError("no output checkpoint given (--out)");

  const StageSettings& st = rc.stage(a.stage);
  const Dataset data = load_dataset(data_dir);
  ModelConfig mc = rc.model;
  mc.vocab_size = data.vocab.size();
  AquilaModel<float> model(mc, rc.seed);
  std::uint64_t start_step = 0;
  if (!a.init.empty()) {
    if (checkpoint_config_hash(a.init) != config_hash(mc))
      throw ConfigError("checkpoint " + a.init + " was trained with a different model configuration");
    if (!(Vocab::from_text(read_file(fs::path(a.init) / "vocab.txt")) == data.vocab))
      throw ConfigError("checkpoint " + a.init + " uses a different vocabulary than " + data_dir);
    start_step = load_parameters(a.init, model).step;
  }

  TrainOptions opt;
  opt.optim = rc.optim_for(a.stage);
  opt.batch = rc.batch;
  opt.epochs = st.epochs;
  opt.steps = st.steps;
  opt.seed = rc.seed;
  opt.kinds = st.kinds;
  std::string log;
  opt.on_step = [&](std::size_t step, double loss) {
    log += std::to_string(start_step + step) + "," + std::to_string(a.stage) + "," + fmt_loss(loss) + "\n";
  };
  const TrainResult result = train_stage(model, StagePlan::for_stage(a.stage), data, opt);

  save_checkpoint(out_dir, model, data.vocab, {a.stage, start_step + result.losses.size(), rc.seed});
  write_file(fs::path(out_dir) / "train_log.csv", log);
  out << "stage=" << a.stage << "\n";
  out << "steps=" << result.losses.size() << "\n";
  out << "final_loss=" << fmt_loss(result.losses.back()) << "\n";
}

struct InferArgs {
  std::string ckpt, image, masks, prompt, config;
  std::size_t max_new = 64;
};

void cmd_infer(const InferArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (!a.config.empty()) {
    ModelConfig mc = RunConfig::load(a.config).model;
    mc.vocab_size = ck.model->config().vocab_size;
    if (config_hash(mc) != ck.config_hash)
      throw ConfigError("--config does not match the model configuration of " + a.ckpt);
  }
  PromptRecord record;
  record.prompt_text = with_image_prefix(a.prompt);
  for (const std::string& m : split_list(a.masks)) {
    Tensor<float> grid = read_aqtf(m);
    if (grid.rank() != 2) throw FormatError(m + ": mask must be rank 2");
    record.region_masks.emplace_back(std::move(grid));
  }
  const auto ids = tokenize(record.prompt_text, ck.vocab);
  const auto placeholders = std::count(ids.begin(), ids.end(), special::kRegion);
  if (static_cast<std::size_t>(placeholders) != record.region_masks.size()) {
    throw UsageError("prompt has " + std::to_string(placeholders) + " <region> placeholders but " +
                     std::to_string(record.region_masks.size()) + " masks were given");
  }
  const Tensor<float> image = read_aqtf(a.image);
  out << respond_text(*ck.model, ck.vocab, image, record, a.max_new) << "\n";
}

struct EvalArgs {
  std::string ckpt, data, kinds;
  std::size_t max_new = 64;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const std::vector<std::string> kinds = split_list(a.kinds);
  Dataset data = load_dataset(a.data, kinds);
  if (!(data.vocab == ck.vocab)) throw ConfigError("dataset vocabulary differs from the checkpoint's");
  if (data.samples.empty()) throw PreconditionError("dataset has no samples of the requested kinds");
  for (const std::string& line : evaluate(*ck.model, data, kinds, a.max_new).lines()) out << line << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Region-aware vision-language model toolkit", "aquila"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic scene/instruction dataset");
  g->add_option("--seed", gen.seed, "First scene seed");
  g->add_option("--scenes", gen.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--negatives", gen.negatives, "Add spatial and category negatives");
  g->add_flag("--parts", gen.parts, "Add part-of samples for large objects");
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");
  g->add_option("--threads", gen.threads, "Worker threads (0: all cores)");
  g->add_option("--image-size", gen.image_size, "Image side in pixels (multiple of 32)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--config", train.config, "Run configuration file")->required();
  t->add_option("--stage", train.stage, "Stage (1 or 2)")->required()->check(CLI::IsMember({1, 2}));
  t->add_option("--data", train.data, "Dataset directory");
  t->add_option("--init", train.init, "Checkpoint to start from (required for stage 2)");
  t->add_option("--out", train.out, "Output checkpoint directory");

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Answer a prompt about an image and masks");
  i->add_option("--ckpt", infer.ckpt, "Checkpoint directory")->required();
  i->add_option("--image", infer.image, "Image tensor file")->required();
  i->add_option("--mask", infer.masks, "Comma-separated mask tensor files");
  i->add_option("--prompt", infer.prompt, "Instruction; <region> marks each mask")->required();
  i->add_option("--config", infer.config, "Run configuration to check against the checkpoint");
  i->add_option("--max-new", infer.max_new, "Maximum generated tokens");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--kinds", ev.kinds, "Comma-separated sample kinds (default: all)");
  e->add_option("--max-new", ev.max_new, "Maximum generated tokens");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << one_line(ex.what()) << "\n";
    return 2;
  }

  try {
    if (g->parsed()) cmd_gen_data(gen, out, err);
    if (t->parsed()) cmd_train(train, out);
    if (i->parsed()) cmd_infer(infer, out);
    if (e->parsed()) cmd_eval(ev, out);
  } catch (const UsageError& ex) {
    err << "error: " << one_line(ex.what()) << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << one_line(ex.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace aquila
