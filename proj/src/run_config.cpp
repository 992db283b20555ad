// SPDX-License-Identifier: Apache-2.0

#include "aquila/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "aquila/error.hpp"
#include "aquila/tensor_io.hpp"

namespace aquila {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t to_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(v) + "'");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty())
    throw ConfigError("key '" + std::string(key) + "': expected a number, got '" + s + "'");
  return out;
}

std::vector<std::string> to_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    std::size_t end = v.find(',', start);
    if (end == std::string_view::npos) end = v.size();
    const auto item = trim(v.substr(start, end - start));
    if (!item.empty()) out.emplace_back(item);
    start = end + 1;
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
  return out;
}

using Setter = std::function<void(std::string_view key, std::string_view value)>;

void set_model_key(ModelConfig& m, std::map<std::string, Setter, std::less<>>& table) {
  table["image_size"] = [&m](auto k, auto v) { m.image_size = to_size(k, v); };
  table["d_model"] = [&m](auto k, auto v) { m.d_model = to_size(k, v); };
  table["spatial_size"] = [&m](auto k, auto v) { m.spatial_size = to_size(k, v); };
  table["lm.layers"] = [&m](auto k, auto v) { m.lm_layers = to_size(k, v); };
  table["lm.heads"] = [&m](auto k, auto v) { m.lm_heads = to_size(k, v); };
  table["lm.ffn"] = [&m](auto k, auto v) { m.lm_ffn = to_size(k, v); };
  table["lm.max_pos"] = [&m](auto k, auto v) { m.lm_max_pos = to_size(k, v); };
  table["init_std"] = [&m](auto k, auto v) { m.init_std = to_double(k, v); };
}

void parse_lines(std::string_view text, std::map<std::string, Setter, std::less<>>& table) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t, std::less<>> seen;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(body.substr(0, eq));
    const auto value = trim(body.substr(eq + 1));
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (auto [s, fresh] = seen.try_emplace(std::string(key), line_no); !fresh)
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
    it->second(key, value);
  }
}

}  // namespace

const StageSettings& RunConfig::stage(int s) const {
  if (s == 1) return stage1;
  if (s == 2) return stage2;
  throw ConfigError("stage must be 1 or 2, got " + std::to_string(s));
}

AdamWConfig RunConfig::optim_for(int s) const {
  AdamWConfig c = optim;
  c.lr = stage(s).lr;
  return c;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig rc;
  std::map<std::string, Setter, std::less<>> table;
  set_model_key(rc.model, table);
  table["seed"] = [&rc](auto k, auto v) { rc.seed = to_size(k, v); };
  table["optim.beta1"] = [&rc](auto k, auto v) { rc.optim.beta1 = to_double(k, v); };
  table["optim.beta2"] = [&rc](auto k, auto v) { rc.optim.beta2 = to_double(k, v); };
  table["optim.eps"] = [&rc](auto k, auto v) { rc.optim.eps = to_double(k, v); };
  table["optim.weight_decay"] = [&rc](auto k, auto v) { rc.optim.weight_decay = to_double(k, v); };
  table["batch"] = [&rc](auto k, auto v) { rc.batch = to_size(k, v); };
  table["data"] = [&rc](auto, auto v) { rc.data = std::string(v); };
  table["out"] = [&rc](auto, auto v) { rc.out = std::string(v); };
  for (auto [prefix, st] : {std::pair{"stage1.", &rc.stage1}, std::pair{"stage2.", &rc.stage2}}) {
    const std::string p = prefix;
    table[p + "lr"] = [st](auto k, auto v) { st->lr = to_double(k, v); };
    table[p + "epochs"] = [st](auto k, auto v) { st->epochs = to_size(k, v); };
    table[p + "steps"] = [st](auto k, auto v) { st->steps = to_size(k, v); };
    table[p + "kinds"] = [st](auto, auto v) { st->kinds = to_list(v); };
  }
  parse_lines(text, table);
  if (rc.batch == 0) throw ConfigError("batch must be positive");
  for (const StageSettings* st : {&rc.stage1, &rc.stage2}) {
    if (!(st->lr > 0)) throw ConfigError("stage learning rates must be positive");
    if (st->epochs == 0 && st->steps == 0) throw ConfigError("a stage needs epochs or steps");
  }
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  try {
    return parse(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string RunConfig::to_text() const {
  std::string text = "seed = " + std::to_string(seed) + "\n";
  std::string m = model_config_text(model);
  // vocab_size comes from the data, not the run configuration.
  m = m.substr(0, m.find("vocab_size"));
  text += m;
  text += "optim.beta1 = " + fmt_double(optim.beta1) + "\n";
  text += "optim.beta2 = " + fmt_double(optim.beta2) + "\n";
  text += "optim.eps = " + fmt_double(optim.eps) + "\n";
  text += "optim.weight_decay = " + fmt_double(optim.weight_decay) + "\n";
  text += "batch = " + std::to_string(batch) + "\n";
  for (int s : {1, 2}) {
    const StageSettings& st = stage(s);
    const std::string p = "stage" + std::to_string(s) + ".";
    text += p + "lr = " + fmt_double(st.lr) + "\n";
    text += p + "epochs = " + std::to_string(st.epochs) + "\n";
    text += p + "steps = " + std::to_string(st.steps) + "\n";
    if (!st.kinds.empty()) text += p + "kinds = " + join(st.kinds) + "\n";
  }
  if (!data.empty()) text += "data = " + data + "\n";
  if (!out.empty()) text += "out = " + out + "\n";
  return text;
}

std::string model_config_text(const ModelConfig& c) {
  std::string out;
  out += "image_size = " + std::to_string(c.image_size) + "\n";
  out += "d_model = " + std::to_string(c.d_model) + "\n";
  out += "spatial_size = " + std::to_string(c.spatial_size) + "\n";
  out += "lm.layers = " + std::to_string(c.lm_layers) + "\n";
  out += "lm.heads = " + std::to_string(c.lm_heads) + "\n";
  out += "lm.ffn = " + std::to_string(c.lm_ffn) + "\n";
  out += "lm.max_pos = " + std::to_string(c.lm_max_pos) + "\n";
  out += "init_std = " + fmt_double(c.init_std) + "\n";
  out += "vocab_size = " + std::to_string(c.vocab_size) + "\n";
  return out;
}

ModelConfig parse_model_config(std::string_view text) {
  ModelConfig m;
  std::map<std::string, Setter, std::less<>> table;
  set_model_key(m, table);
  table["vocab_size"] = [&m](auto k, auto v) { m.vocab_size = to_size(k, v); };
  parse_lines(text, table);
  return m;
}

std::string config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : model_config_text(config)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace aquila
