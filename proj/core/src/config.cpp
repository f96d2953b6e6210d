#include "vnmt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vnmt {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, const char* expected) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (value.empty() || ec != std::errc{} || ptr != value.data() + value.size()) bad_value(key, value, expected);
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + format_double(values[i]);
  return out;
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item), "a number list"));
  if (out.empty()) bad_value(key, value, "a non-empty number list");
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

Field size_field(std::function<std::size_t&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_number<std::size_t>(k, v, "a non-negative integer");
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

Field real_field(std::function<double&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<double>(k, v, "a number"); },
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

Field text_field(std::function<std::string&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = v; },
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"vocab_size", size_field([](RunConfig& c) -> std::size_t& { return c.model.vocab_size; })},
      {"d_model", size_field([](RunConfig& c) -> std::size_t& { return c.model.d_model; })},
      {"n_heads", size_field([](RunConfig& c) -> std::size_t& { return c.model.n_heads; })},
      {"n_layers_enc", size_field([](RunConfig& c) -> std::size_t& { return c.model.n_layers_enc; })},
      {"n_layers_dec", size_field([](RunConfig& c) -> std::size_t& { return c.model.n_layers_dec; })},
      {"d_ffn", size_field([](RunConfig& c) -> std::size_t& { return c.model.d_ffn; })},
      {"latent", {[](RunConfig& c, const std::string&, const std::string& v) { c.model.latent = parse_latent_mode(v); },
                  [](const RunConfig& c) { return to_string(c.model.latent); }}},
      {"latent_dim", size_field([](RunConfig& c) -> std::size_t& { return c.model.latent_dim; })},
      {"flow_kind", {[](RunConfig& c, const std::string&, const std::string& v) { c.model.flow_kind = parse_flow_kind(v); },
                     [](const RunConfig& c) { return to_string(c.model.flow_kind); }}},
      {"flow_count", size_field([](RunConfig& c) -> std::size_t& { return c.model.flow_count; })},
      {"ortho_columns", size_field([](RunConfig& c) -> std::size_t& { return c.model.ortho_columns; })},
      {"posterior_conditioning",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.model.conditioning = parse_conditioning(v); },
        [](const RunConfig& c) { return to_string(c.model.conditioning); }}},
      {"beta", real_field([](RunConfig& c) -> double& { return c.schedule.beta; })},
      {"kl_target", real_field([](RunConfig& c) -> double& { return c.schedule.kl_target; })},
      {"anneal_steps", size_field([](RunConfig& c) -> std::size_t& { return c.schedule.anneal_steps; })},
      {"word_dropout", real_field([](RunConfig& c) -> double& { return c.schedule.word_dropout; })},
      {"mc_samples", size_field([](RunConfig& c) -> std::size_t& { return c.schedule.mc_samples; })},
      {"task", {[](RunConfig& c, const std::string&, const std::string& v) { c.task.task = parse_task(v); },
                [](const RunConfig& c) { return to_string(c.task.task); }}},
      {"min_len", size_field([](RunConfig& c) -> std::size_t& { return c.task.min_len; })},
      {"max_len", size_field([](RunConfig& c) -> std::size_t& { return c.task.max_len; })},
      {"modes", size_field([](RunConfig& c) -> std::size_t& { return c.task.modes; })},
      {"mode_probs", {[](RunConfig& c, const std::string& k, const std::string& v) { c.task.mode_probs = parse_list(k, v); },
                      [](const RunConfig& c) { return format_list(c.task.mode_probs); }}},
      {"source_repeats", size_field([](RunConfig& c) -> std::size_t& { return c.task.source_repeats; })},
      {"train_size", size_field([](RunConfig& c) -> std::size_t& { return c.train_size; })},
      {"dev_size", size_field([](RunConfig& c) -> std::size_t& { return c.dev_size; })},
      {"train_corpus", text_field([](RunConfig& c) -> std::string& { return c.train_corpus; })},
      {"dev_corpus", text_field([](RunConfig& c) -> std::string& { return c.dev_corpus; })},
      {"learning_rate", real_field([](RunConfig& c) -> double& { return c.learning_rate; })},
      {"steps", size_field([](RunConfig& c) -> std::size_t& { return c.steps; })},
      {"batch_size", size_field([](RunConfig& c) -> std::size_t& { return c.batch_size; })},
      {"clip_norm", real_field([](RunConfig& c) -> double& { return c.clip_norm; })},
      {"eval_interval", size_field([](RunConfig& c) -> std::size_t& { return c.eval_interval; })},
      {"eval_beam", size_field([](RunConfig& c) -> std::size_t& { return c.eval_beam; })},
      {"max_decode_len", size_field([](RunConfig& c) -> std::size_t& { return c.max_decode_len; })},
      {"seed", {[](RunConfig& c, const std::string& k, const std::string& v) {
                  c.seed = parse_number<std::uint64_t>(k, v, "a non-negative integer");
                },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"out_dir", text_field([](RunConfig& c) -> std::string& { return c.out_dir; })},
  };
  return table;
}

const Field& field(const std::string& key) {
  static const auto index = [] {
    std::map<std::string, const Field*> m;
    for (const auto& [k, f] : fields()) m.emplace(k, &f);
    return m;
  }();
  const auto it = index.find(key);
  if (it == index.end()) throw std::invalid_argument("unknown config key '" + key + "'");
  return *it->second;
}

}  // namespace

RunConfig::RunConfig() { task.vocab_size = model.vocab_size; }

void RunConfig::validate() const {
  model.validate();
  schedule.validate();
  task.validate();
  if (task.vocab_size != model.vocab_size) {
    throw std::invalid_argument("task vocab_size " + std::to_string(task.vocab_size) + " differs from model vocab_size " +
                                std::to_string(model.vocab_size));
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be >= 1");
  if (eval_beam == 0) throw std::invalid_argument("eval_beam must be >= 1");
  if (train_corpus.empty() && train_size == 0) throw std::invalid_argument("train_size must be >= 1");
}

std::size_t RunConfig::decode_limit() const { return max_decode_len > 0 ? max_decode_len : 2 * task.max_len + 2; }

const std::vector<std::string>& config_keys() {
  static const auto keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, key, value);
  // The task's vocabulary follows the model's unless configured separately.
  if (key == "vocab_size") config.task.vocab_size = config.model.vocab_size;
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return field(key).get(config); }

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::stringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(number) + ": expected key=value");
    }
    try {
      set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + "=" + f.get(config) + "\n";
  return out;
}

}  // namespace vnmt
