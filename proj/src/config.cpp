#include "ctefm/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ctefm {

namespace {

const char* kValidKeys[] = {
    // optimization
    "learning_rate", "batch_size", "max_iters", "weight_decay", "seed",
    "reference_duration_s", "euler_steps_eval", "lambda_tim", "timbre_warmup_iters",
    "grad_clip", "checkpoint_every", "threads", "adam_beta1", "adam_beta2", "adam_eps",
    // model
    "model_dim", "n_heads", "ffn_dim", "n_blocks", "content_dim",
    "unet_base_channels", "unet_mid_channels", "unet_kernel", "temb_dim", "sigma_min",
    // features
    "n_mels", "n_fft", "win_length", "hop_length", "fmin", "fmax",
    "content_frame_rate", "content_seed", "sv_dims", "sv_seeds"};

std::string valid_key_list() {
  std::string s;
  for (const char* k : kValidKeys) {
    if (!s.empty()) s += ", ";
    s += k;
  }
  return s;
}

bool is_valid_key(const std::string& key) {
  return std::any_of(std::begin(kValidKeys), std::end(kValidKeys),
                     [&](const char* k) { return key == k; });
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

// Parses a TOML-style scalar or flat array into JSON.
nlohmann::json parse_toml_value(const std::string& raw, const std::string& key, int line_no) {
  const std::string v = trim(raw);
  if (v.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty value");
  if (v.front() == '"' && v.back() == '"' && v.size() >= 2) {
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  if (v.front() == '[') {
    if (v.back() != ']') {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": unterminated array");
    }
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(v.substr(1, v.size() - 2));
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (part.empty()) continue;
      arr.push_back(std::stod(part));
    }
    return arr;
  }
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::runtime_error("config line " + std::to_string(line_no) + ": cannot parse value for '" +
                             key + "': " + v);
  }
}

nlohmann::json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();

  // JSON object?
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error("invalid JSON config: " + path);
    return j;
  }

  nlohmann::json j = nlohmann::json::object();
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    j[key] = parse_toml_value(line.substr(eq + 1), key, line_no);
  }
  return j;
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunSetup::finalize() {
  registry.mel = mel;
  registry.content_dim = model.cte.content_dim;
  if (registry.sv_seeds.size() < registry.sv_dims.size()) {
    // derive missing provider seeds from the training seed
    while (registry.sv_seeds.size() < registry.sv_dims.size()) {
      registry.sv_seeds.push_back(
          Rng::derive(train.seed, Rng::hash_str("sv-provider"), registry.sv_seeds.size()));
    }
  }
  registry.sv_seeds.resize(registry.sv_dims.size());
  model.cte.sv_dims = registry.sv_dims;
  model.link(mel.n_mels);
  train.validate();
  model.validate();
  mel.validate();
}

RunSetup default_run_setup() {
  RunSetup s;
  s.finalize();
  return s;
}

RunSetup parse_run_config_json(const nlohmann::json& j) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!is_valid_key(key)) {
      throw std::runtime_error("unknown config key '" + key + "'; valid keys: " + valid_key_list());
    }
  }
  RunSetup s;
  take(j, "learning_rate", s.train.learning_rate);
  take(j, "batch_size", s.train.batch_size);
  take(j, "max_iters", s.train.max_iters);
  take(j, "weight_decay", s.train.weight_decay);
  take(j, "seed", s.train.seed);
  take(j, "reference_duration_s", s.train.reference_duration_s);
  take(j, "euler_steps_eval", s.train.euler_steps_eval);
  take(j, "lambda_tim", s.train.lambda_tim);
  take(j, "timbre_warmup_iters", s.train.timbre_warmup_iters);
  take(j, "grad_clip", s.train.grad_clip);
  take(j, "checkpoint_every", s.train.checkpoint_every);
  take(j, "threads", s.train.threads);
  take(j, "adam_beta1", s.train.adam_beta1);
  take(j, "adam_beta2", s.train.adam_beta2);
  take(j, "adam_eps", s.train.adam_eps);

  take(j, "model_dim", s.model.cte.model_dim);
  take(j, "n_heads", s.model.cte.n_heads);
  take(j, "ffn_dim", s.model.cte.ffn_dim);
  take(j, "n_blocks", s.model.cte.n_blocks);
  take(j, "content_dim", s.model.cte.content_dim);
  take(j, "unet_base_channels", s.model.vf.base_channels);
  take(j, "unet_mid_channels", s.model.vf.mid_channels);
  take(j, "unet_kernel", s.model.vf.kernel);
  take(j, "temb_dim", s.model.vf.temb_dim);
  take(j, "sigma_min", s.model.flow.sigma_min);

  take(j, "n_mels", s.mel.n_mels);
  take(j, "n_fft", s.mel.n_fft);
  take(j, "win_length", s.mel.win_length);
  take(j, "hop_length", s.mel.hop_length);
  take(j, "fmin", s.mel.fmin);
  take(j, "fmax", s.mel.fmax);
  take(j, "content_frame_rate", s.registry.content_frame_rate);
  take(j, "content_seed", s.registry.content_seed);
  if (j.contains("sv_dims")) s.registry.sv_dims = j.at("sv_dims").get<std::vector<int>>();
  if (j.contains("sv_seeds")) {
    s.registry.sv_seeds = j.at("sv_seeds").get<std::vector<std::uint64_t>>();
  }
  s.finalize();
  return s;
}

RunSetup load_run_config(const std::string& path) {
  return parse_run_config_json(read_config_file(path));
}

}  // namespace ctefm
