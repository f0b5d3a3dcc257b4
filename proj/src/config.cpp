#include "fssi/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fssi/errors.hpp"

namespace fssi {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value, char sep) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(parse_uint(key, trim(item)));
  return out;
}

}  // namespace

void RunConfig::set_seed(std::uint64_t value) {
  seed = value;
  model.seed = value;
  train.rng_seed = value;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (eval.k_way < 1 || eval.repeats < 1) throw ConfigError("eval_k and eval_repeats must be >= 1");
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::stringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "variant") {
      c.model.variant = parse_conv_variant(value);
    } else if (key == "use_ca") {
      c.model.use_ca = parse_bool(key, value);
    } else if (key == "channels") {
      c.model.channels = parse_list(key, value, ',');
    } else if (key == "kernel") {
      const auto dims = parse_list(key, value, 'x');
      if (dims.size() != 2) throw ConfigError("config key 'kernel': expected HxW, got '" + value + "'");
      c.model.kernel_h = dims[0];
      c.model.kernel_w = dims[1];
    } else if (key == "ca_reduction") {
      c.model.ca_reduction = parse_uint(key, value);
    } else if (key == "embed_dim") {
      c.model.embed_dim = parse_uint(key, value);
    } else if (key == "K") {
      c.train.k_way = parse_uint(key, value);
    } else if (key == "N") {
      c.train.n_shot = parse_uint(key, value);
    } else if (key == "Q") {
      c.train.n_query = parse_uint(key, value);
    } else if (key == "epochs") {
      c.train.max_epochs = parse_uint(key, value);
    } else if (key == "episodes_per_epoch") {
      c.train.episodes_per_epoch = parse_uint(key, value);
    } else if (key == "lr") {
      c.train.learning_rate = parse_double(key, value);
    } else if (key == "crop_frames") {
      c.train.crop_frames = parse_uint(key, value);
    } else if (key == "eval_k") {
      c.eval.k_way = parse_uint(key, value);
    } else if (key == "eval_repeats") {
      c.eval.repeats = parse_uint(key, value);
    } else if (key == "eval_shots") {
      c.eval.shots = parse_uint(key, value);
    } else if (key == "seed") {
      c.set_seed(parse_uint(key, value));
    } else if (key == "manifest") {
      c.manifest = value;
    } else if (key == "checkpoint") {
      c.checkpoint = value;
    } else if (key == "out") {
      c.out = value;
    } else {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_config(const RunConfig& c) {
  std::ostringstream out;
  out << "variant=" << to_string(c.model.variant) << '\n';
  out << "use_ca=" << (c.model.use_ca ? "true" : "false") << '\n';
  out << "channels=";
  for (std::size_t i = 0; i < c.model.channels.size(); ++i) {
    out << (i ? "," : "") << c.model.channels[i];
  }
  out << '\n';
  out << "kernel=" << c.model.kernel_h << 'x' << c.model.kernel_w << '\n';
  out << "ca_reduction=" << c.model.ca_reduction << '\n';
  out << "embed_dim=" << c.model.embed_dim << '\n';
  out << "K=" << c.train.k_way << "\nN=" << c.train.n_shot << "\nQ=" << c.train.n_query << '\n';
  out << "epochs=" << c.train.max_epochs << '\n';
  out << "episodes_per_epoch=" << c.train.episodes_per_epoch << '\n';
  char lr[32];
  std::snprintf(lr, sizeof lr, "%.17g", c.train.learning_rate);
  out << "lr=" << lr << '\n';
  out << "crop_frames=" << c.train.crop_frames << '\n';
  out << "eval_k=" << c.eval.k_way << "\neval_repeats=" << c.eval.repeats
      << "\neval_shots=" << c.eval.shots << '\n';
  out << "seed=" << c.seed << '\n';
  if (!c.manifest.empty()) out << "manifest=" << c.manifest << '\n';
  if (!c.checkpoint.empty()) out << "checkpoint=" << c.checkpoint << '\n';
  if (!c.out.empty()) out << "out=" << c.out << '\n';
  return out.str();
}

}  // namespace fssi
