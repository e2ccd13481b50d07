#include "ilcot/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ilcot/error.hpp"

namespace ilcot {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw Error(Errc::UsageError, "bad value for " + key + ": '" + value + "'");
  return out;
}

}  // namespace

Settings parse_settings(const std::string& text) {
  Settings s;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::UsageError, "config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(Errc::UsageError, "config line " + std::to_string(line_no) + ": empty key");
    s[key] = trim(line.substr(eq + 1));
  }
  return s;
}

Settings read_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoError, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_settings(ss.str());
}

void apply_settings(TrainConfig& cfg, const Settings& s) {
  for (const auto& [key, value] : s) {
    if (key == "lr") cfg.lr = parse_number<double>(key, value);
    else if (key == "beta1") cfg.beta1 = parse_number<double>(key, value);
    else if (key == "beta2") cfg.beta2 = parse_number<double>(key, value);
    else if (key == "eps") cfg.eps = parse_number<double>(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(key, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_number<double>(key, value);
    else if (key == "steps") cfg.steps = parse_number<int>(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_number<int>(key, value);
    else if (key == "lambda_ce") cfg.lambda_ce = parse_number<double>(key, value);
    else if (key == "time_shift") cfg.time_shift = parse_number<double>(key, value);
    else if (key == "text_only_fraction") cfg.text_only_fraction = parse_number<double>(key, value);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_number<int>(key, value);
    else if (key == "d") cfg.model.d = parse_number<int>(key, value);
    else if (key == "layers") cfg.model.layers = parse_number<int>(key, value);
    else if (key == "heads") cfg.model.heads = parse_number<int>(key, value);
    else throw Error(Errc::UsageError, "unknown config key '" + key + "'");
  }
}

Settings to_settings(const TrainConfig& cfg) {
  auto num = [](auto v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {{"lr", num(cfg.lr)},
          {"beta1", num(cfg.beta1)},
          {"beta2", num(cfg.beta2)},
          {"eps", num(cfg.eps)},
          {"weight_decay", num(cfg.weight_decay)},
          {"grad_clip", num(cfg.grad_clip)},
          {"steps", num(cfg.steps)},
          {"batch_size", num(cfg.batch_size)},
          {"lambda_ce", num(cfg.lambda_ce)},
          {"time_shift", num(cfg.time_shift)},
          {"text_only_fraction", num(cfg.text_only_fraction)},
          {"seed", num(cfg.seed)},
          {"checkpoint_every", num(cfg.checkpoint_every)},
          {"d", num(cfg.model.d)},
          {"layers", num(cfg.model.layers)},
          {"heads", num(cfg.model.heads)}};
}

}  // namespace ilcot
