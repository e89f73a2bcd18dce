#include "cellstn/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "cellstn/errors.hpp"

namespace cellstn {

void TrainConfig::validate() const {
  geom.validate();
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ContractError("kappa must be a non-negative finite number");
  const std::pair<const char*, const StageSchedule*> stages[] = {
      {"stage1", &stage1}, {"stage2", &stage2}, {"stage3", &stage3}, {"baseline", &baseline}};
  for (const auto& [name, s] : stages) {
    if (s->epochs < 1) throw ContractError(std::string(name) + " needs at least one epoch");
    if (!(s->learning_rate > 0.0) || !std::isfinite(s->learning_rate))
      throw ContractError(std::string(name) + " learning rate must be positive");
  }
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (folds < 2) throw ContractError("folds must be at least 2");
  if (localizer_stride < 1) throw ContractError("localizer_stride must be at least 1");
}

TrainConfig TrainConfig::scaled(std::size_t divisor) const {
  if (divisor == 0) throw ContractError("schedule divisor must be positive");
  TrainConfig c = *this;
  for (StageSchedule* s : {&c.stage1, &c.stage2, &c.stage3, &c.baseline})
    s->epochs = std::max<std::size_t>(1, s->epochs / divisor);
  return c;
}

TrainConfig desk_config() { return TrainConfig{}.scaled(10); }

namespace {

template <typename T>
T parse_as(std::string_view key, std::string_view v) {
  T out{};
  const char* end = v.data() + v.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(v.data(), end, out, std::chars_format::general);
  } else {
    r = std::from_chars(v.data(), end, out);
  }
  if (r.ec != std::errc() || r.ptr != end)
    throw ParseError("config: '" + std::string(key) + "' has an invalid value '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ParseError("config: '" + std::string(key) + "' must be true or false, got '" + std::string(v) + "'");
}

using Setter = std::function<void(TrainConfig&, std::string_view key, std::string_view value)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const auto table = [] {
    std::map<std::string, Setter, std::less<>> t;
    t["input_size"] = [](TrainConfig& c, auto k, auto v) { c.geom.input_size = parse_as<int>(k, v); };
    t["cell_size"] = [](TrainConfig& c, auto k, auto v) { c.geom.cell_size = parse_as<int>(k, v); };
    t["scale"] = [](TrainConfig& c, auto k, auto v) { c.geom.scale = parse_as<double>(k, v); };
    t["kappa"] = [](TrainConfig& c, auto k, auto v) { c.kappa = parse_as<double>(k, v); };
    const std::pair<const char*, StageSchedule TrainConfig::*> stages[] = {{"stage1", &TrainConfig::stage1},
                                                                         {"stage2", &TrainConfig::stage2},
                                                                         {"stage3", &TrainConfig::stage3},
                                                                         {"baseline", &TrainConfig::baseline}};
    for (const auto& [name, member] : stages) {
      t[std::string(name) + "_epochs"] = [member](TrainConfig& c, auto k, auto v) {
        (c.*member).epochs = parse_as<std::size_t>(k, v);
      };
      t[std::string(name) + "_lr"] = [member](TrainConfig& c, auto k, auto v) {
        (c.*member).learning_rate = parse_as<double>(k, v);
      };
    }
    t["batch_size"] = [](TrainConfig& c, auto k, auto v) { c.batch_size = parse_as<std::size_t>(k, v); };
    t["folds"] = [](TrainConfig& c, auto k, auto v) { c.folds = parse_as<std::size_t>(k, v); };
    t["seed"] = [](TrainConfig& c, auto k, auto v) { c.seed = parse_as<std::uint64_t>(k, v); };
    t["localizer_stride"] = [](TrainConfig& c, auto k, auto v) { c.localizer_stride = parse_as<std::size_t>(k, v); };
    t["augment"] = [](TrainConfig& c, auto k, auto v) { c.augment = parse_bool(k, v); };
    t["balance"] = [](TrainConfig& c, auto k, auto v) { c.balance = parse_bool(k, v); };
    return t;
  }();
  return table;
}

std::string_view strip(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void set_config_value(TrainConfig& config, std::string_view key, std::string_view value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ParseError("config: unknown key '" + std::string(key) + "'");
  it->second(config, key, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = line.substr(0, i);
        break;
      }
    }
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string_view key = strip(line.substr(0, eq));
    std::string_view value = strip(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    try {
      set_config_value(base, key, value);
    } catch (const ParseError& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string format_config(const TrainConfig& c) {
  std::ostringstream out;
  char buf[64];
  const auto real = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "input_size = " << c.geom.input_size << "\n"
      << "cell_size = " << c.geom.cell_size << "\n"
      << "scale = " << real(c.geom.scale) << "\n"
      << "kappa = " << real(c.kappa) << "\n";
  const std::pair<const char*, const StageSchedule*> stages[] = {
      {"stage1", &c.stage1}, {"stage2", &c.stage2}, {"stage3", &c.stage3}, {"baseline", &c.baseline}};
  for (const auto& [name, s] : stages)
    out << name << "_epochs = " << s->epochs << "\n" << name << "_lr = " << real(s->learning_rate) << "\n";
  out << "batch_size = " << c.batch_size << "\n"
      << "folds = " << c.folds << "\n"
      << "seed = " << c.seed << "\n"
      << "localizer_stride = " << c.localizer_stride << "\n"
      << "augment = " << (c.augment ? "true" : "false") << "\n"
      << "balance = " << (c.balance ? "true" : "false") << "\n";
  return out.str();
}

}  // namespace cellstn
