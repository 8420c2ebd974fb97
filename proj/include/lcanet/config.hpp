#pragma once

// Run configuration as a flat key=value document with dotted section
// prefixes, e.g.
//
//   seed=7
//   model.stage_channels=16,32,64,64,64
//   loss.lambda=1,1,0.5,0.5
//
// Blank lines and lines starting with '#' are ignored. Unknown keys are errors.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/data.hpp"
#include "lcanet/network.hpp"
#include "lcanet/objectives.hpp"

namespace lcanet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optim;
  AugmentConfig augment;
  bool augment_enabled = true;
  bool mean_from_data = true;  // take augment.mean from the dataset's stats.txt
  std::string data_dir = "data/train";
  std::string out_dir = "runs/default";
  std::uint64_t seed = 0;
  int checkpoint_every = 500;

  void validate() const {
    model.validate();
    loss.validate();
    optim.validate();
    augment.validate();
    if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

inline long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long d = std::stol(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

template <typename Seq>
std::string join_numbers(const Seq& xs) {
  std::vector<std::string> parts;
  for (auto x : xs) parts.push_back(fmt_double(static_cast<double>(x)));
  return join(parts);
}

/// Getter/setter pair per key so parsing and serialisation share one table.
struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto num = [&](const std::string& key, auto member) {
      f[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) {
                  using M = std::remove_reference_t<decltype(member(c))>;
                  if constexpr (std::is_floating_point_v<M>) member(c) = to_double(k, v);
                  else member(c) = static_cast<M>(to_long(k, v));
                },
                [member](const RunConfig& c) {
                  auto& m = member(const_cast<RunConfig&>(c));
                  if constexpr (std::is_floating_point_v<std::remove_reference_t<decltype(m)>>) return fmt_double(m);
                  else return std::to_string(m);
                }};
    };
    auto flag = [&](const std::string& key, auto member) {
      f[key] = {[member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = to_bool(k, v); },
                [member](const RunConfig& c) {
                  return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false");
                }};
    };
    auto text = [&](const std::string& key, auto member) {
      f[key] = {[member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; },
                [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
    };

    num("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    text("data_dir", [](RunConfig& c) -> std::string& { return c.data_dir; });
    text("out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; });

    num("model.input_size", [](RunConfig& c) -> int& { return c.model.input_h; });
    f["model.input_size"].set = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.model.input_h = c.model.input_w = static_cast<int>(to_long(k, v));
      c.augment.crop_h = c.augment.crop_w = c.model.input_h;
    };
    f["model.stage_channels"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                   c.model.stage_channels.clear();
                                   for (const auto& s : split_list(v))
                                     c.model.stage_channels.push_back(static_cast<int>(to_long(k, s)));
                                 },
                                 [](const RunConfig& c) { return join_numbers(c.model.stage_channels); }};
    f["model.heads"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.model.heads = parse_heads(v); },
                        [](const RunConfig& c) { return std::string(to_string(c.model.heads)); }};
    f["model.attention_kind"] = {
        [](RunConfig& c, const std::string&, const std::string& v) { c.model.attention_kind = parse_attention_kind(v); },
        [](const RunConfig& c) { return std::string(to_string(c.model.attention_kind)); }};
    flag("model.use_grb", [](RunConfig& c) -> bool& { return c.model.use_grb; });
    num("model.lcb.kernel_size", [](RunConfig& c) -> int& { return c.model.lcb.kernel_size; });
    f["model.lcb.scales"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                               c.model.lcb.scales.clear();
                               for (const auto& s : split_list(v)) c.model.lcb.scales.push_back(to_double(k, s));
                             },
                             [](const RunConfig& c) { return join_numbers(c.model.lcb.scales); }};
    flag("model.lcb.use_lcc", [](RunConfig& c) -> bool& { return c.model.lcb.use_lcc; });
    f["model.lcb.stages"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                               c.model.lcb.stages.clear();
                               for (const auto& s : split_list(v))
                                 c.model.lcb.stages.push_back(static_cast<int>(to_long(k, s)));
                             },
                             [](const RunConfig& c) { return join_numbers(c.model.lcb.stages); }};
    num("model.baseline.reduction", [](RunConfig& c) -> int& { return c.model.baseline.reduction; });
    num("model.baseline.embed_channels", [](RunConfig& c) -> int& { return c.model.baseline.embed_channels; });
    num("model.baseline.kernel_size", [](RunConfig& c) -> int& { return c.model.baseline.kernel_size; });
    num("model.baseline.scale", [](RunConfig& c) -> double& { return c.model.baseline.scale; });

    f["loss.lambda"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          const auto parts = split_list(v);
                          if (parts.size() != 4) throw ConfigError(k + ": expected 4 comma-separated weights");
                          for (int i = 0; i < 4; ++i) c.loss.lambda[i] = to_double(k, parts[i]);
                        },
                        [](const RunConfig& c) { return join_numbers(c.loss.lambda); }};
    num("loss.ohem_keep", [](RunConfig& c) -> double& { return c.loss.ohem_keep; });
    num("loss.ohem_min_pixels", [](RunConfig& c) -> std::size_t& { return c.loss.ohem_min_pixels; });
    num("loss.edge_threshold", [](RunConfig& c) -> double& { return c.loss.edge_threshold; });

    num("optim.base_lr", [](RunConfig& c) -> double& { return c.optim.base_lr; });
    num("optim.momentum", [](RunConfig& c) -> double& { return c.optim.momentum; });
    num("optim.weight_decay", [](RunConfig& c) -> double& { return c.optim.weight_decay; });
    num("optim.power", [](RunConfig& c) -> double& { return c.optim.power; });
    num("optim.max_iter", [](RunConfig& c) -> int& { return c.optim.max_iter; });
    num("optim.batch_size", [](RunConfig& c) -> int& { return c.optim.batch_size; });

    flag("augment.enabled", [](RunConfig& c) -> bool& { return c.augment_enabled; });
    num("augment.flip_prob", [](RunConfig& c) -> double& { return c.augment.flip_prob; });
    f["augment.scale_range"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                  const auto parts = split_list(v);
                                  if (parts.size() != 2) throw ConfigError(k + ": expected lo,hi");
                                  c.augment.scale_lo = to_double(k, parts[0]);
                                  c.augment.scale_hi = to_double(k, parts[1]);
                                },
                                [](const RunConfig& c) {
                                  return join_numbers(std::vector<double>{c.augment.scale_lo, c.augment.scale_hi});
                                }};
    f["augment.mean"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                           if (v == "auto") {
                             c.mean_from_data = true;
                             return;
                           }
                           const auto parts = split_list(v);
                           if (parts.size() != 3) throw ConfigError(k + ": expected auto or r,g,b");
                           for (int i = 0; i < 3; ++i) c.augment.mean[i] = to_double(k, parts[i]);
                           c.mean_from_data = false;
                         },
                         [](const RunConfig& c) {
                           return c.mean_from_data ? std::string("auto") : join_numbers(c.augment.mean);
                         }};

    num("train.checkpoint_every", [](RunConfig& c) -> int& { return c.checkpoint_every; });
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, key, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

/// Parses key=value lines on top of `base`; validates the result.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  try {
    base.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return base;
}

/// Reads a config file; LCANET_SEED in the environment overrides `seed`.
inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_config(ss.str());
  if (const char* env = std::getenv("LCANET_SEED")) cfg.seed = static_cast<std::uint64_t>(detail::to_long("LCANET_SEED", env));
  return cfg;
}

/// Every key, one per line, in a form parse_config accepts.
inline std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + "=" + field.get(cfg) + "\n";
  return out;
}

}  // namespace lcanet
