#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainpred/chain.hpp"
#include "chainpred/nets.hpp"
#include "chainpred/synthdata.hpp"

namespace chainpred {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every knob of a run, grouped by the module it feeds. Defaults reproduce
// the standard single-image setup.
struct RunConfig {
  std::string task = "single_image";  // single_image | video
  NetConfig net;
  ChainConfig chain;

  struct Training {
    int batch = 8;
    double lr = 0.003;
    double momentum = 0.9;
    double decay = 0.3;
    int decay_horizon = 2000;
    int steps = 5000;
    double p_min = 0.0;            // scheduled-sampling floor
    int schedule_horizon = 0;      // 0 = anneal over all training steps
    int checkpoint_every = 1000;
    std::uint64_t seed = 1;
  } training;

  struct Data {
    SceneConfig scene;
    int train_size = 5000;
    int test_size = 500;
    int frames = 8;  // video sequence length
  } data;

  struct Eval {
    double alpha = 0.2;
    double beta = 0.5;
    std::string mode = "bbox";  // bbox | head
    int beam = 16;
    double viterbi_lambda = 1.0;
  } eval;
};

namespace detail {

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline long long cfg_int(const std::string& v) {
  std::size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

inline double cfg_double(const std::string& v) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

inline bool cfg_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

inline std::vector<int> cfg_int_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto n = cfg_int(item);
    out.push_back(static_cast<int>(n));
  }
  if (out.empty()) throw ConfigError("expected a comma-separated int list");
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

inline const std::vector<KeySpec>& key_specs() {
  using C = RunConfig;
  auto int_key = [](std::string name, std::function<int&(C&)> ref, int lo,
                    int hi) {
    return KeySpec{
        name,
        [=](C& c, const std::string& v) {
          auto n = cfg_int(v);
          require(n >= lo && n <= hi, name + " out of range [" +
                                          std::to_string(lo) + "," +
                                          std::to_string(hi) + "]");
          ref(c) = static_cast<int>(n);
        },
        [=](const C& c) { return std::to_string(ref(const_cast<C&>(c))); }};
  };
  auto dbl_key = [](std::string name, std::function<double&(C&)> ref,
                    double lo, double hi) {
    return KeySpec{name,
                   [=](C& c, const std::string& v) {
                     double d = cfg_double(v);
                     require(d >= lo && d <= hi,
                             name + " out of range [" + fmt_double(lo) + "," +
                                 fmt_double(hi) + "]");
                     ref(c) = d;
                   },
                   [=](const C& c) {
                     return fmt_double(ref(const_cast<C&>(c)));
                   }};
  };
  auto bool_key = [](std::string name, std::function<bool&(C&)> ref) {
    return KeySpec{
        name,
        [=](C& c, const std::string& v) { ref(c) = cfg_bool(v); },
        [=](const C& c) {
          return ref(const_cast<C&>(c)) ? std::string("true")
                                        : std::string("false");
        }};
  };
  auto enum_key = [](std::string name, std::function<std::string&(C&)> ref,
                     std::vector<std::string> allowed) {
    return KeySpec{name,
                   [=](C& c, const std::string& v) {
                     for (auto& a : allowed)
                       if (v == a) {
                         ref(c) = v;
                         return;
                       }
                     std::string opts;
                     for (auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
                     throw ConfigError(name + " must be one of " + opts);
                   },
                   [=](const C& c) { return ref(const_cast<C&>(c)); }};
  };

  static const std::vector<KeySpec> specs = {
      enum_key("task", [](C& c) -> std::string& { return c.task; },
               {"single_image", "video"}),

      KeySpec{"net.encoder_channels",
              [](C& c, const std::string& v) {
                auto list = cfg_int_list(v);
                for (int ch : list)
                  require(ch >= 1 && ch <= 1024,
                          "net.encoder_channels entries must be in [1,1024]");
                c.net.encoder_channels = list;
              },
              [](const C& c) { return join_ints(c.net.encoder_channels); }},
      int_key("net.encoder_pools",
              [](C& c) -> int& { return c.net.encoder_pools; }, 1, 6),
      KeySpec{"net.deception_kernels",
              [](C& c, const std::string& v) {
                auto list = cfg_int_list(v);
                for (int k : list)
                  require(k >= 2 && k <= 16 && k % 2 == 0,
                          "net.deception_kernels entries must be even, in "
                          "[2,16]");
                c.net.deception_kernels = list;
              },
              [](const C& c) { return join_ints(c.net.deception_kernels); }},
      int_key("net.deception_branch_channels",
              [](C& c) -> int& { return c.net.deception_branch_channels; }, 1,
              256),
      bool_key("net.single_deconv",
               [](C& c) -> bool& { return c.net.single_deconv; }),
      int_key("net.feedback_channels",
              [](C& c) -> int& { return c.net.feedback_channels; }, 1, 256),

      int_key("chain.T", [](C& c) -> int& { return c.chain.steps; }, 1, 64),
      int_key("chain.joints", [](C& c) -> int& { return c.chain.joints; }, 1,
              64),
      int_key("chain.T_H", [](C& c) -> int& { return c.chain.time_horizon; },
              1, 64),
      int_key("chain.feedback_count",
              [](C& c) -> int& { return c.chain.feedback_count; }, -1, 64),
      bool_key("chain.recurrent",
               [](C& c) -> bool& { return c.chain.recurrent; }),
      KeySpec{"chain.feedback_mode",
              [](C& c, const std::string& v) {
                if (v == "hard")
                  c.chain.feedback_mode = FeedbackMode::kHard;
                else if (v == "soft")
                  c.chain.feedback_mode = FeedbackMode::kSoft;
                else
                  throw ConfigError("chain.feedback_mode must be hard|soft");
              },
              [](const C& c) {
                return c.chain.feedback_mode == FeedbackMode::kHard
                           ? std::string("hard")
                           : std::string("soft");
              }},
      dbl_key("chain.target_radius",
              [](C& c) -> double& { return c.chain.target_radius; }, 0.0,
              16.0),

      int_key("training.batch",
              [](C& c) -> int& { return c.training.batch; }, 1, 1024),
      dbl_key("training.lr", [](C& c) -> double& { return c.training.lr; },
              1e-8, 10.0),
      dbl_key("training.momentum",
              [](C& c) -> double& { return c.training.momentum; }, 0.0,
              0.999),
      dbl_key("training.decay",
              [](C& c) -> double& { return c.training.decay; }, 1e-4, 1.0),
      int_key("training.decay_horizon",
              [](C& c) -> int& { return c.training.decay_horizon; }, 1,
              1000000),
      int_key("training.steps",
              [](C& c) -> int& { return c.training.steps; }, 0, 10000000),
      dbl_key("training.p_min",
              [](C& c) -> double& { return c.training.p_min; }, 0.0, 1.0),
      int_key("training.schedule_horizon",
              [](C& c) -> int& { return c.training.schedule_horizon; }, 0,
              10000000),
      int_key("training.checkpoint_every",
              [](C& c) -> int& { return c.training.checkpoint_every; }, 1,
              10000000),
      KeySpec{"training.seed",
              [](C& c, const std::string& v) {
                auto n = cfg_int(v);
                require(n >= 0, "training.seed must be non-negative");
                c.training.seed = static_cast<std::uint64_t>(n);
              },
              [](const C& c) { return std::to_string(c.training.seed); }},

      int_key("data.image_size",
              [](C& c) -> int& { return c.data.scene.image_size; }, 16, 512),
      int_key("data.joints",
              [](C& c) -> int& { return c.data.scene.joints; }, 1, 64),
      dbl_key("data.noise",
              [](C& c) -> double& { return c.data.scene.noise; }, 0.0, 1.0),
      int_key("data.clutter",
              [](C& c) -> int& { return c.data.scene.clutter; }, 0, 64),
      dbl_key("data.occlusion_rate",
              [](C& c) -> double& { return c.data.scene.occlusion_rate; },
              0.0, 1.0),
      dbl_key("data.occlusion_persistence",
              [](C& c) -> double& {
                return c.data.scene.occlusion_persistence;
              },
              0.0, 0.99),
      dbl_key("data.forearm_rate",
              [](C& c) -> double& { return c.data.scene.forearm_rate; },
              0.0, 1.0),
      dbl_key("data.max_angle_step",
              [](C& c) -> double& { return c.data.scene.max_angle_step; },
              0.0, 3.2),
      dbl_key("data.max_shift_step",
              [](C& c) -> double& { return c.data.scene.max_shift_step; },
              0.0, 32.0),
      int_key("data.train_size",
              [](C& c) -> int& { return c.data.train_size; }, 1, 10000000),
      int_key("data.test_size",
              [](C& c) -> int& { return c.data.test_size; }, 1, 10000000),
      int_key("data.frames", [](C& c) -> int& { return c.data.frames; }, 1,
              256),

      dbl_key("eval.alpha", [](C& c) -> double& { return c.eval.alpha; },
              1e-6, 100.0),
      dbl_key("eval.beta", [](C& c) -> double& { return c.eval.beta; }, 1e-6,
              100.0),
      enum_key("eval.mode",
               [](C& c) -> std::string& { return c.eval.mode; },
               {"bbox", "head"}),
      int_key("eval.beam", [](C& c) -> int& { return c.eval.beam; }, 1,
              65536),
      dbl_key("eval.viterbi_lambda",
              [](C& c) -> double& { return c.eval.viterbi_lambda; }, 0.0,
              1e9),
  };
  return specs;
}

inline const KeySpec* find_key(const std::string& name) {
  for (auto& s : key_specs())
    if (s.name == name) return &s;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Assigns one `key = value` pair; `where` names the source (file line or
// command-line override) in error messages.
inline void apply_assignment(RunConfig& cfg, const std::string& key,
                             const std::string& value,
                             const std::string& where) {
  const auto* spec = detail::find_key(key);
  if (!spec) throw ConfigError(where + ": unknown key '" + key + "'");
  try {
    spec->set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

// `--set key=value` override.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + kv + "': expected key=value");
  apply_assignment(cfg, detail::trim(kv.substr(0, eq)),
                   detail::trim(kv.substr(eq + 1)), "override '" + kv + "'");
}

// Cross-field checks that no single assignment can decide.
inline void validate_config(const RunConfig& cfg) {
  if (!(cfg.eval.beta > cfg.eval.alpha))
    throw ConfigError("eval.beta must exceed eval.alpha");
  if (cfg.task == "video" && cfg.chain.time_horizon > cfg.chain.steps)
    throw ConfigError("chain.T_H cannot exceed chain.T");
  int stride = cfg.net.effective_stride();
  if (cfg.data.scene.image_size % stride != 0)
    throw ConfigError("data.image_size must be divisible by the encoder "
                      "stride " +
                      std::to_string(stride));
  if (static_cast<int>(cfg.net.encoder_channels.size()) <
      cfg.net.encoder_pools + 1)
    throw ConfigError("net.encoder_channels needs at least encoder_pools+1 "
                      "entries");
  if (cfg.task == "single_image" && cfg.chain.steps != cfg.data.scene.joints)
    throw ConfigError("single_image task needs chain.T == data.joints");
  if (cfg.task == "video" && cfg.chain.joints != cfg.data.scene.joints)
    throw ConfigError("video task needs chain.joints == data.joints");
}

// Parses a line-oriented `key = value` file (# comments, blank lines OK),
// then applies `--set` overrides, then validates.
inline RunConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      std::string where = path + ":" + std::to_string(lineno);
      if (eq == std::string::npos)
        throw ConfigError(where + ": malformed line (expected key = value)");
      apply_assignment(cfg, detail::trim(line.substr(0, eq)),
                       detail::trim(line.substr(eq + 1)), where);
    }
  }
  for (auto& kv : overrides) apply_override(cfg, kv);
  validate_config(cfg);
  return cfg;
}

// Canonical echo of every key; the basis for the config hash and the
// effective-config file written into run directories.
inline std::string effective_config(const RunConfig& cfg) {
  std::string out;
  for (auto& spec : detail::key_specs())
    out += spec.name + " = " + spec.get(cfg) + "\n";
  return out;
}

inline std::uint32_t config_hash(const RunConfig& cfg) {
  // FNV-1a over the canonical echo
  std::uint32_t h = 2166136261u;
  for (unsigned char c : effective_config(cfg)) {
    h ^= c;
    h *= 16777619u;
  }
  return h;
}

inline void write_effective_config(const RunConfig& cfg,
                                   const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write effective config to " + path);
  out << effective_config(cfg);
  if (!out) throw ConfigError("write failed for " + path);
}

}  // namespace chainpred
