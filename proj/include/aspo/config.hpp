// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration as JSON with sections train / task / objective / policy.
// Every field has a dotted name ("objective.eps_high") that is both its JSON
// path and its command-line override flag.

#include <charconv>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "aspo/error.hpp"
#include "aspo/trainer.hpp"

namespace aspo {

enum class FieldKind { integer, real, boolean, text };

struct ConfigField {
  std::string name;  // section.key
  FieldKind kind;
  std::string help;
  std::function<nlohmann::json(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const nlohmann::json&)> set;
};

namespace detail {

template <typename T>
ConfigField unsigned_field(std::string name, std::string help, T TrainConfig::*member) {
  return {std::move(name), FieldKind::integer, std::move(help),
          [member](const TrainConfig& c) { return nlohmann::json(c.*member); },
          [member](TrainConfig& c, const nlohmann::json& j) { c.*member = j.get<T>(); }};
}

inline ConfigField real_field(std::string name, std::string help, double TrainConfig::*member) {
  return {std::move(name), FieldKind::real, std::move(help),
          [member](const TrainConfig& c) { return nlohmann::json(c.*member); },
          [member](TrainConfig& c, const nlohmann::json& j) { c.*member = j.get<double>(); }};
}

template <typename T>
ConfigField nested(std::string name, FieldKind kind, std::string help, T& (*ref)(TrainConfig&)) {
  return {std::move(name), kind, std::move(help),
          [ref](const TrainConfig& c) { return nlohmann::json(ref(const_cast<TrainConfig&>(c))); },
          [ref](TrainConfig& c, const nlohmann::json& j) { ref(c) = j.get<T>(); }};
}

template <typename E, typename Parse, typename Show>
ConfigField enum_field(std::string name, std::string help, E& (*ref)(TrainConfig&), Parse parse, Show show) {
  return {std::move(name), FieldKind::text, std::move(help),
          [ref, show](const TrainConfig& c) { return nlohmann::json(std::string(show(ref(const_cast<TrainConfig&>(c))))); },
          [ref, parse](TrainConfig& c, const nlohmann::json& j) { ref(c) = parse(j.get<std::string>()); }};
}

}  // namespace detail

/// Every configurable field, in file order.
inline const std::vector<ConfigField>& config_fields() {
  using detail::enum_field;
  using detail::nested;
  using detail::real_field;
  using detail::unsigned_field;
  using C = TrainConfig;
  static const std::vector<ConfigField> fields = {
      unsigned_field("train.group_size", "responses per prompt (G)", &C::group_size),
      unsigned_field("train.prompts_per_batch", "prompts per collected batch", &C::prompts_per_batch),
      unsigned_field("train.minibatch_prompts", "prompts per minibatch", &C::minibatch_prompts),
      unsigned_field("train.ppo_epochs", "passes over each batch", &C::ppo_epochs),
      real_field("train.learning_rate", "Adam step size", &C::learning_rate),
      unsigned_field("train.max_len", "response budget including EOS", &C::max_len),
      real_field("train.temperature", "rollout sampling temperature", &C::temperature),
      unsigned_field("train.total_steps", "collected batches", &C::total_steps),
      unsigned_field("train.eval_interval", "steps between evaluations", &C::eval_interval),
      unsigned_field("train.eval_prompts", "held-out prompts per evaluation", &C::eval_prompts),
      unsigned_field("train.eval_samples", "k for avg@k and pass@k", &C::eval_samples),
      real_field("train.eval_temperature", "evaluation sampling temperature", &C::eval_temperature),
      unsigned_field("train.max_resample", "extra draws when every group is degenerate", &C::max_resample),
      unsigned_field("train.checkpoint_interval", "steps between checkpoints (0 disables)", &C::checkpoint_interval),
      unsigned_field("train.seed", "master seed", &C::seed),

      enum_field<TaskKind>("task.kind", "digit_sum or parity", +[](C& c) -> TaskKind& { return c.task; },
                           [](const std::string& s) { return parse_task_kind(s); },
                           [](TaskKind k) { return to_string(k); }),
      nested<int>("task.operand_min", FieldKind::integer, "smallest digit-sum operand",
                  +[](C& c) -> int& { return c.task_bounds.operand_min; }),
      nested<int>("task.operand_max", FieldKind::integer, "largest digit-sum operand",
                  +[](C& c) -> int& { return c.task_bounds.operand_max; }),
      nested<int>("task.parity_min_length", FieldKind::integer, "shortest parity string",
                  +[](C& c) -> int& { return c.task_bounds.parity_min_length; }),
      nested<int>("task.parity_max_length", FieldKind::integer, "longest parity string",
                  +[](C& c) -> int& { return c.task_bounds.parity_max_length; }),

      enum_field<Variant>("objective.variant", "grpo, no_is, pos_resp_mean, cispo, gspo or aspo",
                          +[](C& c) -> Variant& { return c.objective.variant; },
                          [](const std::string& s) { return parse_variant(s); }, [](Variant v) { return to_string(v); }),
      nested<double>("objective.eps_low", FieldKind::real, "lower clip width",
                     +[](C& c) -> double& { return c.objective.eps_low; }),
      nested<double>("objective.eps_high", FieldKind::real, "upper clip width",
                     +[](C& c) -> double& { return c.objective.eps_high; }),
      nested<double>("objective.dual_clip_c", FieldKind::real, "dual-clip bound",
                     +[](C& c) -> double& { return c.objective.dual_clip_c; }),
      nested<double>("objective.kl_beta", FieldKind::real, "KL penalty weight",
                     +[](C& c) -> double& { return c.objective.kl_beta; }),
      enum_field<KlMode>("objective.kl_mode", "exact or k3", +[](C& c) -> KlMode& { return c.objective.kl_mode; },
                         [](const std::string& s) { return parse_kl_mode(s); }, [](KlMode m) { return to_string(m); }),
      enum_field<Aggregation>("objective.aggregation", "token_mean or response_mean",
                              +[](C& c) -> Aggregation& { return c.objective.aggregation; },
                              [](const std::string& s) { return parse_aggregation(s); },
                              [](Aggregation a) { return to_string(a); }),
      nested<bool>("objective.negative_dual_clip", FieldKind::boolean, "dual clip on negative tokens",
                   +[](C& c) -> bool& { return c.objective.negative_dual_clip; }),

      nested<std::size_t>("policy.embed_dim", FieldKind::integer, "token embedding width",
                          +[](C& c) -> std::size_t& { return c.policy.embed_dim; }),
      nested<std::size_t>("policy.context", FieldKind::integer, "context window in tokens",
                          +[](C& c) -> std::size_t& { return c.policy.context; }),
      nested<std::size_t>("policy.hidden", FieldKind::integer, "hidden units",
                          +[](C& c) -> std::size_t& { return c.policy.hidden; }),
  };
  return fields;
}

inline const ConfigField* find_field(std::string_view name) {
  for (const auto& f : config_fields()) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

namespace detail {

inline bool kind_matches(FieldKind kind, const nlohmann::json& j) {
  switch (kind) {
    case FieldKind::integer: return j.is_number_integer();
    case FieldKind::real: return j.is_number();
    case FieldKind::boolean: return j.is_boolean();
    case FieldKind::text: return j.is_string();
  }
  return false;
}

}  // namespace detail

/// Assigns one field from a JSON value, converting failures to ConfigError.
inline void set_field(TrainConfig& cfg, const ConfigField& f, const nlohmann::json& value) {
  if (!detail::kind_matches(f.kind, value)) throw ConfigError(f.name, "wrong type: " + value.dump());
  if (f.kind == FieldKind::integer && value.is_number_integer() && !value.is_number_unsigned() && value.get<long long>() < 0) {
    throw ConfigError(f.name, "must be non-negative");
  }
  try {
    f.set(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(f.name, e.what());
  }
}

/// Parses a command-line override value according to the field's kind.
inline nlohmann::json parse_override(const ConfigField& f, const std::string& text) {
  switch (f.kind) {
    case FieldKind::text: return text;
    case FieldKind::boolean:
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      break;
    case FieldKind::integer: {
      long long v = 0;
      const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec == std::errc() && p == text.data() + text.size()) return v;
      break;
    }
    case FieldKind::real: {
      try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used == text.size()) return v;
      } catch (const std::exception&) {
      }
      break;
    }
  }
  throw ConfigError(f.name, "cannot parse '" + text + "'");
}

inline void apply_override(TrainConfig& cfg, std::string_view name, const std::string& text) {
  const ConfigField* f = find_field(name);
  if (!f) throw ConfigError(std::string(name), "unknown field");
  set_field(cfg, *f, parse_override(*f, text));
}

/// Nested JSON of the resolved configuration.
inline nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : config_fields()) {
    const auto dot = f.name.find('.');
    j[f.name.substr(0, dot)][f.name.substr(dot + 1)] = f.get(cfg);
  }
  return j;
}

/// Overlays `j` on `cfg`. Unknown sections or keys are errors.
inline void apply_json(TrainConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "configuration must be a JSON object");
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) throw ConfigError(section, "section must be an object");
    for (const auto& [key, value] : body.items()) {
      const std::string name = section + "." + key;
      const ConfigField* f = find_field(name);
      if (!f) throw ConfigError(name, "unknown field");
      set_field(cfg, *f, value);
    }
  }
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::io_error, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON in ") + path + ": " + e.what());
  }
  TrainConfig cfg;
  apply_json(cfg, j);
  return cfg;
}

}  // namespace aspo
