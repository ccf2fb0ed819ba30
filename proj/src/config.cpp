#include "grlvr/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "grlvr/error.hpp"

namespace grlvr {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::single_use: return "single_use";
    case Regime::naive_reuse: return "naive_reuse";
    case Regime::dgg: return "dgg";
  }
  return "?";
}

Regime regime_from_string(std::string_view s) {
  if (s == "single_use") return Regime::single_use;
  if (s == "naive_reuse") return Regime::naive_reuse;
  if (s == "dgg") return Regime::dgg;
  throw ConfigError(fmt::format("unknown regime '{}'", s));
}

namespace {

ordered_json real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

bool parse_inf(const std::string& s, double& out) {
  if (s == "inf" || s == "+inf" || s == "infinity" || s == "+infinity") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  if (s == "-inf" || s == "-infinity") {
    out = -std::numeric_limits<double>::infinity();
    return true;
  }
  return false;
}

bool is_integer(const json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

/// Checks that `v` can stand where the default `d` stands.
void check_leaf(const json& d, const json& v, const std::string& path) {
  const auto bad = [&] {
    return ConfigError(fmt::format("{}: expected {}, got {}", path, d.type_name(), v.dump()));
  };
  if (d.is_number_float()) {
    double tmp = 0.0;
    if (v.is_number()) return;
    if (v.is_string() && parse_inf(v.get<std::string>(), tmp)) return;
    throw bad();
  }
  if (is_integer(d)) {
    if (!is_integer(v)) throw bad();
    if (d.is_number_unsigned() && v.is_number_integer() && v.get<long long>() < 0) throw bad();
    return;
  }
  if (d.is_boolean() && !v.is_boolean()) throw bad();
  if (d.is_string() && !v.is_string()) throw bad();
}

void overlay(json& base, const json& doc, const std::string& prefix) {
  if (!doc.is_object()) throw ConfigError(fmt::format("{}: expected an object", prefix.empty() ? "<root>" : prefix));
  for (const auto& [key, value] : doc.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(fmt::format("unknown config field '{}'", path));
    json& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, path);
    } else {
      check_leaf(slot, value, path);
      slot = value;
    }
  }
}

double get_real(const json& j, const char* key) {
  const json& v = j.at(key);
  double out = 0.0;
  if (v.is_string() && parse_inf(v.get<std::string>(), out)) return out;
  return v.get<double>();
}

int get_int(const json& j, const char* key) {
  const auto v = j.at(key).get<long long>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw ConfigError(fmt::format("{} out of range", key));
  return static_cast<int>(v);
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    task.validate(model);
    gate.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  need(init_std > 0 && std::isfinite(init_std), "init_std must be positive");
  need(pretrain.steps >= 0, "pretrain.steps must be >= 0");
  need(pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");
  need(pretrain.lr > 0, "pretrain.lr must be positive");
  const auto& t = trainer;
  need(t.max_reuse >= 1, "trainer.max_reuse must be >= 1");
  need(t.lr > 0 && std::isfinite(t.lr), "trainer.lr must be positive");
  need(t.beta1 >= 0 && t.beta1 < 1, "trainer.beta1 must be in [0, 1)");
  need(t.beta2 >= 0 && t.beta2 < 1, "trainer.beta2 must be in [0, 1)");
  need(t.adam_eps > 0, "trainer.adam_eps must be positive");
  need(t.eps_clip > 0 && t.eps_clip < 1, "trainer.eps_clip must be in (0, 1)");
  need(std::isfinite(t.kl_coef) && t.kl_coef >= 0, "trainer.kl_coef must be >= 0");
  need(t.prompt_batch >= 1, "trainer.prompt_batch must be >= 1");
  need(t.temperature > 0 && std::isfinite(t.temperature), "trainer.temperature must be positive");
  need(t.total_iterations >= 0, "trainer.total_iterations must be >= 0");
  need(t.profile_interval >= 1, "trainer.profile_interval must be >= 1");
  need(t.checkpoint_interval >= 1, "trainer.checkpoint_interval must be >= 1");
  need(t.keep_checkpoints >= 0, "trainer.keep_checkpoints must be >= 0");
  need(t.workers >= 1, "trainer.workers must be >= 1");
  need(t.eval_prompts >= 0, "trainer.eval_prompts must be >= 0");
  need(t.constants_interval >= 0, "trainer.constants_interval must be >= 0");
  need(t.constants_tokens >= 1, "trainer.constants_tokens must be >= 1");
  need(measure.prompts >= 1 && measure.max_tokens >= 1, "measure sizes must be >= 1");
  need(verify.prompts >= 1, "verify.prompts must be >= 1");
  need(verify.reuse_steps >= 0, "verify.reuse_steps must be >= 0");
  need(verify.prop1_tokens >= 0 && verify.theorem1_tokens >= 0, "verify token counts must be >= 0");
  need(std::isfinite(verify.fault_scale) && verify.fault_scale > 0, "verify.fault_scale must be positive");
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["regime"] = to_string(c.regime);
  j["model"] = {{"d_model", c.model.d_model},     {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},     {"d_ff", c.model.d_ff},
                {"vocab_size", c.model.vocab_size}, {"max_seq_len", c.model.max_seq_len},
                {"rms_eps", real(c.model.rms_eps)}, {"activation", to_string(c.model.activation)}};
  j["init_std"] = real(c.init_std);
  j["task"] = {{"kind", to_string(c.task.kind)},
               {"base", c.task.base},
               {"difficulty_min", c.task.difficulty_min},
               {"difficulty_max", c.task.difficulty_max},
               {"group_size", c.task.group_size},
               {"max_response_len", c.task.max_response_len}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", real(c.pretrain.lr)}};
  const auto& t = c.trainer;
  j["trainer"] = {{"max_reuse", t.max_reuse},
                  {"lr", real(t.lr)},
                  {"beta1", real(t.beta1)},
                  {"beta2", real(t.beta2)},
                  {"adam_eps", real(t.adam_eps)},
                  {"eps_clip", real(t.eps_clip)},
                  {"kl_coef", real(t.kl_coef)},
                  {"prompt_batch", t.prompt_batch},
                  {"temperature", real(t.temperature)},
                  {"total_iterations", t.total_iterations},
                  {"profile_interval", t.profile_interval},
                  {"checkpoint_interval", t.checkpoint_interval},
                  {"keep_checkpoints", t.keep_checkpoints},
                  {"workers", t.workers},
                  {"eval_prompts", t.eval_prompts},
                  {"constants_interval", t.constants_interval},
                  {"constants_tokens", t.constants_tokens}};
  j["gate"] = {{"tau", real(c.gate.tau)},
               {"window", c.gate.window},
               {"epsilon", real(c.gate.epsilon)}};
  j["measure"] = {{"checkpoint", c.measure.checkpoint},
                  {"prompts", c.measure.prompts},
                  {"max_tokens", c.measure.max_tokens}};
  j["verify"] = {{"checkpoint", c.verify.checkpoint},
                 {"prompts", c.verify.prompts},
                 {"reuse_steps", c.verify.reuse_steps},
                 {"prop1_tokens", c.verify.prop1_tokens},
                 {"theorem1_tokens", c.verify.theorem1_tokens},
                 {"fault_scale", real(c.verify.fault_scale)}};
  return j;
}

RunConfig config_from_json(const json& doc) {
  json j = json::parse(to_json(RunConfig{}).dump());
  overlay(j, doc, "");
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.regime = regime_from_string(j.at("regime").get<std::string>());
    const json& m = j.at("model");
    c.model.d_model = get_int(m, "d_model");
    c.model.n_layers = get_int(m, "n_layers");
    c.model.n_heads = get_int(m, "n_heads");
    c.model.d_ff = get_int(m, "d_ff");
    c.model.vocab_size = get_int(m, "vocab_size");
    c.model.max_seq_len = get_int(m, "max_seq_len");
    c.model.rms_eps = get_real(m, "rms_eps");
    c.model.activation = activation_from_string(m.at("activation").get<std::string>());
    c.init_std = get_real(j, "init_std");
    const json& tk = j.at("task");
    c.task.kind = task_kind_from_string(tk.at("kind").get<std::string>());
    c.task.base = get_int(tk, "base");
    c.task.difficulty_min = get_int(tk, "difficulty_min");
    c.task.difficulty_max = get_int(tk, "difficulty_max");
    c.task.group_size = get_int(tk, "group_size");
    c.task.max_response_len = get_int(tk, "max_response_len");
    const json& p = j.at("pretrain");
    c.pretrain.steps = get_int(p, "steps");
    c.pretrain.batch_size = get_int(p, "batch_size");
    c.pretrain.lr = get_real(p, "lr");
    const json& t = j.at("trainer");
    auto& tr = c.trainer;
    tr.max_reuse = get_int(t, "max_reuse");
    tr.lr = get_real(t, "lr");
    tr.beta1 = get_real(t, "beta1");
    tr.beta2 = get_real(t, "beta2");
    tr.adam_eps = get_real(t, "adam_eps");
    tr.eps_clip = get_real(t, "eps_clip");
    tr.kl_coef = get_real(t, "kl_coef");
    tr.prompt_batch = get_int(t, "prompt_batch");
    tr.temperature = get_real(t, "temperature");
    tr.total_iterations = get_int(t, "total_iterations");
    tr.profile_interval = get_int(t, "profile_interval");
    tr.checkpoint_interval = get_int(t, "checkpoint_interval");
    tr.keep_checkpoints = get_int(t, "keep_checkpoints");
    tr.workers = get_int(t, "workers");
    tr.eval_prompts = get_int(t, "eval_prompts");
    tr.constants_interval = get_int(t, "constants_interval");
    tr.constants_tokens = get_int(t, "constants_tokens");
    const json& g = j.at("gate");
    c.gate.tau = get_real(g, "tau");
    c.gate.window = get_int(g, "window");
    c.gate.epsilon = get_real(g, "epsilon");
    const json& me = j.at("measure");
    c.measure.checkpoint = me.at("checkpoint").get<std::string>();
    c.measure.prompts = get_int(me, "prompts");
    c.measure.max_tokens = get_int(me, "max_tokens");
    const json& v = j.at("verify");
    c.verify.checkpoint = v.at("checkpoint").get<std::string>();
    c.verify.prompts = get_int(v, "prompts");
    c.verify.reuse_steps = get_int(v, "reuse_steps");
    c.verify.prop1_tokens = get_int(v, "prop1_tokens");
    c.verify.theorem1_tokens = get_int(v, "theorem1_tokens");
    c.verify.fault_scale = get_real(v, "fault_scale");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

namespace {

json read_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path) {
  return config_from_json(read_document(path));
}

void apply_overrides(json& doc, const std::vector<std::string>& overrides) {
  const json defaults = json::parse(to_json(RunConfig{}).dump());
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(fmt::format("override '{}' is not key=value", ov));
    const std::string key = ov.substr(0, eq);
    const std::string text = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    const json* d = &defaults;
    json* slot = &doc;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (!d->is_object() || !d->contains(path[i]))
        throw ConfigError(fmt::format("unknown config field '{}'", key));
      d = &d->at(path[i]);
      if (!slot->is_object()) *slot = json::object();
      slot = &(*slot)[path[i]];
    }
    if (d->is_object()) throw ConfigError(fmt::format("'{}' is a section, not a field", key));
    check_leaf(*d, value, key);
    *slot = value;
  }
}

RunConfig resolve_config(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides) {
  json doc = path.empty() ? json::object() : read_document(path);
  apply_overrides(doc, overrides);
  return config_from_json(doc);
}

}  // namespace grlvr
