#pragma once

// Run configuration and its JSON form. Every struct reads and writes the
// same field names; unknown keys are rejected so typos surface.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "mcdiff/sampler.hpp"
#include "mcdiff/synth.hpp"

namespace nlohmann {
// std::optional support for the optional sample fields.
template <typename V>
struct adl_serializer<std::optional<V>> {
  static void to_json(json& j, const std::optional<V>& o) {
    if (o) j = *o;
    else j = nullptr;
  }
  static void from_json(const json& j, std::optional<V>& o) {
    if (j.is_null()) o.reset();
    else o = j.get<V>();
  }
};
}  // namespace nlohmann

namespace mcdiff {

using nlohmann::json;

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return linear_schedule(steps, beta_start, beta_end); }
};

struct DatasetConfig {
  std::size_t size = 4096;
  std::size_t canvas = 16;
  std::uint64_t seed = 0;
};

// Output directory used when a config leaves it empty.
inline std::string default_out_dir() {
  if (const char* e = std::getenv("MCDIFF_OUT_DIR"); e && *e) return e;
  return "runs";
}

struct TrainConfig {
  std::uint64_t iterations = 20000;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t warmup = 500;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  double d_p = 0.1;
  double d_x = 0.6;
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  ModelConfig model;
  DatasetConfig dataset;
  std::uint64_t checkpoint_interval = 1000;
  std::uint64_t log_interval = 100;
  std::string out_dir;  // empty: default_out_dir()

  std::filesystem::path output_dir() const { return out_dir.empty() ? default_out_dir() : out_dir; }

  void validate() const {
    if (iterations < 1) throw DomainError("train config: iterations must be >= 1");
    if (batch < 1) throw DomainError("train config: batch must be >= 1");
    if (!(lr > 0)) throw DomainError("train config: lr must be > 0");
    if (!(d_p >= 0 && d_p <= 1)) throw DomainError("train config: d_p outside [0, 1]");
    if (!(d_x >= 0 && d_x <= 1)) throw DomainError("train config: d_x outside [0, 1]");
    if (dataset.size < 1) throw DomainError("train config: dataset.size must be >= 1");
    if (dataset.canvas != model.denoiser.image_size || dataset.canvas != model.cond.image_size)
      throw DomainError("train config: dataset.canvas must equal the model image size");
    if (model.denoiser.max_timestep != schedule.steps)
      throw DomainError("train config: model.denoiser.max_timestep must equal schedule.steps");
    model.validate();
    schedule.build();
  }
};

namespace detail {

// Reads `key` into `v` when present and records it as consumed.
template <typename V>
void opt(const json& j, const char* key, V& v, std::set<std::string>& seen) {
  seen.insert(key);
  if (auto it = j.find(key); it != j.end()) v = it->get<V>();
}

inline void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!seen.count(it.key())) throw FormatError(where + ": unknown key '" + it.key() + "'");
}

}  // namespace detail

inline void to_json(json& j, const ConditionConfig& c) {
  j = json{{"d_embed", c.d_embed},
           {"text_len", c.text_len},
           {"image_size", c.image_size},
           {"image_channels", c.image_channels},
           {"encoder_blocks", c.encoder_blocks},
           {"encoder_channels", c.encoder_channels},
           {"encoder_out_channels", c.encoder_out_channels},
           {"fusion_layers", c.fusion_layers},
           {"fusion_heads", c.fusion_heads},
           {"fusion_hidden", c.fusion_hidden}};
}

inline void from_json(const json& j, ConditionConfig& c) {
  std::set<std::string> s;
  if (j.is_string()) {
    if (j.get<std::string>() != "wide") throw FormatError("model.cond: unknown preset");
    c = ConditionConfig::wide();
    return;
  }
  detail::opt(j, "d_embed", c.d_embed, s);
  detail::opt(j, "text_len", c.text_len, s);
  detail::opt(j, "image_size", c.image_size, s);
  detail::opt(j, "image_channels", c.image_channels, s);
  detail::opt(j, "encoder_blocks", c.encoder_blocks, s);
  detail::opt(j, "encoder_channels", c.encoder_channels, s);
  detail::opt(j, "encoder_out_channels", c.encoder_out_channels, s);
  detail::opt(j, "fusion_layers", c.fusion_layers, s);
  detail::opt(j, "fusion_heads", c.fusion_heads, s);
  detail::opt(j, "fusion_hidden", c.fusion_hidden, s);
  detail::reject_unknown(j, s, "model.cond");
}

inline void to_json(json& j, const DenoiserConfig& c) {
  j = json{{"in_channels", c.in_channels},
           {"image_size", c.image_size},
           {"base_channels", c.base_channels},
           {"channel_mult", c.channel_mult},
           {"res_blocks", c.res_blocks},
           {"attention_levels", c.attention_levels},
           {"time_dim", c.time_dim},
           {"time_hidden", c.time_hidden},
           {"context_dim", c.context_dim},
           {"attention_heads", c.attention_heads},
           {"max_timestep", c.max_timestep}};
}

inline void from_json(const json& j, DenoiserConfig& c) {
  std::set<std::string> s;
  detail::opt(j, "in_channels", c.in_channels, s);
  detail::opt(j, "image_size", c.image_size, s);
  detail::opt(j, "base_channels", c.base_channels, s);
  detail::opt(j, "channel_mult", c.channel_mult, s);
  detail::opt(j, "res_blocks", c.res_blocks, s);
  detail::opt(j, "attention_levels", c.attention_levels, s);
  detail::opt(j, "time_dim", c.time_dim, s);
  detail::opt(j, "time_hidden", c.time_hidden, s);
  detail::opt(j, "context_dim", c.context_dim, s);
  detail::opt(j, "attention_heads", c.attention_heads, s);
  detail::opt(j, "max_timestep", c.max_timestep, s);
  detail::reject_unknown(j, s, "model.denoiser");
}

inline void to_json(json& j, const ModelConfig& c) { j = json{{"cond", c.cond}, {"denoiser", c.denoiser}}; }

inline void from_json(const json& j, ModelConfig& c) {
  std::set<std::string> s;
  detail::opt(j, "cond", c.cond, s);
  detail::opt(j, "denoiser", c.denoiser, s);
  detail::reject_unknown(j, s, "model");
}

inline void to_json(json& j, const ScheduleConfig& c) {
  j = json{{"steps", c.steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

inline void from_json(const json& j, ScheduleConfig& c) {
  std::set<std::string> s;
  detail::opt(j, "steps", c.steps, s);
  detail::opt(j, "beta_start", c.beta_start, s);
  detail::opt(j, "beta_end", c.beta_end, s);
  detail::reject_unknown(j, s, "schedule");
}

inline void to_json(json& j, const DatasetConfig& c) {
  j = json{{"size", c.size}, {"canvas", c.canvas}, {"seed", c.seed}};
}

inline void from_json(const json& j, DatasetConfig& c) {
  std::set<std::string> s;
  detail::opt(j, "size", c.size, s);
  detail::opt(j, "canvas", c.canvas, s);
  detail::opt(j, "seed", c.seed, s);
  detail::reject_unknown(j, s, "dataset");
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"iterations", c.iterations},
           {"batch", c.batch},
           {"lr", c.lr},
           {"warmup", c.warmup},
           {"grad_clip", c.grad_clip},
           {"d_p", c.d_p},
           {"d_x", c.d_x},
           {"seed", c.seed},
           {"schedule", c.schedule},
           {"model", c.model},
           {"dataset", c.dataset},
           {"checkpoint_interval", c.checkpoint_interval},
           {"log_interval", c.log_interval},
           {"out_dir", c.out_dir}};
}

inline void from_json(const json& j, TrainConfig& c) {
  std::set<std::string> s;
  detail::opt(j, "iterations", c.iterations, s);
  detail::opt(j, "batch", c.batch, s);
  detail::opt(j, "lr", c.lr, s);
  detail::opt(j, "warmup", c.warmup, s);
  detail::opt(j, "grad_clip", c.grad_clip, s);
  detail::opt(j, "d_p", c.d_p, s);
  detail::opt(j, "d_x", c.d_x, s);
  detail::opt(j, "seed", c.seed, s);
  detail::opt(j, "schedule", c.schedule, s);
  detail::opt(j, "model", c.model, s);
  detail::opt(j, "dataset", c.dataset, s);
  detail::opt(j, "checkpoint_interval", c.checkpoint_interval, s);
  detail::opt(j, "log_interval", c.log_interval, s);
  detail::opt(j, "out_dir", c.out_dir, s);
  detail::reject_unknown(j, s, "train config");
}

inline void to_json(json& j, const SampleSpec& c) {
  j = json{{"steps", c.n_steps},
           {"guidance", c.guidance},
           {"sigma", c.sigma ? json(*c.sigma) : json(nullptr)},
           {"strength", c.strength ? json(*c.strength) : json(nullptr)},
           {"seed", c.seed},
           {"sampler", to_string(c.sampler)}};
  if (c.selectors) {
    json a = json::array();
    for (auto s : *c.selectors) a.push_back(to_string(s));
    j["selectors"] = a;
  }
}

inline void from_json(const json& j, SampleSpec& c) {
  std::set<std::string> s;
  detail::opt(j, "steps", c.n_steps, s);
  detail::opt(j, "guidance", c.guidance, s);
  detail::opt(j, "sigma", c.sigma, s);
  detail::opt(j, "strength", c.strength, s);
  detail::opt(j, "seed", c.seed, s);
  s.insert("sampler");
  if (j.contains("sampler")) c.sampler = parse_sampler(j.at("sampler").get<std::string>());
  s.insert("selectors");
  if (j.contains("selectors") && !j.at("selectors").is_null()) {
    std::vector<Selector> v;
    for (const auto& e : j.at("selectors")) v.push_back(parse_selector(e.get<std::string>()));
    c.selectors = std::move(v);
  }
  detail::reject_unknown(j, s, "sample spec");
}

// Parses a JSON file into T; errors name the path.
template <typename C>
C load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  try {
    return json::parse(in).get<C>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mcdiff
