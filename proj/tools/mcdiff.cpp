// mcdiff: dataset generation, training, guided sampling, sweeps and metrics.

#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace mcdiff;

namespace {

// Flag-level failure; main() prints "<flag>: <message>".
struct UsageError : Error {
  UsageError(const std::string& flag, const std::string& msg) : Error(flag + ": " + msg) {}
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

template <typename V>
std::vector<V> parse_list(const std::string& flag, const std::string& s) {
  std::vector<V> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_same_v<V, int>) out.push_back(std::stoi(item, &used));
      else if constexpr (std::is_same_v<V, double>) out.push_back(std::stod(item, &used));
      else out.push_back(V(std::stoull(item, &used)));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag, "cannot parse list entry '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError(flag, "empty list");
  return out;
}

// Strength grid entries: numbers in [0, 1] or "none".
std::vector<std::optional<double>> parse_strengths(const std::string& flag, const std::string& s) {
  std::vector<std::optional<double>> out;
  for (const auto& item : split_list(s)) {
    if (item == "none") {
      out.emplace_back();
      continue;
    }
    try {
      out.emplace_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError(flag, "cannot parse strength '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError(flag, "empty list");
  return out;
}

struct Condition {
  Tensor<float> layout;               // [1, H, W]
  std::optional<Tensor<float>> init;  // [3, H, W] source for SDEdit
};

// A PGM is taken as the silhouette; a PPM as an RGB source whose foreground
// mask becomes the silhouette.
Condition load_condition(const std::string& flag, const fs::path& path) {
  Tensor<float> img;
  try {
    img = read_pnm<float>(path);
  } catch (const Error& e) {
    throw UsageError(flag, e.what());
  }
  if (img.dim(0) == 1) return {img, std::nullopt};
  return {layout_from_rgb(img), img};
}

struct Loaded {
  Checkpoint ck;
  Model<float> model;
  NoiseSchedule sched;
};

Loaded load_model(const std::string& flag, const fs::path& path) {
  try {
    Checkpoint ck = load_checkpoint(path);
    Model<float> m = model_from_checkpoint<float>(ck);
    NoiseSchedule s = ck.config.schedule.build();
    return {std::move(ck), std::move(m), std::move(s)};
  } catch (const Error& e) {
    throw UsageError(flag, e.what());
  }
}

std::vector<int> encode_prompt(const std::string& flag, const PromptVocab& v, const std::string& text) {
  try {
    return v.encode_text(text);
  } catch (const Error& e) {
    throw UsageError(flag, e.what());
  }
}

std::optional<ColorName> prompt_color(const std::string& text) {
  std::istringstream is(text);
  for (std::string w; is >> w;)
    for (auto c : kColors)
      if (w == to_string(c)) return c;
  return std::nullopt;
}

MetricsRecord score(const std::string& id, const Tensor<float>& gen, const Condition& cond,
                    std::optional<ColorName> color, const SampleSpec& spec) {
  MetricsRecord r;
  r.id = id;
  r.sigma = spec.resolved_sigma();
  r.guidance = spec.guidance;
  r.strength = spec.strength.value_or(-1);
  r.seed = spec.seed;
  r.iou = layout_iou(gen, cond.layout);
  r.color_ok = color ? color_adherence(gen, cond.layout, *color).matches : false;
  r.mse = pixel_mse(gen, cond.init ? *cond.init : as_rgb(cond.layout));
  return r;
}

void print_summary(const std::vector<MetricsRecord>& recs) {
  const auto s = summarize(recs);
  std::printf("%-8s %-10s %-12s %-10s\n", "count", "mean_iou", "color_rate", "mean_mse");
  std::printf("%-8zu %-10.4f %-12.4f %-10.4f\n", s.count, s.mean_iou, s.color_rate, s.mean_mse);
}

std::string fmt_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

void cmd_gen_data(std::size_t n, std::size_t canvas, std::uint64_t seed, const std::string& out) {
  if (n == 0) throw UsageError("--n", "must be >= 1");
  const Canvas c{canvas, canvas};
  std::vector<DataSample<float>> data;
  try {
    data = generate_dataset<float>(n, c, seed);
  } catch (const DomainError& e) {
    throw UsageError("--canvas", e.what());
  }
  write_dataset(out, data);
  std::printf("wrote %zu samples to %s\n", n, out.c_str());
}

void cmd_train(const std::string& config_path, bool resume, const std::string& out_override,
               std::optional<std::uint64_t> iterations) {
  TrainConfig cfg;
  if (!config_path.empty()) {
    try {
      cfg = load_json_file<TrainConfig>(config_path);
    } catch (const Error& e) {
      throw UsageError("--config", e.what());
    }
  }
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (iterations) cfg.iterations = *iterations;
  const fs::path dir = cfg.output_dir();
  fs::create_directories(dir);
  const fs::path ckpt = dir / "checkpoint.bin";
  std::unique_ptr<Trainer> tr;
  try {
    if (resume && fs::exists(ckpt)) {
      tr = std::make_unique<Trainer>(load_checkpoint(ckpt), cfg);
      std::fprintf(stderr, "resuming from %s at iteration %llu\n", ckpt.c_str(),
                   static_cast<unsigned long long>(tr->iteration()));
    } else {
      if (resume) std::fprintf(stderr, "no checkpoint at %s; starting fresh\n", ckpt.c_str());
      tr = std::make_unique<Trainer>(cfg);
    }
  } catch (const DomainError& e) {
    throw UsageError("--config", e.what());
  }
  {
    std::ofstream(dir / "config.json") << json(tr->config()).dump(2) << '\n';
  }
  std::fprintf(stderr, "params: %zu trainable (denoiser %zu)\n", tr->model().param_count(),
               tr->model().denoiser_param_count());
  std::ofstream log(dir / "train_log.jsonl", std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  tr->run(std::nullopt, [&](const TrainProgress& p) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json rec{{"iteration", p.iteration}, {"loss", p.loss}, {"smoothed_loss", p.smoothed_loss}, {"lr", p.lr},
             {"grad_norm", p.grad_norm}, {"elapsed_s", sec}};
    log << rec.dump() << '\n';
    log.flush();
    std::fprintf(stderr, "iter %7llu  loss %.4f  smoothed %.4f  lr %.2e  |g| %.3f  %.0fs\n",
                 static_cast<unsigned long long>(p.iteration), p.loss, p.smoothed_loss, p.lr, p.grad_norm, sec);
  }, ckpt);
  std::printf("checkpoint: %s (iteration %llu)\n", ckpt.c_str(), static_cast<unsigned long long>(tr->iteration()));
}

struct SampleArgs {
  std::string checkpoint, prompt, cond = "none", out, sampler = "ddim", init;
  std::optional<int> sigma;
  double guidance = 3.0;
  std::optional<double> strength;
  int steps = 50;
  std::uint64_t seed = 0;
};

void cmd_sample(const SampleArgs& a) {
  auto L = load_model("--checkpoint", a.checkpoint);
  SampleSpec spec;
  spec.n_steps = a.steps;
  spec.guidance = a.guidance;
  spec.sigma = a.sigma;
  spec.strength = a.strength;
  spec.seed = a.seed;
  try {
    spec.sampler = parse_sampler(a.sampler);
    spec.validate();
  } catch (const DomainError& e) {
    throw UsageError("--sigma/--strength/--steps/--sampler", e.what());
  }
  Trajectory<float> tr;
  tr.prompt = encode_prompt("--prompt", L.model.vocab(), a.prompt);
  tr.seed = a.seed;
  if (a.cond != "none") {
    Condition c = load_condition("--cond", a.cond);
    tr.layout = c.layout;
    tr.init = c.init;
  }
  if (!a.init.empty()) {
    try {
      tr.init = as_rgb(read_pnm<float>(a.init));
    } catch (const Error& e) {
      throw UsageError("--init", e.what());
    }
  }
  std::vector<Tensor<float>> out;
  try {
    out = sample(L.model, L.sched, {tr}, spec);
  } catch (const DomainError& e) {
    throw UsageError(a.cond == "none" ? "--cond" : "--sigma", e.what());
  } catch (const ShapeError& e) {
    throw UsageError("--cond", e.what());
  }
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  try {
    write_pnm(a.out, out[0]);
  } catch (const Error& e) {
    throw UsageError("--out", e.what());
  }
  std::printf("wrote %s\n", a.out.c_str());
}

struct SweepArgs {
  std::string checkpoint, prompt, cond, out_dir, sigmas = "5,15,25,35,45,51", scales = "3", strengths = "none",
                                                 seeds = "0", sampler = "ddim";
  int steps = 50;
};

void cmd_sweep(const SweepArgs& a) {
  auto L = load_model("--checkpoint", a.checkpoint);
  const auto sigmas = parse_list<int>("--sigmas", a.sigmas);
  const auto scales = parse_list<double>("--scales", a.scales);
  const auto strengths = parse_strengths("--strengths", a.strengths);
  const auto seeds = parse_list<std::uint64_t>("--seeds", a.seeds);
  const Condition cond = load_condition("--cond", a.cond);
  const auto prompt = encode_prompt("--prompt", L.model.vocab(), a.prompt);
  const auto color = prompt_color(a.prompt);
  fs::create_directories(fs::path(a.out_dir) / "cells");
  std::ofstream metrics(fs::path(a.out_dir) / "metrics.jsonl");
  if (!metrics) throw UsageError("--out-dir", "cannot write metrics.jsonl in " + a.out_dir);
  std::vector<MetricsRecord> recs;
  std::vector<Tensor<float>> tiles;
  for (int sigma : sigmas)
    for (double s : scales)
      for (const auto& st : strengths) {
        SampleSpec spec;
        spec.n_steps = a.steps;
        spec.guidance = s;
        spec.sigma = sigma;
        spec.strength = st;
        try {
          spec.sampler = parse_sampler(a.sampler);
          spec.validate();
        } catch (const DomainError& e) {
          throw UsageError("--sigmas/--scales/--strengths", e.what());
        }
        std::vector<Trajectory<float>> trajs;
        for (auto seed : seeds) trajs.push_back({prompt, cond.layout, cond.init, seed});
        const auto imgs = sample(L.model, L.sched, trajs, spec);
        for (std::size_t k = 0; k < seeds.size(); ++k) {
          spec.seed = seeds[k];
          const std::string id = "sigma" + std::to_string(sigma) + "_s" + fmt_num(s) + "_str" +
                                 (st ? fmt_num(*st) : std::string("none")) + "_seed" + std::to_string(seeds[k]);
          write_pnm(fs::path(a.out_dir) / "cells" / (id + ".ppm"), imgs[k]);
          recs.push_back(score(id, imgs[k], cond, color, spec));
          metrics << to_json(recs.back()).dump() << '\n';
        }
        tiles.push_back(imgs[0]);
      }
  write_pnm(fs::path(a.out_dir) / "contact_sheet.ppm", contact_sheet(tiles, scales.size() * strengths.size()));
  print_summary(recs);
  std::printf("wrote %s/metrics.jsonl and %s/contact_sheet.ppm\n", a.out_dir.c_str(), a.out_dir.c_str());
}

// dir holds manifest.txt plus generated_XXXXX.ppm and layout_XXXXX.pgm per
// record (source_XXXXX.ppm, when present, is the MSE reference).
void cmd_eval(const std::string& dir, const std::string& manifest_flag) {
  const fs::path d(dir);
  const fs::path manifest = manifest_flag.empty() ? d / "manifest.txt" : fs::path(manifest_flag);
  std::vector<ManifestRecord> recs;
  try {
    recs = read_manifest(manifest);
  } catch (const Error& e) {
    throw UsageError("--manifest", e.what());
  }
  std::vector<MetricsRecord> out;
  for (const auto& r : recs) {
    const fs::path gp = d / index_name("generated", r.index, "ppm");
    const fs::path lp = d / index_name("layout", r.index, "pgm");
    const fs::path sp = d / index_name("source", r.index, "ppm");
    Condition c;
    Tensor<float> gen;
    try {
      gen = read_pnm<float>(gp);
      c.layout = read_pnm<float>(lp);
      if (fs::exists(sp)) c.init = read_pnm<float>(sp);
    } catch (const Error& e) {
      throw UsageError("--dir", e.what());
    }
    SampleSpec none;
    MetricsRecord m = score(index_name("sample", r.index, "ppm"), gen, c, r.scene.color, none);
    m.sigma = 0;
    m.guidance = 0;
    std::cout << to_json(m).dump() << '\n';
    out.push_back(m);
  }
  print_summary(out);
}

}  // namespace

int main(int argc, char** argv) {
  // Large activation buffers are reused across steps instead of being
  // returned to the OS after every tape.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Multi-condition diffusion toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as PPM/PGM files plus a manifest");
  std::size_t gen_n = 4096, gen_canvas = 16;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Number of samples")->capture_default_str();
  gen->add_option("--canvas", gen_canvas, "Canvas width and height")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model (checkpoint.bin in the output directory)");
  std::string train_cfg, train_out;
  bool train_resume = false;
  std::optional<std::uint64_t> train_iters;
  train->add_option("--config", train_cfg, "JSON config (defaults for missing keys)");
  train->add_flag("--resume", train_resume, "Continue from <out_dir>/checkpoint.bin if present");
  train->add_option("--out-dir", train_out, "Override out_dir (default $MCDIFF_OUT_DIR or ./runs)");
  train->add_option("--iterations", train_iters, "Override the iteration count");

  auto* show = app.add_subcommand("show-config", "Print the default training config as JSON");

  auto* samp = app.add_subcommand("sample", "Generate one image");
  SampleArgs sa;
  samp->add_option("--checkpoint", sa.checkpoint)->required();
  samp->add_option("--prompt", sa.prompt, "e.g. \"red circle\"")->required();
  samp->add_option("--cond", sa.cond, "Condition image (PGM silhouette or PPM source) or 'none'")
      ->capture_default_str();
  samp->add_option("--sigma", sa.sigma, "Switch step in [1, steps+1] (default steps+1)");
  samp->add_option("--s", sa.guidance, "Guidance scale")->capture_default_str();
  samp->add_option("--strength", sa.strength, "SDEdit strength in [0, 1]");
  samp->add_option("--init", sa.init, "SDEdit source image (default: the condition image)");
  samp->add_option("--steps", sa.steps, "Sampler steps")->capture_default_str();
  samp->add_option("--seed", sa.seed)->capture_default_str();
  samp->add_option("--sampler", sa.sampler, "ddim or ddpm")->capture_default_str();
  samp->add_option("--out", sa.out, "Output PPM")->required();

  auto* sweep = app.add_subcommand("sweep", "Grid over sigma x s x strength; metrics + contact sheet");
  SweepArgs sw;
  sweep->add_option("--checkpoint", sw.checkpoint)->required();
  sweep->add_option("--prompt", sw.prompt)->required();
  sweep->add_option("--cond", sw.cond, "Condition image (PGM or PPM)")->required();
  sweep->add_option("--sigmas", sw.sigmas)->capture_default_str();
  sweep->add_option("--scales", sw.scales)->capture_default_str();
  sweep->add_option("--strengths", sw.strengths, "Comma list; 'none' disables SDEdit")->capture_default_str();
  sweep->add_option("--seeds", sw.seeds)->capture_default_str();
  sweep->add_option("--steps", sw.steps)->capture_default_str();
  sweep->add_option("--sampler", sw.sampler)->capture_default_str();
  sweep->add_option("--out-dir", sw.out_dir)->required();

  auto* ev = app.add_subcommand("eval", "Score generated/condition pairs listed in a manifest");
  std::string ev_dir, ev_manifest;
  ev->add_option("--dir", ev_dir)->required();
  ev->add_option("--manifest", ev_manifest, "Default: <dir>/manifest.txt");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) cmd_gen_data(gen_n, gen_canvas, gen_seed, gen_out);
    else if (*train) cmd_train(train_cfg, train_resume, train_out, train_iters);
    else if (*show) std::cout << json(TrainConfig{}).dump(2) << '\n';
    else if (*samp) cmd_sample(sa);
    else if (*sweep) cmd_sweep(sw);
    else if (*ev) cmd_eval(ev_dir, ev_manifest);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
