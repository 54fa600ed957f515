#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ditmem/blob_io.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/lab.hpp"
#include "ditmem/steering.hpp"
#include "json.hpp"
#include "png_image.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ditmem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Globals {
  std::string config;
  std::vector<std::string> sets;
  std::string cache_dir;
  bool quiet = false;
};

Globals g;

void note(const std::string& msg) {
  if (!g.quiet) std::cerr << "ditmem: " << msg << "\n";
}

void warn(const std::string& msg) { std::cerr << "ditmem: warning: " << msg << "\n"; }

RunConfig load_config(const std::function<void(RunConfig&)>& adjust = {}) {
  RunConfig cfg = g.config.empty() ? RunConfig::defaults() : RunConfig::load(g.config);
  for (const auto& s : g.sets) cfg.apply_override(s);
  if (adjust) adjust(cfg);
  cfg.finalize();
  return cfg;
}

fs::path cache_dir() { return g.cache_dir.empty() ? default_cache_dir() : fs::path(g.cache_dir); }

DType blob_dtype(const RunConfig& cfg) { return cfg.float_mode == 32 ? DType::kFloat32 : DType::kFloat64; }

fs::path default_out(const RunConfig& cfg, const std::string& kind) {
  return fs::path(cfg.output.dir) / (kind + "-" + cfg.hash());
}

// Config hash with the step budget cleared, so a run can be resumed to a longer budget.
std::string resume_key(RunConfig cfg) {
  cfg.training.steps = 0;
  return cfg.hash();
}

json run_header(const RunConfig& cfg, const std::string& command) {
  return {{"command", command},
          {"tool_version", kVersion},
          {"config_hash", cfg.hash()},
          {"seed", cfg.seed},
          {"float_mode", cfg.float_mode}};
}

void write_run_files(const fs::path& dir, const RunConfig& cfg, const json& manifest) {
  fs::create_directories(dir);
  write_text_atomic(dir / "config.ini", cfg.to_ini());
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

void ready(Model& m) {
  const auto rep = prepare_backbone(m, cache_dir());
  if (!rep.from_cache) {
    std::ostringstream os;
    os << "pretrained backbone for " << rep.steps << " steps, loss " << rep.first_loss << " -> "
       << rep.last_loss;
    note(os.str());
  }
}

void load_encoder(Model& m, const fs::path& path) {
  const fs::path dir = fs::exists(path / "encoder") ? path / "encoder" : path;
  if (!fs::exists(dir / "archive.json") && !fs::is_directory(dir)) {
    throw DataError("no encoder archive at " + path.string());
  }
  m.encoder.load_archive(load_archive(dir));
}

MemoryBank open_bank(const RunConfig& cfg) {
  const fs::path root = cfg.bank_root();
  if (!fs::exists(root / "manifest.json")) {
    throw DataError("no memory bank at " + root.string() + " (run `ditmem bank build` first)");
  }
  return MemoryBank::open(root);
}

std::size_t trainable_count(const Model& m) {
  std::size_t n = 0;
  for (const Parameter* p : parameter_partition(m.codec, m.backbone, m.encoder).trainable) {
    n += p->var.value().numel();
  }
  return n;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_losses_csv(const fs::path& path, const std::vector<double>& losses) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, losses[i]);
    os << buf;
  }
  write_text_atomic(path, os.str());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Latent blob, optional PNG frames; returns the manifest fragment.
json write_video(const fs::path& dir, const RunConfig& cfg, const Model& m, const Tensor& z) {
  fs::create_directories(dir);
  write_blob(dir / "latent.dmem", z, blob_dtype(cfg));
  json out = {{"latent", "latent.dmem"}, {"latent_shape", z.shape()}};
  if (cfg.output.png) {
    const PixelVideo v = m.codec.decode(LatentVideo{z, m.codec.fingerprint()});
    fs::create_directories(dir / "frames");
    json frames = json::array();
    for (std::size_t f = 0; f < v.data.dim(1); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.png", f);
      tools::write_png(dir / "frames" / name, tools::video_frame(v, f));
      frames.push_back(std::string("frames/") + name);
    }
    out["frames"] = frames;
  }
  return out;
}

Shape latent_shape(const RunConfig& cfg, const Model& m) {
  return m.codec.latent_shape({3, cfg.video.frames, cfg.video.height, cfg.video.width});
}

// ---------------------------------------------------------------- bank

struct BankBuildOpts {
  std::optional<std::size_t> synthetic;
  std::string from;
  bool force = false;
};

int bank_build(const BankBuildOpts& o) {
  const RunConfig cfg = load_config([&](RunConfig& c) {
    if (o.synthetic) c.retrieval.bank_size = *o.synthetic;
  });
  const fs::path root = cfg.bank_root();
  if (fs::exists(root / "manifest.json")) {
    if (!o.force) throw DataError("a bank already exists at " + root.string() + " (use --force to replace it)");
    fs::remove_all(root);
  }
  const LatentCodec codec(cfg.codec);
  MemoryBank bank = MemoryBank::create(root, codec.fingerprint(), cfg.retrieval.d_embed);
  if (!o.from.empty()) {
    // id <TAB> caption <TAB> latent blob path (relative to the list file)
    const fs::path list(o.from);
    const Shape want = codec.latent_shape({3, cfg.video.frames, cfg.video.height, cfg.video.width});
    for (const auto& line : read_lines(list)) {
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos) throw DataError("expected id<TAB>caption<TAB>latent in: " + line);
      fs::path blob = line.substr(t2 + 1);
      if (blob.is_relative()) blob = list.parent_path() / blob;
      Tensor z = read_blob(blob);
      if (z.shape() != want) throw DataError("latent " + blob.string() + " has the wrong shape");
      bank.add(line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), LatentVideo{std::move(z), codec.fingerprint()});
    }
  } else {
    for (const auto& c : bank_clips(cfg)) bank.add(c.id, c.caption, codec.encode(c.video));
  }
  bank.save();
  note("built bank of " + std::to_string(bank.size()) + " entries at " + root.string());
  return kOk;
}

int bank_precompute(const std::string& encoder_dir) {
  const RunConfig cfg = load_config();
  Model m(cfg);
  if (!encoder_dir.empty()) load_encoder(m, encoder_dir);
  MemoryBank bank = open_bank(cfg);
  const std::size_t n = bank.precompute_tokens(m.encoder);
  std::cout << "updated " << n << " of " << bank.size() << " entries (encoder " << m.encoder.version() << ")\n";
  return kOk;
}

int bank_subset(double fraction, std::optional<std::uint64_t> seed, const std::string& out) {
  const RunConfig cfg = load_config();
  const MemoryBank src = open_bank(cfg);
  if (fs::exists(fs::path(out) / "manifest.json")) throw DataError("a bank already exists at " + out);
  const auto idx = subset_indices(src.size(), fraction, seed.value_or(cfg.seed));
  MemoryBank dst = MemoryBank::create(out, src.manifest().codec_fingerprint, src.manifest().d_embed,
                                      src.manifest().created);
  for (std::size_t i : idx) {
    const auto& e = src.entries()[i];
    dst.add(e.id, e.caption, src.load_latent(i), e.embedding);
  }
  dst.save();
  std::cout << "subset of " << idx.size() << " of " << src.size() << " entries written to " << out << "\n";
  return kOk;
}

int bank_stats(const std::string& encoder_dir) {
  const RunConfig cfg = load_config();
  Model m(cfg);
  if (!encoder_dir.empty()) load_encoder(m, encoder_dir);
  const MemoryBank bank = open_bank(cfg);
  std::size_t cached = 0;
  for (const auto& e : bank.entries()) cached += e.tokens_ref.has_value();
  const std::size_t tpv = m.encoder.tokens_per_video();
  const json j = {{"root", bank.root().string()},
                  {"entries", bank.size()},
                  {"d_embed", bank.manifest().d_embed},
                  {"codec_fingerprint", bank.manifest().codec_fingerprint},
                  {"created", bank.manifest().created},
                  {"entries_with_tokens", cached},
                  {"stale_for_encoder", bank.stale_count(m.encoder)},
                  {"encoder_version", m.encoder.version()},
                  {"tokens_per_video", tpv},
                  {"top_k", cfg.retrieval.top_k},
                  {"memory_tokens_per_query", tpv * cfg.retrieval.top_k}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int bank_query(const std::string& prompt, std::optional<std::size_t> k) {
  const RunConfig cfg = load_config();
  const MemoryBank bank = open_bank(cfg);
  const auto hits = bank.query_topk(prompt, k.value_or(cfg.retrieval.top_k));
  for (std::size_t r = 0; r < hits.size(); ++r) {
    std::cout << r + 1 << "\t" << hits[r].id << "\t" << fmt(hits[r].score) << "\t"
              << bank.entries()[hits[r].index].caption << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::optional<std::size_t> steps;
  std::string ablate;
  std::string out;
  bool resume = false;
};

int train(const TrainOpts& o) {
  const RunConfig cfg = load_config([&](RunConfig& c) {
    if (!o.ablate.empty()) c = ablation_variant(c, o.ablate);
    if (o.steps) c.training.steps = *o.steps;
  });
  const fs::path out = o.out.empty() ? default_out(cfg, "train") : fs::path(o.out);
  const fs::path ckpt = out / "checkpoint";
  json manifest = run_header(cfg, "train");
  if (fs::exists(out / "manifest.json")) {
    const auto prev = json::parse(read_text(out / "manifest.json"));
    if (!o.resume) throw DataError(out.string() + " already holds a run (use --resume or another --out)");
    if (prev.value("resume_key", "") != resume_key(cfg)) {
      throw DataError("cannot resume: " + out.string() + " was written with a different configuration");
    }
    manifest = prev;
    manifest["config_hash"] = cfg.hash();
  }
  manifest["resume_key"] = resume_key(cfg);

  Model m(cfg);
  ready(m);
  const MemoryBank bank = open_bank(cfg);
  if (bank.size() <= cfg.retrieval.top_k) throw DataError("bank is smaller than top_k + 1");
  const TrainSet train_set = build_train_set(m, training_clips(cfg), bank, cfg.retrieval.top_k);
  const TrainSet eval_set = build_train_set(m, eval_clips(cfg), bank, cfg.retrieval.top_k);
  EncoderTrainer tr(m, train_set, cfg.seed);
  const auto draws = tr.eval_draws(eval_set, cfg.seed);

  if (o.resume && fs::exists(ckpt / "state.json")) {
    tr.load_checkpoint(ckpt);
    note("resumed at step " + std::to_string(tr.steps_done()));
  } else {
    manifest["initial_eval_loss"] = tr.evaluate(eval_set, draws);
    manifest["status"] = "running";
    write_run_files(out, cfg, manifest);
  }

  const auto& tc = cfg.training;
  while (tr.steps_done() < tc.steps) {
    const double loss = tr.step();
    const std::size_t s = tr.steps_done();
    if (tc.freeze_check_every > 0 && s % tc.freeze_check_every == 0) tr.check_freeze();
    if (s % 10 == 0 || s == tc.steps) note("step " + std::to_string(s) + " loss " + fmt(loss));
    if (tc.checkpoint_every > 0 && s % tc.checkpoint_every == 0) {
      tr.save_checkpoint(ckpt);
      write_losses_csv(out / "losses.csv", tr.losses());
    }
  }
  tr.check_freeze();
  tr.save_checkpoint(ckpt);
  write_losses_csv(out / "losses.csv", tr.losses());
  save_archive(out / "encoder", m.encoder.to_archive(), blob_dtype(cfg));

  const double final_eval = tr.evaluate(eval_set, draws);
  manifest["status"] = "complete";
  manifest["steps"] = tr.steps_done();
  manifest["final_eval_loss"] = final_eval;
  manifest["variant"] = o.ablate.empty() ? "default" : o.ablate;
  manifest["encoder_version"] = m.encoder.version();
  manifest["trainable_parameters"] = trainable_count(m);
  manifest["frozen_digest"] = tr.frozen_digest_at_start();
  manifest["top_k"] = cfg.retrieval.top_k;
  manifest["bank"] = bank.root().string();
  write_run_files(out, cfg, manifest);
  std::cout << "eval loss " << fmt(manifest["initial_eval_loss"].get<double>()) << " -> " << fmt(final_eval)
            << "; run written to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- generate

struct GenerateOpts {
  std::string prompt;
  std::string encoder;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool no_memory = false;
};

int generate(const GenerateOpts& o) {
  const RunConfig cfg = load_config();
  Model m(cfg);
  ready(m);
  if (!o.encoder.empty()) load_encoder(m, o.encoder);
  const std::uint64_t seed = o.seed.value_or(cfg.seed);

  SamplerPlan plan = make_plan(m.schedule, cfg.diffusion.sampler_steps);
  MemoryTokens mem;
  json retrieved = json::array();
  std::size_t encoded = 0;
  if (!o.no_memory && cfg.retrieval.top_k > 0) {
    if (o.encoder.empty()) warn("no --encoder given; memory tokens come from an untrained encoder");
    const MemoryBank bank = open_bank(cfg);
    std::vector<MemoryTokens> parts;
    const auto hits = bank.query_topk(o.prompt, cfg.retrieval.top_k);
    for (std::size_t r = 0; r < hits.size(); ++r) {
      bool fresh = false;
      parts.push_back(bank.tokens_for(hits[r].index, m.encoder, &fresh));
      encoded += fresh;
      retrieved.push_back({{"rank", r + 1}, {"id", hits[r].id}, {"score", hits[r].score}, {"cached", !fresh}});
    }
    mem = MemoryTokens::concat(parts);
    plan.memory = &mem.tokens;
    if (encoded > 0) note(std::to_string(encoded) + " references encoded on the fly (run `ditmem bank precompute`)");
  }

  const Tensor z = sample(plan, m.backbone, m.schedule, m.backbone.encode_text(o.prompt), latent_shape(cfg, m), seed);
  const fs::path out = o.out.empty() ? default_out(cfg, "generate") : fs::path(o.out);
  json manifest = run_header(cfg, "generate");
  manifest["prompt"] = o.prompt;
  manifest["sample_seed"] = seed;
  manifest["sampler_steps"] = cfg.diffusion.sampler_steps;
  manifest["memory"] = !o.no_memory && cfg.retrieval.top_k > 0;
  manifest["retrieved"] = retrieved;
  manifest["memory_tokens"] = mem.count();
  manifest["encoder_version"] = m.encoder.version();
  manifest["output"] = write_video(out, cfg, m, z);
  write_run_files(out, cfg, manifest);
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- steer

struct ExtractOpts {
  std::vector<std::string> positive, negative;
  std::string positive_file, negative_file;
  std::optional<std::size_t> runs;
  std::string out;
};

double max_norm(const SteeringTable& t) {
  double best = 0.0;
  for (const auto& [key, v] : t.vectors) {
    double s = 0.0;
    for (double x : v) s += x * x;
    best = std::max(best, std::sqrt(s));
  }
  return best;
}

int steer_extract(ExtractOpts o) {
  const RunConfig cfg = load_config();
  if (!o.positive_file.empty()) for (auto& l : read_lines(o.positive_file)) o.positive.push_back(l);
  if (!o.negative_file.empty()) for (auto& l : read_lines(o.negative_file)) o.negative.push_back(l);
  if (o.positive.empty() || o.negative.empty()) {
    throw std::invalid_argument("steer extract needs positive and negative prompts");
  }
  const std::size_t runs = o.runs.value_or(cfg.steering.runs_per_side);
  if (runs == 0) throw std::invalid_argument("--runs must be positive");
  auto specs = [&](const std::vector<std::string>& prompts) {
    std::vector<RunSpec> out;
    for (std::size_t p = 0; p < prompts.size(); ++p)
      for (std::size_t v = 0; v < runs; ++v) out.push_back({prompts[p], per_prompt_seed(p, v)});
    return out;
  };
  Model m(cfg);
  ready(m);
  const CaptureSetup setup{&m.backbone, &m.schedule, cfg.diffusion.sampler_steps, latent_shape(cfg, m)};
  const auto [pos, neg] = capture_runs(specs(o.positive), specs(o.negative), setup, setup);
  const SteeringTable raw = compute_steering(pos, neg);
  if (max_norm(raw) == 0.0) warn("steering table is identically zero; positive and negative runs match");

  const fs::path out = o.out.empty() ? default_out(cfg, "steer") : fs::path(o.out);
  fs::create_directories(out);
  const DType dt = blob_dtype(cfg);
  save_archive(out / "raw", steering_to_archive(raw), dt);
  json zeros;
  for (const auto& [name, band] : {std::pair{"low", freq::Band::kLow}, std::pair{"high", freq::Band::kHigh}}) {
    const SteeringTable t = filter_and_normalize(raw, band, cfg.filters.cutoff_rho, cfg.filters.attenuation_gamma);
    if (t.zero_vectors > 0) {
      warn(std::to_string(t.zero_vectors) + " of " + std::to_string(t.vectors.size()) + " " + name +
           "-band vectors are zero after filtering");
    }
    zeros[name] = t.zero_vectors;
    save_archive(out / name, steering_to_archive(t), dt);
  }
  json manifest = run_header(cfg, "steer extract");
  manifest["positive"] = o.positive;
  manifest["negative"] = o.negative;
  manifest["runs_per_prompt"] = runs;
  manifest["timesteps"] = raw.timesteps();
  manifest["layers"] = raw.layers();
  manifest["width"] = raw.width();
  manifest["raw_max_norm"] = max_norm(raw);
  manifest["zero_vectors"] = zeros;
  write_run_files(out, cfg, manifest);
  std::cout << "steering tables written to " << out.string() << "\n";
  return kOk;
}

struct SteerGenOpts {
  std::string table, prompt, band, out;
  std::optional<double> alpha;
  std::optional<std::uint64_t> seed;
};

int steer_generate(const SteerGenOpts& o) {
  const RunConfig cfg = load_config([&](RunConfig& c) {
    if (!o.band.empty()) c.steering.band = o.band;
    if (o.alpha) c.steering.alpha = *o.alpha;
  });
  const std::string& band = cfg.steering.band;
  if (band != "low" && band != "high") throw std::invalid_argument("--band must be low or high");
  const fs::path dir = fs::path(o.table) / band;
  if (!fs::exists(dir)) throw DataError("no " + band + "-band table under " + o.table);
  const SteeringTable table = steering_from_archive(load_archive(dir));

  Model m(cfg);
  ready(m);
  if (table.width() != m.backbone.config().d_model) throw DataError("steering table width does not match the backbone");
  SamplerPlan plan = make_plan(m.schedule, cfg.diffusion.sampler_steps);
  plan.steering = make_injection_hook(table, cfg.steering.alpha, m.backbone.config().d_model, cfg.steering.layers);
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  const Tensor z = sample(plan, m.backbone, m.schedule, m.backbone.encode_text(o.prompt), latent_shape(cfg, m), seed);

  const fs::path out = o.out.empty() ? default_out(cfg, "steer-generate") : fs::path(o.out);
  json manifest = run_header(cfg, "steer generate");
  manifest["prompt"] = o.prompt;
  manifest["sample_seed"] = seed;
  manifest["band"] = band;
  manifest["alpha"] = cfg.steering.alpha;
  manifest["table"] = o.table;
  manifest["injected_steps"] = plan.inject_cutoff;
  manifest["sampler_steps"] = plan.steps.size();
  manifest["output"] = write_video(out, cfg, m, z);
  write_run_files(out, cfg, manifest);
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- ablate

int ablate(std::optional<std::size_t> steps, const std::string& out_opt) {
  const RunConfig base = load_config([&](RunConfig& c) {
    if (steps) c.training.steps = *steps;
  });
  const fs::path out = out_opt.empty() ? default_out(base, "ablate") : fs::path(out_opt);
  const MemoryBank bank = open_bank(base);

  std::ostringstream csv;
  csv << "variant,branches,attention,trainable_params,tokens_per_video,memory_tokens,initial_loss,final_loss,seconds\n";
  json rows = json::array();
  std::printf("%-8s %-9s %-9s %10s %6s %6s %10s %10s %8s\n", "variant", "branches", "attention", "params",
              "tok/v", "mem", "init", "final", "sec");
  for (const auto& name : ablation_order()) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = ablation_variant(base, name);
    Model m(cfg);
    ready(m);
    const TrainSet train_set = build_train_set(m, training_clips(cfg), bank, cfg.retrieval.top_k);
    const TrainSet eval_set = build_train_set(m, eval_clips(cfg), bank, cfg.retrieval.top_k);
    EncoderTrainer tr(m, train_set, cfg.seed);
    const auto draws = tr.eval_draws(eval_set, cfg.seed);
    const double init = tr.evaluate(eval_set, draws);
    while (tr.steps_done() < cfg.training.steps) {
      tr.step();
      const std::size_t every = cfg.training.freeze_check_every;
      if (every > 0 && tr.steps_done() % every == 0) tr.check_freeze();
    }
    tr.check_freeze();
    const double fin = tr.evaluate(eval_set, draws);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::string branches;
    for (Branch b : cfg.encoder.branches()) branches += (branches.empty() ? "" : "+") + std::string(branch_name(b));
    const std::string attention(attention_mode_name(cfg.encoder.attention_mode));
    const std::size_t params = trainable_count(m), tpv = m.encoder.tokens_per_video();
    csv << name << "," << branches << "," << attention << "," << params << "," << tpv << ","
        << tpv * cfg.retrieval.top_k << "," << fmt(init) << "," << fmt(fin) << "," << fmt(secs) << "\n";
    rows.push_back({{"variant", name},
                    {"branches", branches},
                    {"attention", attention},
                    {"trainable_params", params},
                    {"tokens_per_video", tpv},
                    {"memory_tokens", tpv * cfg.retrieval.top_k},
                    {"initial_loss", init},
                    {"final_loss", fin}});
    std::printf("%-8s %-9s %-9s %10zu %6zu %6zu %10.5f %10.5f %8.1f\n", name.c_str(), branches.c_str(),
                attention.c_str(), params, tpv, tpv * cfg.retrieval.top_k, init, fin, secs);
    std::fflush(stdout);
  }
  fs::create_directories(out);
  write_text_atomic(out / "ablation.csv", csv.str());
  json manifest = run_header(base, "ablate");
  manifest["steps"] = base.training.steps;
  manifest["variants"] = rows;
  write_run_files(out, base, manifest);
  std::cout << "ablation written to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------- report

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path.string() + " is empty");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
  };
  const auto head = split(lines[0]);
  std::vector<std::map<std::string, std::string>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split(lines[i]);
    if (cells.size() != head.size()) throw DataError(path.string() + ": malformed row " + std::to_string(i + 1));
    std::map<std::string, std::string> r;
    for (std::size_t c = 0; c < head.size(); ++c) r[head[c]] = cells[c];
    rows.push_back(std::move(r));
  }
  return rows;
}

double number(const std::map<std::string, std::string>& row, const std::string& key) {
  try {
    return std::stod(row.at(key));
  } catch (const std::exception&) {
    throw DataError("bad or missing column " + key);
  }
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}

int report(const std::string& run) {
  const fs::path dir(run);
  if (!fs::is_directory(dir)) throw DataError("run directory " + run + " does not exist");
  const fs::path out = dir / "report";
  json summary = json::object();

  if (fs::exists(dir / "losses.csv")) {
    std::vector<double> loss;
    for (const auto& r : read_csv(dir / "losses.csv")) loss.push_back(number(r, "loss"));
    if (loss.empty()) throw DataError("losses.csv has no rows");
    fs::create_directories(out);
    tools::write_png(out / "loss_curve.png", tools::line_chart({{"loss", loss}}));
    summary["loss_curve"] = {{"steps", loss.size()}, {"first", loss.front()}, {"last", loss.back()}};
  }
  if (fs::exists(dir / "ablation.csv")) {
    std::vector<double> tokens, fin;
    json variants = json::array();
    for (const auto& r : read_csv(dir / "ablation.csv")) {
      tokens.push_back(number(r, "memory_tokens"));
      fin.push_back(number(r, "final_loss"));
      variants.push_back(r.at("variant"));
    }
    fs::create_directories(out);
    tools::write_png(out / "token_budget.png", tools::bar_chart(tokens));
    tools::write_png(out / "ablation_loss.png", tools::bar_chart(fin));
    summary["token_budget"] = {{"variants", variants}, {"memory_tokens", tokens}};
  }
  if (fs::exists(dir / "raw")) {
    const SteeringTable raw = steering_from_archive(load_archive(dir / "raw"));
    std::vector<tools::Series> series;
    for (const char* band : {"low", "high"}) {
      if (!fs::exists(dir / band)) continue;
      const SteeringTable f = steering_from_archive(load_archive(dir / band));
      // Per timestep: mean over layers of cos(raw, filtered).
      tools::Series s{band, {}};
      for (std::size_t t : raw.timesteps()) {
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t l : raw.layers()) {
          const auto it = f.vectors.find({t, l});
          if (it == f.vectors.end()) continue;
          acc += cosine(raw.vectors.at({t, l}), it->second);
          ++n;
        }
        s.values.push_back(n ? acc / static_cast<double>(n) : 0.0);
      }
      summary["steering_cosine"][band] = s.values;
      series.push_back(std::move(s));
    }
    if (!series.empty()) {
      fs::create_directories(out);
      tools::write_png(out / "steering_cosine.png", tools::line_chart(series));
    }
  }
  if (summary.empty()) {
    throw DataError("nothing to report in " + run + " (expected losses.csv, ablation.csv or a raw/ steering table)");
  }
  write_text_atomic(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "report written to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-conditioned video diffusion lab"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("-c,--config", g.config, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "Override, section.key=value (repeatable)");
  app.add_option("--cache-dir", g.cache_dir, "Pretrained backbone cache (default $DITMEM_DATA_DIR/cache)");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress messages");

  std::function<int()> action;

  auto* bank = app.add_subcommand("bank", "Build and maintain the memory bank");
  bank->require_subcommand(1);
  BankBuildOpts build_opts;
  auto* build = bank->add_subcommand("build", "Create a bank from synthetic clips or a latent list");
  build->add_option("--synthetic", build_opts.synthetic, "Number of synthetic clips (default retrieval.bank_size)");
  build->add_option("--from", build_opts.from, "TSV of id, caption, latent blob path")->check(CLI::ExistingFile);
  build->add_flag("--force", build_opts.force, "Replace an existing bank");
  build->callback([&] { action = [&] { return bank_build(build_opts); }; });

  std::string pre_encoder;
  auto* pre = bank->add_subcommand("precompute", "Cache memory tokens for missing or stale entries");
  pre->add_option("--encoder", pre_encoder, "Trained run directory or encoder archive");
  pre->callback([&] { action = [&] { return bank_precompute(pre_encoder); }; });

  double fraction = 0.05;
  std::optional<std::uint64_t> subset_seed;
  std::string subset_out;
  auto* sub = bank->add_subcommand("subset", "Write a random fraction of the bank to a new bank");
  sub->add_option("--fraction", fraction, "Fraction in (0, 1]")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--seed", subset_seed, "Sampling seed (default: run seed)");
  sub->add_option("--out", subset_out, "Destination bank directory")->required();
  sub->callback([&] { action = [&] { return bank_subset(fraction, subset_seed, subset_out); }; });

  std::string stats_encoder;
  auto* stats = bank->add_subcommand("stats", "Print bank statistics as JSON");
  stats->add_option("--encoder", stats_encoder, "Encoder to check staleness against");
  stats->callback([&] { action = [&] { return bank_stats(stats_encoder); }; });

  std::string query_prompt;
  std::optional<std::size_t> query_k;
  auto* query = bank->add_subcommand("query", "Show the top-K entries for a prompt");
  query->add_option("--prompt", query_prompt)->required();
  query->add_option("-k", query_k, "Number of results (default retrieval.top_k)");
  query->callback([&] { action = [&] { return bank_query(query_prompt, query_k); }; });

  TrainOpts train_opts;
  auto* tr = app.add_subcommand("train", "Train the memory encoder against the frozen backbone");
  tr->add_option("--steps", train_opts.steps, "Training steps (default training.steps)");
  tr->add_option("--ablate", train_opts.ablate, "Encoder variant: 3d, hpf, hpf-lpf, spa, sa, no-hpf, no-lpf");
  tr->add_option("--out", train_opts.out, "Run directory");
  tr->add_flag("--resume", train_opts.resume, "Continue from the run's last checkpoint");
  tr->callback([&] { action = [&] { return train(train_opts); }; });

  GenerateOpts gen_opts;
  auto* gen = app.add_subcommand("generate", "Sample a video, optionally conditioned on retrieved memory");
  gen->add_option("--prompt", gen_opts.prompt)->required();
  gen->add_option("--encoder", gen_opts.encoder, "Trained run directory or encoder archive");
  gen->add_option("--seed", gen_opts.seed, "Sampling seed (default: run seed)");
  gen->add_option("--out", gen_opts.out, "Output directory");
  gen->add_flag("--no-memory", gen_opts.no_memory, "Skip retrieval");
  gen->callback([&] { action = [&] { return generate(gen_opts); }; });

  auto* steer = app.add_subcommand("steer", "Extract and apply steering vectors");
  steer->require_subcommand(1);
  ExtractOpts ex_opts;
  auto* ex = steer->add_subcommand("extract", "Difference-of-means steering table from prompt sets");
  ex->add_option("--positive", ex_opts.positive, "Physics-consistent prompt (repeatable)");
  ex->add_option("--negative", ex_opts.negative, "Neutral prompt (repeatable)");
  ex->add_option("--positive-file", ex_opts.positive_file, "One positive prompt per line")->check(CLI::ExistingFile);
  ex->add_option("--negative-file", ex_opts.negative_file, "One negative prompt per line")->check(CLI::ExistingFile);
  ex->add_option("--runs", ex_opts.runs, "Seeds per prompt (default steering.runs_per_side)");
  ex->add_option("--out", ex_opts.out, "Output directory");
  ex->callback([&] { action = [&] { return steer_extract(ex_opts); }; });

  SteerGenOpts sg_opts;
  auto* sg = steer->add_subcommand("generate", "Sample with steering injection");
  sg->add_option("--table", sg_opts.table, "Directory written by steer extract")->required();
  sg->add_option("--prompt", sg_opts.prompt)->required();
  sg->add_option("--band", sg_opts.band, "low or high (default steering.band)");
  sg->add_option("--alpha", sg_opts.alpha, "Injection strength (default steering.alpha)");
  sg->add_option("--seed", sg_opts.seed, "Sampling seed (default: run seed)");
  sg->add_option("--out", sg_opts.out, "Output directory");
  sg->callback([&] { action = [&] { return steer_generate(sg_opts); }; });

  std::optional<std::size_t> ablate_steps;
  std::string ablate_out;
  auto* abl = app.add_subcommand("ablate", "Train and evaluate the five encoder variants");
  abl->add_option("--steps", ablate_steps, "Training steps per variant (default training.steps)");
  abl->add_option("--out", ablate_out, "Output directory");
  abl->callback([&] { action = [&] { return ablate(ablate_steps, ablate_out); }; });

  std::string report_run;
  auto* rep = app.add_subcommand("report", "Render plots for a run directory");
  rep->add_option("--run", report_run, "Run directory")->required();
  rep->callback([&] { action = [&] { return report(report_run); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    return action();
  } catch (const std::invalid_argument& e) {
    std::cerr << "ditmem: usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "ditmem: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::logic_error& e) {
    std::cerr << "ditmem: invariant violated: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "ditmem: data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "ditmem: data error: " << e.what() << "\n";
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "ditmem: data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "ditmem: error: " << e.what() << "\n";
    return kData;
  }
}
