// Runs the twelve acceptance checks and prints one PASS/FAIL line per check.
// Usage: acceptance [check numbers...]   (default: all)

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ditmem/blob_io.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/freq_filter.hpp"
#include "ditmem/lab.hpp"
#include "ditmem/steering.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace ditmem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  rng.fill_normal(t.data());
  return t;
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

fs::path data_dir() {
  if (const char* env = std::getenv("DITMEM_DATA_DIR"); env && *env) return env;
  return fs::temp_directory_path() / "ditmem-acceptance";
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("ditmem-acc-" + tag + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

RunConfig desk_config() {
  RunConfig c = RunConfig::defaults();
  c.finalize();
  return c;
}

const char* kTinyIni = R"([codec]
frames = 4
height = 32
width = 32
[backbone]
patch = 1,2,2
d_model = 16
n_heads = 2
n_blocks = 1
cond_dim = 8
freq_dim = 8
pretrain_steps = 3
pretrain_clips = 8
pretrain_batch = 2
[encoder]
block_channels = 4
n_heads = 2
tokens_per_branch = 2
[training]
batch = 2
dataset_size = 8
eval_size = 4
freeze_check_every = 2
[retrieval]
bank_size = 24
[diffusion]
sampler_steps = 6
)";

RunConfig tiny_config() { return RunConfig::from_ini_text(kTinyIni); }

// Desk model with its pretrained backbone, shared by the checks that need one.
Model& desk_model() {
  static Model* m = [] {
    auto* model = new Model(desk_config());
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = prepare_backbone(*model, data_dir() / "cache");
    std::printf("  setup: desk backbone %s (%.1f s)\n", rep.from_cache ? "loaded from cache" : "pretrained",
                seconds_since(t0));
    std::fflush(stdout);
    return model;
  }();
  return *m;
}

// ------------------------------------------------------------------ 1

Outcome fft_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  std::size_t n = 0;
  for (int rank : {2, 4}) {
    for (int i = 0; i < 50; ++i) {
      Shape shape;
      for (int a = 0; a < rank; ++a) shape.push_back(1 + rng.uniform_int(8));
      const Tensor x = random_tensor(shape, rng);
      const auto band = rng.uniform() < 0.5 ? freq::Band::kLow : freq::Band::kHigh;
      const double rho = 0.05 + 0.9 * rng.uniform();
      const double gamma = rng.uniform();
      const bool residual = rng.uniform() < 0.5;
      const auto mask = freq::build_mask(freq::fft_grid(x), band, rho, gamma);
      worst = std::max(worst, max_diff(freq::apply_filter(x, mask, residual), freq::naive_dft_oracle(x, mask, residual)));
      ++n;
    }
  }
  return {worst <= 1e-10, fmt("%zu tensors, max |fft - dft| = %.3g (tol 1e-10)", n, worst)};
}

// ------------------------------------------------------------------ 2

Outcome mask_identities() {
  std::size_t grids = 0, sum_bad = 0, sym_bad = 0;
  for (std::size_t rank = 1; rank <= 3; ++rank) {
    std::size_t count = 1;
    for (std::size_t a = 0; a < rank; ++a) count *= 9;
    for (std::size_t code = 0; code < count; ++code) {
      Shape grid;
      for (std::size_t a = 0, c = code; a < rank; ++a, c /= 9) grid.push_back(1 + c % 9);
      ++grids;
      for (double rho : {0.1, 0.25, 0.5, 0.9})
        for (double gamma : {0.0, 0.2, 0.7, 1.0}) {
          const auto lo = freq::build_mask(grid, freq::Band::kLow, rho, gamma);
          const auto hi = freq::build_mask(grid, freq::Band::kHigh, rho, gamma);
          for (std::size_t b = 0; b < lo.bins(); ++b) {
            if (lo.values[b] + hi.values[b] != 1.0 + gamma) ++sum_bad;
            // Mirror index (n - k) mod n on every axis.
            std::size_t rem = b, mirror = 0, stride = 1;
            std::vector<std::size_t> idx(rank);
            for (std::size_t a = rank; a-- > 0;) idx[a] = rem % grid[a], rem /= grid[a];
            for (std::size_t a = rank; a-- > 0;) {
              mirror += ((grid[a] - idx[a]) % grid[a]) * stride;
              stride *= grid[a];
            }
            if (lo.values[b] != lo.values[mirror] || hi.values[b] != hi.values[mirror]) ++sym_bad;
          }
        }
    }
  }
  Rng rng(7);
  double worst_ratio = 0.0;
  for (int i = 0; i < 40; ++i) {
    Shape shape = i % 2 ? Shape{1 + rng.uniform_int(8), 1 + rng.uniform_int(8), 1 + rng.uniform_int(8),
                                1 + rng.uniform_int(8)}
                        : Shape{1 + rng.uniform_int(64), 1 + rng.uniform_int(16)};
    const Tensor x = random_tensor(shape, rng);
    freq::FilterDiagnostics diag;
    freq::apply_filter(x, freq::build_mask(freq::fft_grid(x), i % 4 < 2 ? freq::Band::kLow : freq::Band::kHigh, 0.25, 0.2),
                       false, &diag);
    worst_ratio = std::max(worst_ratio, diag.max_imag / x.max_abs());
  }
  return {sum_bad == 0 && sym_bad == 0 && worst_ratio <= 1e-5,
          fmt("%zu grids: %zu sum violations, %zu symmetry violations; imag residue %.3g max|x| (tol 1e-5)",
              grids, sum_bad, sym_bad, worst_ratio)};
}

// ------------------------------------------------------------------ 3

Outcome reference_constants() {
  std::vector<std::string> problems;
  const RunConfig d = RunConfig::defaults();
  if (d.filters.attenuation_gamma != 0.2 || EncoderConfig{}.attenuation_gamma != 0.2) problems.push_back("gamma");
  if (d.retrieval.top_k != 5 || kDefaultTopK != 5) problems.push_back("top_k");

  // Injection window: ceil(2n/3) leading sampler steps, counted from the sampler itself.
  BackboneConfig bc;
  bc.n_blocks = 2;
  bc.d_model = 8;
  bc.n_heads = 2;
  bc.cond_dim = 8;
  bc.freq_dim = 8;
  const DitBackbone bb(bc);
  const NoiseSchedule sched = build_schedule(1000, 1e-4, 0.02);
  const Tensor cond = bb.encode_text("a ball falls");
  for (std::size_t n = 1; n <= 100; ++n) {
    const std::size_t expect = (2 * n + 2) / 3;
    SamplerPlan plan = make_plan(sched, n);
    if (plan.inject_cutoff != expect || injection_cutoff(n) != expect) problems.push_back(fmt("cutoff n=%zu", n));
    if (n <= 12 || n == 30 || n == 50) {
      std::vector<std::size_t> seen;
      plan.steering = [&](std::size_t t) {
        seen.push_back(t);
        return std::vector<std::vector<double>>(bc.n_blocks, std::vector<double>(bc.d_model, 0.0));
      };
      sample(plan, bb, sched, cond, {4, 2, 4, 4}, 1);
      const std::vector<std::size_t> lead(plan.steps.begin(), plan.steps.begin() + expect);
      if (seen != lead) problems.push_back(fmt("hook n=%zu", n));
    }
  }

  EncoderConfig full;
  full.in_channels = 4;
  full.latent_dhw = {4, 8, 8};
  full.block_channels = {2};
  full.tokens_per_branch = 100;
  full.d_model = 8;
  full.n_heads = 2;
  const MemoryEncoder enc(full, "full-scale");
  const std::size_t tokens = enc.tokens_per_video() * d.retrieval.top_k;
  if (tokens != 1000) problems.push_back(fmt("tokens=%zu", tokens));

  std::ifstream in(DITMEM_REFERENCE_TEXT);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string reference_text = ss.str();
  for (const char* quote : {"scaling their magnitudes to $0.2$", "top-5 retrieved videos",
                            "skipping the final one-third of timesteps", "roughly 1{,}000 memory tokens"}) {
    if (reference_text.find(quote) == std::string::npos) problems.push_back(std::string("quote: ") + quote);
  }
  std::string detail = fmt("gamma %.1f, K %zu, window ceil(2n/3) for n=1..100, %zu tokens", d.filters.attenuation_gamma,
                           d.retrieval.top_k, tokens);
  for (const auto& p : problems) detail += "; mismatch " + p;
  return {problems.empty(), detail};
}

// ------------------------------------------------------------------ 4

Outcome noop_equivalences() {
  Model& m = desk_model();
  const RunConfig& cfg = m.cfg;
  const Shape shape = m.codec.latent_shape({3, cfg.video.frames, cfg.video.height, cfg.video.width});
  const Tensor cond = m.backbone.encode_text("a small red disc moves left on a gray background");
  const SamplerPlan base_plan = make_plan(m.schedule, cfg.diffusion.sampler_steps);
  const Tensor baseline = sample(base_plan, m.backbone, m.schedule, cond, shape, 42);

  // Real table from two short capture sets.
  const CaptureSetup setup{&m.backbone, &m.schedule, cfg.diffusion.sampler_steps, shape};
  const auto [pos, neg] = capture_runs({{"a ball falls and bounces on the floor", 42}}, {{"a ball", 42}}, setup, setup);
  const SteeringTable table = filter_and_normalize(compute_steering(pos, neg), freq::Band::kLow, 0.25, 0.2);
  SamplerPlan steer0 = base_plan;
  steer0.steering = make_injection_hook(table, 0.0, cfg.backbone.d_model);
  const bool alpha_ok = bit_identical(sample(steer0, m.backbone, m.schedule, cond, shape, 42), baseline);

  const Tensor empty_memory({0, cfg.backbone.d_model});
  SamplerPlan no_mem = base_plan;
  no_mem.memory = &empty_memory;
  const bool memory_ok = bit_identical(sample(no_mem, m.backbone, m.schedule, cond, shape, 42), baseline);

  Rng rng(5);
  bool doubling_ok = true;
  for (const Shape& s : {Shape{16, 128}, Shape{4, 8, 8, 8}, Shape{3, 5, 7, 2}}) {
    const Tensor x = random_tensor(s, rng);
    const Tensor y = freq::apply_filter(x, freq::build_mask(freq::fft_grid(x), freq::Band::kHigh, 0.25, 1.0), true);
    Tensor twice = x;
    for (std::size_t i = 0; i < twice.numel(); ++i) twice[i] = 2.0 * x[i];
    doubling_ok = doubling_ok && bit_identical(y, twice);
  }
  return {alpha_ok && memory_ok && doubling_ok,
          fmt("alpha=0 steering %s, empty memory %s, gamma=1 residual doubling %s", alpha_ok ? "identical" : "DIFFERS",
              memory_ok ? "identical" : "DIFFERS", doubling_ok ? "identical" : "DIFFERS")};
}

// ------------------------------------------------------------------ 5

std::string param_sha(const ParameterSet& p) {
  Sha256 h;
  p.sha256_into(h);
  return h.hex_digest();
}

Outcome freeze_contract() {
  Model& shared = desk_model();
  Model m(shared.cfg);
  prepare_backbone(m, data_dir() / "cache");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainSet ts = build_train_set(m, training_clips(m.cfg), bank_clips(m.cfg), m.cfg.retrieval.top_k);
  EncoderTrainer tr(m, ts, m.cfg.seed);
  const std::string frozen_before = frozen_digest(m.codec, m.backbone);
  const std::string enc_before = param_sha(m.encoder.parameters());
  for (int s = 0; s < 50; ++s) tr.step();
  const bool frozen_same = frozen_digest(m.codec, m.backbone) == frozen_before;
  const bool enc_changed = param_sha(m.encoder.parameters()) != enc_before;
  std::size_t frozen_with_grad = 0, frozen_total = 0;
  for (const Parameter* p : parameter_partition(m.codec, m.backbone, m.encoder).frozen) {
    ++frozen_total;
    if (p->var.requires_grad() || (p->var.has_grad() && p->var.grad().max_abs() != 0.0)) ++frozen_with_grad;
  }
  const double secs = seconds_since(t0);
  return {frozen_same && enc_changed && frozen_with_grad == 0 && secs < 300.0,
          fmt("frozen sha %s, encoder sha %s, %zu/%zu frozen tensors with gradient, %.1f s (limit 300 s)",
              frozen_same ? "unchanged" : "CHANGED", enc_changed ? "changed" : "UNCHANGED", frozen_with_grad,
              frozen_total, secs)};
}

// ------------------------------------------------------------------ 6

Outcome gradient_check() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t groups = 0;
  Rng rng(99);
  Tensor a({2, 4, 8, 8}), b({2, 4, 8, 8}), w;
  rng.fill_normal(a.data());
  rng.fill_normal(b.data());
  for (AttentionMode mode : {AttentionMode::kShared, AttentionMode::kSeparate}) {
    EncoderConfig c;
    c.in_channels = 2;
    c.latent_dhw = {4, 8, 8};
    c.block_channels = {2};
    c.tokens_per_branch = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.attention_mode = mode;
    MemoryEncoder enc(c, "micro");
    enc.parameters().set_trainable(true);
    auto f = [&] {
      auto out = enc.forward({&a, &b}, {.training = true, .update_running_stats = false});
      const Var parts[] = {out.per_video[0], out.per_video[1]};
      const Var all = ag::concat_rows(parts);
      if (w.shape() != all.value().shape()) {
        w = Tensor(all.value().shape());
        Rng(3).fill_normal(w.data());
      }
      return ag::sum(ag::mul(all, Var::constant(w)));
    };
    std::vector<Var> leaves;
    for (auto& p : enc.parameters().params()) leaves.push_back(p.var);
    const auto r = ditmem::testing::gradcheck(leaves, f);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      ++groups;
      if (r.per_leaf[i] > worst) {
        worst = r.per_leaf[i];
        worst_name = std::string(attention_mode_name(mode)) + ":" + enc.parameters().params()[i].name;
      }
    }
  }
  return {worst <= 1e-4, fmt("%zu parameter groups, worst relative error %.3g at %s (tol 1e-4)", groups, worst,
                             worst_name.c_str())};
}

// ------------------------------------------------------------------ 7

Outcome training_sanity() {
  Model& shared = desk_model();
  Model m(shared.cfg);
  prepare_backbone(m, data_dir() / "cache");
  const TrainSet ts = build_train_set(m, training_clips(m.cfg), bank_clips(m.cfg), m.cfg.retrieval.top_k);
  EncoderTrainer tr(m, ts, 42);
  const auto draws = tr.eval_draws(ts, 42);
  const double before = tr.evaluate(ts, draws);
  for (int s = 0; s < 200; ++s) tr.step();
  const double after = tr.evaluate(ts, draws);
  return {after < 0.8 * before, fmt("%zu samples, 200 steps: loss %.4f -> %.4f (ratio %.3f, need < 0.8)",
                                    ts.items.size(), before, after, after / before)};
}

// ------------------------------------------------------------------ 8

Outcome memory_causality() {
  RunConfig cfg = desk_config();
  cfg.retrieval.top_k = 1;
  cfg.finalize();
  const auto t0 = std::chrono::steady_clock::now();
  const auto task = synth::make_paired_task(96, 4242, cfg.video);
  const std::vector<synth::Clip> train(task.targets.begin(), task.targets.begin() + 64);
  const std::vector<synth::Clip> val(task.targets.begin() + 64, task.targets.end());
  double loss[2] = {0, 0};
  std::size_t top1_hits = 0;
  for (int arm = 0; arm < 2; ++arm) {
    Model m(cfg);
    prepare_backbone(m, data_dir() / "cache");
    TrainSet ts = build_train_set(m, train, task.references, 1);
    TrainSet vs = build_train_set(m, val, task.references, 1);
    if (arm == 0) {
      for (std::size_t i = 0; i < vs.items.size(); ++i) top1_hits += vs.items[i].refs == std::vector<std::size_t>{64 + i};
    } else {
      ts = zero_references(ts);
      vs = zero_references(vs);
    }
    EncoderTrainer tr(m, ts, 42);
    const auto draws = tr.eval_draws(vs, 7);
    for (int s = 0; s < 500; ++s) tr.step();
    loss[arm] = tr.evaluate(vs, draws);
  }
  const double secs = seconds_since(t0);
  const double gain = 1.0 - loss[0] / loss[1];
  return {gain >= 0.10 && secs < 1200.0,
          fmt("validation loss memory %.4f vs control %.4f: %.1f%% lower (need >= 10%%); top-1 pairing %zu/32; %.0f s",
              loss[0], loss[1], 100.0 * gain, top1_hits, secs)};
}

// ------------------------------------------------------------------ 9

Outcome steering_recovery() {
  Rng rng(11);
  const std::size_t d = 128, layers = 4;
  std::vector<double> u(d), base(d);
  for (auto& x : u) x = rng.normal();
  for (auto& x : base) x = rng.normal();
  double un = 0;
  for (double x : u) un += x * x;
  const double sigma = 0.1 * std::sqrt(un);
  const SamplerPlan plan = make_plan(build_schedule(1000, 1e-4, 0.02), 30);
  auto trace = [&](bool positive) {
    Trace tr;
    for (std::size_t t : plan.steps)
      for (std::size_t l = 0; l < layers; ++l) {
        std::vector<double> v(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = base[i] + (positive ? u[i] : 0.0) + sigma * rng.normal();
        tr[{t, l}] = std::move(v);
      }
    return tr;
  };
  std::vector<Trace> pos, neg;
  for (int r = 0; r < 32; ++r) pos.push_back(trace(true));
  for (int r = 0; r < 32; ++r) neg.push_back(trace(false));
  const SteeringTable table = compute_steering(pos, neg);
  double min_cos = 1.0;
  for (const auto& [k, v] : table.vectors) {
    double ab = 0, aa = 0;
    for (std::size_t i = 0; i < d; ++i) ab += v[i] * u[i], aa += v[i] * v[i];
    min_cos = std::min(min_cos, ab / std::sqrt(aa * un));
  }

  SteeringTable constant;
  for (std::size_t t : plan.steps)
    for (std::size_t l = 0; l < layers; ++l) constant.vectors[{t, l}] = table.vectors.at({plan.steps[0], l});
  const SteeringTable filtered = filter_table(constant, freq::Band::kHigh, 0.25, 0.0);
  double max_norm = 0.0;
  for (const auto& [k, v] : filtered.vectors) {
    double s = 0;
    for (double x : v) s += x * x;
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  return {min_cos >= 0.9 && max_norm < 1e-8,
          fmt("min cosine %.4f over %zu vectors (need >= 0.9); constant table after gamma=0 high band: max norm %.3g",
              min_cos, table.vectors.size(), max_norm)};
}

// ------------------------------------------------------------------ 10

Outcome ablation_harness() {
  TempDir dir("ablate");
  {
    std::ofstream(dir.path / "tiny.ini") << kTinyIni;
  }
  const std::string env = "DITMEM_DATA_DIR='" + (dir.path / "data").string() + "' ";
  const std::string cli = std::string("'") + DITMEM_CLI_PATH + "' -q -c '" + (dir.path / "tiny.ini").string() + "' ";
  const std::string log = " >>'" + (dir.path / "log.txt").string() + "' 2>&1";
  const int build = std::system((env + cli + "bank build" + log).c_str());
  const int run = std::system((env + cli + "ablate --steps 4 --out '" + (dir.path / "abl").string() + "'" + log).c_str());
  if (build != 0 || run != 0) return {false, fmt("ditmem exited with status %d / %d", build, run)};

  std::ifstream in(dir.path / "abl" / "ablation.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> order;
  std::map<std::string, long> params;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::vector<std::string> cells;
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() < 4) return {false, "malformed ablation.csv row: " + line};
    order.push_back(cells[0]);
    params[cells[0]] = std::stol(cells[3]);
  }
  const bool order_ok = order == ablation_order();
  const bool distinct = params.count("spa") && params.count("sa") && params["spa"] != params["sa"];
  return {order_ok && distinct, fmt("%zu variants in %s order; trainable parameters spa %ld, sa %ld", order.size(),
                                    order_ok ? "expected" : "WRONG", params["spa"], params["sa"])};
}

// ------------------------------------------------------------------ 11

Outcome persistence() {
  TempDir dir("persist");
  Rng rng(17);
  std::size_t blobs = 0, blob_bad = 0;
  for (const Shape& s : {Shape{}, Shape{0}, Shape{7}, Shape{3, 0, 2}, Shape{4, 8, 8, 8}, Shape{2, 3, 5, 7, 1}}) {
    Tensor t(s);
    rng.fill_normal(t.data());
    write_blob(dir.path / "t.dmem", t);
    blob_bad += !bit_identical(read_blob(dir.path / "t.dmem"), t);
    Tensor f32 = t;
    for (std::size_t i = 0; i < f32.numel(); ++i) f32[i] = static_cast<float>(f32[i]);
    write_blob(dir.path / "f.dmem", f32, DType::kFloat32);
    blob_bad += !bit_identical(read_blob(dir.path / "f.dmem"), f32);
    blobs += 2;
  }

  const RunConfig cfg = tiny_config();
  const LatentCodec codec(cfg.codec);
  MemoryEncoder enc(cfg.encoder, codec.fingerprint());
  const std::size_t n = 8;
  bool manifest_ok = false, latents_ok = true;
  std::size_t first = 0, second = 0, stale = 0, redo = 0, after = 0;
  {
    const auto clips = synth::make_clips(n, 3, "p", cfg.video);
    MemoryBank bank = MemoryBank::create(dir.path / "bank", codec.fingerprint(), cfg.retrieval.d_embed);
    std::vector<LatentVideo> z;
    for (const auto& c : clips) {
      z.push_back(codec.encode(c.video));
      bank.add(c.id, c.caption, z.back());
    }
    bank.save();
    first = bank.precompute_tokens(enc);
    second = bank.precompute_tokens(enc);
    const MemoryBank back = MemoryBank::open(dir.path / "bank");
    manifest_ok = back.manifest() == bank.manifest() &&
                  manifest_to_text(manifest_from_text(manifest_to_text(bank.manifest()))) ==
                      manifest_to_text(bank.manifest());
    for (std::size_t i = 0; i < n; ++i) latents_ok = latents_ok && bit_identical(back.load_latent(i).data, z[i].data);
  }
  enc.parameters().params().front().var.mutable_value()[0] += 1e-3;
  MemoryBank reopened = MemoryBank::open(dir.path / "bank");
  stale = reopened.stale_count(enc);
  redo = reopened.precompute_tokens(enc);
  after = MemoryBank::open(dir.path / "bank").stale_count(enc);
  const bool ok = blob_bad == 0 && manifest_ok && latents_ok && first == n && second == 0 && stale == n &&
                  redo == n && after == 0;
  return {ok, fmt("%zu/%zu blobs exact; manifest %s; latents %s; precompute %zu then %zu; after perturbation "
                  "%zu stale, %zu re-encoded, %zu left",
                  blobs - blob_bad, blobs, manifest_ok ? "exact" : "DIFFERS", latents_ok ? "exact" : "DIFFER", first,
                  second, stale, redo, after)};
}

// ------------------------------------------------------------------ 12

Outcome retrieval() {
  Rng rng(1234);
  std::vector<BankEntry> entries;
  for (std::size_t i = 0; i < 1000; ++i) {
    BankEntry e;
    e.id = fmt("v%05zu", (i * 7919) % 1000);
    e.caption = synth::full_caption(synth::random_spec(rng));
    e.embedding = embed_caption(e.caption);
    entries.push_back(std::move(e));
  }
  std::size_t queries = 0, mismatches = 0;
  for (int q = 0; q < 50; ++q) {
    const std::vector<double> query =
        q % 2 ? embed_caption(synth::full_caption(synth::random_spec(rng))) : [&] {
          std::vector<double> v(kDefaultEmbedDim);
          for (auto& x : v) x = rng.normal();
          return v;
        }();
    std::vector<std::pair<double, std::string>> all;
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      double s = 0;
      for (std::size_t k = 0; k < query.size(); ++k) s += query[k] * entries[i].embedding[k];
      all.push_back({s, entries[i].id});
      pos[entries[i].id] = i;
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t k : {1, 5, 10, 50, 1000}) {
      ++queries;
      const auto got = topk_by_embedding(query, entries, k);
      bool same = got.size() == k;
      for (std::size_t r = 0; same && r < k; ++r) {
        same = got[r].id == all[r].second && got[r].index == pos[all[r].second] && got[r].score == all[r].first;
      }
      mismatches += !same;
    }
  }
  const auto q0 = embed_caption("a large red ball moves right on a gray background");
  const auto ref = topk_by_embedding(q0, entries, 5);
  std::size_t repeat_bad = 0;
  for (int r = 0; r < 10; ++r) {
    const auto again = topk_by_embedding(q0, entries, 5);
    for (std::size_t i = 0; i < 5; ++i) repeat_bad += again[i].id != ref[i].id || again[i].score != ref[i].score;
  }
  std::size_t subset_bad = 0;
  for (std::size_t n = 1; n <= 2000; ++n) {
    const std::size_t expect = (n + 19) / 20;
    const auto idx = subset_indices(n, 1.0 / 20.0, 42);
    subset_bad += subset_size(n, 1.0 / 20.0) != expect || idx.size() != expect ||
                  !std::is_sorted(idx.begin(), idx.end()) || std::set<std::size_t>(idx.begin(), idx.end()).size() != expect;
  }
  return {mismatches == 0 && repeat_bad == 0 && subset_bad == 0,
          fmt("%zu top-k queries vs brute force: %zu mismatches; 10 repeats: %zu differences; subset sizes n=1..2000: "
              "%zu off ceil(n/20)",
              queries, mismatches, repeat_bad, subset_bad)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks = {
      {"fft-oracle-equivalence", fft_oracle},   {"mask-identities", mask_identities},
      {"reference-constants", reference_constants},     {"no-op-equivalences", noop_equivalences},
      {"freeze-contract", freeze_contract},     {"gradient-correctness", gradient_check},
      {"training-sanity", training_sanity},     {"memory-utility-causality", memory_causality},
      {"steering-recovery", steering_recovery}, {"ablation-harness", ablation_harness},
      {"persistence", persistence},             {"retrieval", retrieval}};
  const std::map<std::size_t, double> budget = {{1, 30}, {5, 300}, {6, 300}, {8, 1200}};

  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  // The pretrained desk backbone is prepared once, outside the timed checks.
  if (selected.empty() || selected.count(4) || selected.count(5) || selected.count(7)) desk_model();
  std::size_t failed = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const std::size_t id = i + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = checks[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (budget.count(id) && secs > budget.at(id)) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", budget.at(id));
    }
    failed += !o.pass;
    std::printf("%s %2zu %-26s %7.1f s  %s\n", o.pass ? "PASS" : "FAIL", id, checks[i].first, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
