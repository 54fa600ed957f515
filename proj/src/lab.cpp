#include "ditmem/lab.hpp"

#include <cstdlib>
#include <map>
#include <numeric>
#include <stdexcept>

#include "ditmem/blob_io.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

namespace fs = std::filesystem;

Model::Model(const RunConfig& c)
    : cfg(c),
      codec(cfg.codec),
      backbone(cfg.backbone),
      encoder(cfg.encoder, codec.fingerprint()),
      schedule(build_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                              cfg.diffusion.beta_end)) {
  backbone.parameters().set_trainable(false);
  encoder.parameters().set_trainable(true);
}

fs::path default_cache_dir() {
  if (const char* env = std::getenv("DITMEM_DATA_DIR"); env && *env) return fs::path(env) / "cache";
  return fs::path("data") / "cache";
}

std::string pretrain_key(const Model& m) {
  Fnv64 h;
  h.update("ditmem-pretrain-v1");
  h.update(m.backbone.fingerprint());
  h.update(m.codec.fingerprint());
  h.update_u64(m.cfg.seed);
  h.update_u64(m.cfg.pretrain.steps);
  h.update_u64(m.cfg.pretrain.batch);
  h.update_f64(m.cfg.pretrain.lr);
  h.update_u64(m.cfg.pretrain.clips);
  h.update_u64(m.cfg.video.frames);
  h.update_u64(m.cfg.video.height);
  h.update_u64(m.cfg.video.width);
  h.update_u64(m.schedule.T);
  h.update_f64s(m.schedule.betas);
  return hex64(h.digest());
}

namespace {

PretrainReport run_pretraining(Model& m) {
  const auto& pc = m.cfg.pretrain;
  const std::uint64_t data_seed = Rng(m.cfg.seed).split("pretrain-data").next_u64();
  const auto clips = synth::make_clips(pc.clips, data_seed, "pre", m.cfg.video);
  std::vector<Tensor> x0, cond;
  for (const auto& c : clips) {
    x0.push_back(m.codec.encode(c.video).data);
    cond.push_back(m.backbone.encode_text(c.caption));
  }
  m.backbone.parameters().set_trainable(true);
  std::vector<Parameter*> params;
  for (auto& p : m.backbone.parameters().params()) params.push_back(&p);
  Adam opt(AdamConfig{.lr = pc.lr});
  PretrainReport rep;
  for (std::size_t s = 0; s < pc.steps; ++s) {
    Rng pick = Rng(m.cfg.seed).split("pretrain-batch", s);
    std::vector<const Tensor*> batch;
    std::vector<std::size_t> which;
    for (std::size_t b = 0; b < pc.batch; ++b) {
      which.push_back(static_cast<std::size_t>(pick.uniform_int(x0.size())));
      batch.push_back(&x0[which.back()]);
    }
    Rng noise = Rng(m.cfg.seed).split("pretrain-noise", s);
    const auto r = training_step(
        batch,
        [&](std::size_t i, const Tensor& xt, std::size_t t) {
          return m.backbone.forward_denoiser(xt, t, cond[which[i]], nullptr);
        },
        m.schedule, noise, params, opt);
    if (s == 0) rep.first_loss = r.loss;
    rep.last_loss = r.loss;
  }
  m.backbone.parameters().set_trainable(false);
  rep.steps = pc.steps;
  return rep;
}

}  // namespace

PretrainReport prepare_backbone(Model& m, const fs::path& cache_dir) {
  const std::string key = pretrain_key(m);
  const fs::path dir = cache_dir / ("backbone-" + key);
  PretrainReport rep;
  if (fs::exists(dir / "manifest.json")) {
    const TensorArchive a = load_archive(dir);
    if (a.meta.value("key", "") != key) throw DataError("cached backbone " + dir.string() + " has wrong key");
    m.backbone.parameters().load_archive(a);
    rep.from_cache = true;
    rep.steps = a.meta.value("steps", std::size_t{0});
    rep.first_loss = a.meta.value("first_loss", 0.0);
    rep.last_loss = a.meta.value("last_loss", 0.0);
  } else if (m.cfg.pretrain.steps > 0) {
    rep = run_pretraining(m);
    TensorArchive a = m.backbone.parameters().to_archive();
    a.meta["key"] = key;
    a.meta["steps"] = rep.steps;
    a.meta["first_loss"] = rep.first_loss;
    a.meta["last_loss"] = rep.last_loss;
    const fs::path tmp = cache_dir / ("backbone-" + key + ".tmp");
    fs::remove_all(tmp);
    save_archive(tmp, a);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
  }
  m.backbone.parameters().set_trainable(false);
  rep.archive = dir;
  return rep;
}

std::vector<synth::Clip> training_clips(const RunConfig& cfg) {
  const std::uint64_t seed = Rng(cfg.seed).split("train-data").next_u64();
  return synth::make_clips(cfg.training.dataset_size, seed, "train", cfg.video);
}

std::vector<synth::Clip> eval_clips(const RunConfig& cfg) {
  const std::uint64_t seed = Rng(cfg.seed).split("eval-data").next_u64();
  return synth::make_clips(cfg.training.eval_size, seed, "eval", cfg.video);
}

std::vector<synth::Clip> bank_clips(const RunConfig& cfg) {
  const std::uint64_t seed = Rng(cfg.seed).split("bank-data").next_u64();
  return synth::make_clips(cfg.retrieval.bank_size, seed, "bank", cfg.video);
}

std::vector<BankEntry> caption_entries(const std::vector<synth::Clip>& clips, std::size_t d_embed) {
  std::vector<BankEntry> out;
  out.reserve(clips.size());
  for (const auto& c : clips) {
    BankEntry e;
    e.id = c.id;
    e.caption = c.caption;
    e.embedding = embed_caption(c.caption, d_embed);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

TrainSet assemble(const Model& m, const std::vector<synth::Clip>& targets,
                  const std::vector<BankEntry>& entries, std::vector<Tensor> pool,
                  std::size_t top_k) {
  TrainSet set;
  set.pool = std::move(pool);
  for (const auto& e : entries) set.pool_ids.push_back(e.id);
  for (const auto& t : targets) {
    TrainItem item;
    item.id = t.id;
    item.x0 = m.codec.encode(t.video).data;
    item.cond = m.backbone.encode_text(t.caption);
    if (top_k > 0) {
      std::vector<std::size_t> view;
      for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].id != t.id) view.push_back(i);
      }
      const auto q = embed_caption(t.caption, entries.front().embedding.size());
      for (const auto& r : topk_by_embedding(q, entries, top_k, &view)) item.refs.push_back(r.index);
    }
    set.items.push_back(std::move(item));
  }
  return set;
}

}  // namespace

TrainSet build_train_set(const Model& m, const std::vector<synth::Clip>& targets,
                         const std::vector<synth::Clip>& bank, std::size_t top_k) {
  std::vector<Tensor> pool;
  for (const auto& c : bank) pool.push_back(m.codec.encode(c.video).data);
  return assemble(m, targets, caption_entries(bank, m.cfg.retrieval.d_embed), std::move(pool), top_k);
}

TrainSet build_train_set(const Model& m, const std::vector<synth::Clip>& targets,
                         const MemoryBank& bank, std::size_t top_k) {
  if (bank.manifest().codec_fingerprint != m.codec.fingerprint()) {
    throw DataError("bank was built with codec " + bank.manifest().codec_fingerprint +
                    ", active codec is " + m.codec.fingerprint());
  }
  std::vector<Tensor> pool;
  for (std::size_t i = 0; i < bank.size(); ++i) pool.push_back(bank.load_latent(i).data);
  return assemble(m, targets, bank.entries(), std::move(pool), top_k);
}

TrainSet zero_references(const TrainSet& set) {
  TrainSet out = set;
  for (auto& t : out.pool) t.fill(0.0);
  return out;
}

EncoderTrainer::EncoderTrainer(Model& model, const TrainSet& train, std::uint64_t seed)
    : model_(model),
      train_(train),
      seed_(seed),
      optimizer_(AdamConfig{.lr = model.cfg.training.lr}),
      frozen_digest_(frozen_digest(model.codec, model.backbone)) {
  if (train.items.empty()) throw std::invalid_argument("training set is empty");
  parameter_partition(model.codec, model.backbone, model.encoder);
}

Var EncoderTrainer::memory_for(const std::vector<Var>& encoded, const std::vector<std::size_t>& refs,
                               const std::vector<std::size_t>& slot) const {
  if (refs.empty()) return {};
  std::vector<Var> parts;
  for (std::size_t r : refs) parts.push_back(encoded[slot[r]]);
  return parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
}

double EncoderTrainer::step() {
  const std::size_t s = steps_done();
  const std::size_t n = train_.items.size();
  const std::size_t B = std::min(model_.cfg.training.batch, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng pick = Rng(seed_).split("batch", s);
  for (std::size_t i = 0; i < B; ++i) {
    std::swap(order[i], order[i + static_cast<std::size_t>(pick.uniform_int(n - i))]);
  }
  order.resize(B);

  std::vector<std::size_t> slot(train_.pool.size(), 0);
  std::vector<const Tensor*> latents;
  std::map<std::size_t, std::size_t> seen;
  for (std::size_t b : order)
    for (std::size_t r : train_.items[b].refs) {
      if (seen.emplace(r, latents.size()).second) {
        slot[r] = latents.size();
        latents.push_back(&train_.pool[r]);
      }
    }
  std::vector<Var> encoded;
  if (!latents.empty()) encoded = model_.encoder.forward(latents, {.training = true}).per_video;

  std::vector<const Tensor*> x0;
  std::vector<Var> mems;
  for (std::size_t b : order) {
    x0.push_back(&train_.items[b].x0);
    mems.push_back(memory_for(encoded, train_.items[b].refs, slot));
  }
  auto params = model_.encoder.trainable();
  Rng noise = Rng(seed_).split("noise", s);
  const auto res = training_step(
      x0,
      [&](std::size_t i, const Tensor& xt, std::size_t t) {
        return model_.backbone.forward_denoiser(xt, t, train_.items[order[i]].cond,
                                                mems[i].defined() ? &mems[i] : nullptr);
      },
      model_.schedule, noise, params, optimizer_);
  losses_.push_back(res.loss);
  const std::size_t every = model_.cfg.training.freeze_check_every;
  if (every > 0 && steps_done() % every == 0) check_freeze();
  return res.loss;
}

std::vector<EvalDraw> EncoderTrainer::eval_draws(const TrainSet& set, std::uint64_t seed) const {
  std::vector<const Tensor*> x0;
  for (const auto& it : set.items) x0.push_back(&it.x0);
  return make_eval_draws(x0, model_.schedule, Rng(seed).split("eval-draws"));
}

double EncoderTrainer::evaluate(const TrainSet& set, const std::vector<EvalDraw>& draws) {
  model_.encoder.parameters().set_trainable(false);
  std::vector<const Tensor*> x0;
  for (const auto& it : set.items) x0.push_back(&it.x0);
  double loss = 0.0;
  try {
    loss = evaluate_loss(
        x0, draws,
        [&](std::size_t i, const Tensor& xt, std::size_t t) {
          const auto& item = set.items[i];
          Var mem;
          if (!item.refs.empty()) {
            std::vector<const Tensor*> lat;
            for (std::size_t r : item.refs) lat.push_back(&set.pool[r]);
            const auto enc = model_.encoder.forward(lat, {.training = false});
            mem = enc.per_video.size() == 1 ? enc.per_video[0] : ag::concat_rows(enc.per_video);
          }
          return model_.backbone.forward_denoiser(xt, t, item.cond, mem.defined() ? &mem : nullptr);
        },
        model_.schedule);
  } catch (...) {
    model_.encoder.parameters().set_trainable(true);
    throw;
  }
  model_.encoder.parameters().set_trainable(true);
  return loss;
}

void EncoderTrainer::check_freeze() const {
  if (frozen_digest(model_.codec, model_.backbone) != frozen_digest_) {
    throw std::logic_error("frozen backbone/codec parameters changed during training");
  }
  const Model& m = model_;
  for (const ParameterSet* set : {&m.codec.parameters(), &m.backbone.parameters()}) {
    for (const auto& p : set->params()) {
      if (p.var.has_grad()) {
        throw std::logic_error("frozen parameter " + set->owner() + "." + p.name +
                               " accumulated a gradient");
      }
    }
  }
}

void EncoderTrainer::save_checkpoint(const fs::path& dir) const {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  save_archive(tmp / "encoder", model_.encoder.to_archive());
  save_archive(tmp / "optimizer", optimizer_.state());
  nlohmann::json st;
  st["steps"] = steps_done();
  st["seed"] = seed_;
  st["losses"] = losses_;
  st["frozen_digest"] = frozen_digest_;
  write_text_atomic(tmp / "state.json", st.dump(1) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

void EncoderTrainer::load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "state.json")) throw DataError("no checkpoint at " + dir.string());
  const auto st = nlohmann::json::parse(read_text(dir / "state.json"));
  if (st.at("frozen_digest").get<std::string>() != frozen_digest_) {
    throw DataError("checkpoint was trained against a different frozen backbone");
  }
  if (st.at("seed").get<std::uint64_t>() != seed_) throw DataError("checkpoint seed differs from run seed");
  model_.encoder.load_archive(load_archive(dir / "encoder"));
  optimizer_.load_state(load_archive(dir / "optimizer"));
  losses_ = st.at("losses").get<std::vector<double>>();
}

const std::vector<std::string>& ablation_order() {
  static const std::vector<std::string> v = {"3d", "hpf", "hpf-lpf", "spa", "sa"};
  return v;
}

RunConfig ablation_variant(const RunConfig& base, const std::string& name) {
  RunConfig c = base;
  auto set = [&](bool lpf, bool hpf, AttentionMode mode) {
    c.encoder.enable_lpf = lpf;
    c.encoder.enable_hpf = hpf;
    c.encoder.attention_mode = mode;
  };
  if (name == "3d") set(false, false, AttentionMode::kNone);
  else if (name == "hpf") set(false, true, AttentionMode::kNone);
  else if (name == "hpf-lpf") set(true, true, AttentionMode::kNone);
  else if (name == "spa") set(true, true, AttentionMode::kSeparate);
  else if (name == "sa") set(true, true, AttentionMode::kShared);
  else if (name == "no-hpf") set(true, false, AttentionMode::kShared);
  else if (name == "no-lpf") set(false, true, AttentionMode::kShared);
  else throw std::invalid_argument("unknown ablation variant '" + name +
                                   "' (expected 3d|hpf|hpf-lpf|spa|sa|no-hpf|no-lpf)");
  c.finalize();
  return c;
}

}  // namespace ditmem
