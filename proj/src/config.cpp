#include "ditmem/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "ditmem/blob_io.hpp"
#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

namespace {

[[noreturn]] void bad_value(const std::string& where, const std::string& value, const char* what) {
  throw std::invalid_argument("config " + where + ": '" + value + "' is not " + what);
}

std::size_t to_size(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) bad_value(where, v, "a non-negative integer");
    return static_cast<std::size_t>(x);
  } catch (const std::logic_error&) {
    bad_value(where, v, "a non-negative integer");
  }
}

std::uint64_t to_u64(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size() || v.find('-') != std::string::npos) bad_value(where, v, "an unsigned integer");
    return x;
  } catch (const std::logic_error&) {
    bad_value(where, v, "an unsigned integer");
  }
}

double to_double(const std::string& where, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) bad_value(where, v, "a number");
    return x;
  } catch (const std::logic_error&) {
    bad_value(where, v, "a number");
  }
}

bool to_bool(const std::string& where, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(where, v, "a boolean");
}

std::vector<std::size_t> to_list(const std::string& where, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(to_size(where, item.substr(b, e - b + 1)));
  }
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt(double x) {
  std::ostringstream o;
  o.precision(17);
  o << x;
  return o.str();
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.encoder.d_model = 0;  // follows the backbone width unless set
  return c;
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& v) {
  const std::string w = section.empty() ? key : section + "." + key;
  auto unknown = [&]() -> void { throw std::invalid_argument("unknown config key '" + w + "'"); };
  if (section.empty()) {
    if (key == "seed") seed = to_u64(w, v);
    else if (key == "float_mode") {
      const auto m = to_size(w, v);
      if (m != 32 && m != 64) bad_value(w, v, "32 or 64");
      float_mode = static_cast<int>(m);
    } else unknown();
  } else if (section == "codec") {
    if (key == "mode") codec.mode = parse_codec_mode(v);
    else if (key == "seed") codec.seed = to_u64(w, v);
    else if (key == "channels") codec.channels = to_size(w, v);
    else if (key == "temporal_factor") codec.temporal_factor = to_size(w, v);
    else if (key == "spatial_factor") codec.spatial_factor = to_size(w, v);
    else if (key == "latent_scale") codec.latent_scale = to_double(w, v);
    else if (key == "frames") video.frames = to_size(w, v);
    else if (key == "height") video.height = to_size(w, v);
    else if (key == "width") video.width = to_size(w, v);
    else unknown();
  } else if (section == "backbone") {
    if (key == "n_blocks") backbone.n_blocks = to_size(w, v);
    else if (key == "d_model") backbone.d_model = to_size(w, v);
    else if (key == "n_heads") backbone.n_heads = to_size(w, v);
    else if (key == "patch") backbone.patch = to_list(w, v);
    else if (key == "cond_dim") backbone.cond_dim = to_size(w, v);
    else if (key == "mlp_ratio") backbone.mlp_ratio = to_size(w, v);
    else if (key == "vocab") backbone.vocab = to_size(w, v);
    else if (key == "freq_dim") backbone.freq_dim = to_size(w, v);
    else if (key == "seed") backbone.seed = to_u64(w, v);
    else if (key == "normalize_memory") backbone.normalize_memory = to_bool(w, v);
    else if (key == "pretrain_steps") pretrain.steps = to_size(w, v);
    else if (key == "pretrain_batch") pretrain.batch = to_size(w, v);
    else if (key == "pretrain_lr") pretrain.lr = to_double(w, v);
    else if (key == "pretrain_clips") pretrain.clips = to_size(w, v);
    else unknown();
  } else if (section == "encoder") {
    if (key == "block_channels") encoder.block_channels = to_list(w, v);
    else if (key == "kernel") encoder.kernel = to_size(w, v);
    else if (key == "pool") encoder.pool = to_size(w, v);
    else if (key == "tokens_per_branch") encoder.tokens_per_branch = to_size(w, v);
    else if (key == "d_model") encoder.d_model = to_size(w, v);
    else if (key == "n_heads") encoder.n_heads = to_size(w, v);
    else if (key == "mlp_ratio") encoder.mlp_ratio = to_size(w, v);
    else if (key == "branch_weight_sharing") encoder.branch_weight_sharing = to_bool(w, v);
    else if (key == "attention_mode") encoder.attention_mode = parse_attention_mode(v);
    else if (key == "enable_lpf") encoder.enable_lpf = to_bool(w, v);
    else if (key == "enable_hpf") encoder.enable_hpf = to_bool(w, v);
    else if (key == "seed") encoder.seed = to_u64(w, v);
    else if (key == "bn_momentum") encoder.bn_momentum = to_double(w, v);
    else if (key == "bn_eps") encoder.bn_eps = to_double(w, v);
    else unknown();
  } else if (section == "filters") {
    if (key == "cutoff_rho") filters.cutoff_rho = to_double(w, v);
    else if (key == "attenuation_gamma") filters.attenuation_gamma = to_double(w, v);
    else unknown();
  } else if (section == "diffusion") {
    if (key == "timesteps") diffusion.timesteps = to_size(w, v);
    else if (key == "beta_start") diffusion.beta_start = to_double(w, v);
    else if (key == "beta_end") diffusion.beta_end = to_double(w, v);
    else if (key == "sampler_steps") diffusion.sampler_steps = to_size(w, v);
    else unknown();
  } else if (section == "training") {
    if (key == "steps") training.steps = to_size(w, v);
    else if (key == "batch") training.batch = to_size(w, v);
    else if (key == "lr") training.lr = to_double(w, v);
    else if (key == "dataset_size") training.dataset_size = to_size(w, v);
    else if (key == "eval_size") training.eval_size = to_size(w, v);
    else if (key == "freeze_check_every") training.freeze_check_every = to_size(w, v);
    else if (key == "checkpoint_every") training.checkpoint_every = to_size(w, v);
    else unknown();
  } else if (section == "retrieval") {
    if (key == "top_k") retrieval.top_k = to_size(w, v);
    else if (key == "d_embed") retrieval.d_embed = to_size(w, v);
    else if (key == "bank_size") retrieval.bank_size = to_size(w, v);
    else if (key == "bank_dir") retrieval.bank_dir = v;
    else unknown();
  } else if (section == "steering") {
    if (key == "alpha") steering.alpha = to_double(w, v);
    else if (key == "band") {
      freq::parse_band(v);
      steering.band = v;
    } else if (key == "layers") steering.layers = to_list(w, v);
    else if (key == "runs_per_side") steering.runs_per_side = to_size(w, v);
    else unknown();
  } else if (section == "output") {
    if (key == "dir") output.dir = v;
    else if (key == "png") output.png = to_bool(w, v);
    else unknown();
  } else {
    throw std::invalid_argument("unknown config section '" + section + "'");
  }
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override '" + assignment + "' must look like section.key=value");
  }
  const std::string lhs = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  const auto dot = lhs.find('.');
  if (dot == std::string::npos) set("", lhs, value);
  else set(lhs.substr(0, dot), lhs.substr(dot + 1), value);
}

RunConfig RunConfig::from_ini_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw DataError(std::string("config parse error: ") + e.what());
  }
  RunConfig c = defaults();
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      c.set("", name, node.data());
    } else {
      for (const auto& [key, leaf] : node) c.set(name, key, leaf.data());
    }
  }
  c.finalize();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("config file not found: " + path.string());
  return from_ini_text(read_text(path));
}

void RunConfig::finalize() {
  if (encoder.d_model == 0) encoder.d_model = backbone.d_model;
  if (encoder.d_model != backbone.d_model) {
    throw std::invalid_argument("encoder.d_model (" + std::to_string(encoder.d_model) +
                                ") must equal backbone.d_model (" +
                                std::to_string(backbone.d_model) + ")");
  }
  if (codec.temporal_factor == 0 || codec.spatial_factor == 0 ||
      video.frames % codec.temporal_factor || video.height % codec.spatial_factor ||
      video.width % codec.spatial_factor) {
    throw std::invalid_argument("video dims must be divisible by the codec factors");
  }
  const LatentCodec probe(codec);
  encoder.in_channels = probe.latent_channels();
  backbone.in_channels = probe.latent_channels();
  encoder.latent_dhw = {video.frames / codec.temporal_factor, video.height / codec.spatial_factor,
                        video.width / codec.spatial_factor};
  encoder.cutoff_rho = filters.cutoff_rho;
  encoder.attenuation_gamma = filters.attenuation_gamma;
  freq::build_mask({1}, freq::Band::kLow, filters.cutoff_rho, filters.attenuation_gamma);
  backbone.validate();
  encoder.validate();
  token_count(encoder.latent_dhw, backbone.patch);
  if (retrieval.top_k == 0) throw std::invalid_argument("retrieval.top_k must be >= 1");
  if (training.batch == 0) throw std::invalid_argument("training.batch must be >= 1");
}

std::string RunConfig::to_ini() const {
  std::ostringstream o;
  o << "seed = " << seed << "\n";
  o << "float_mode = " << float_mode << "\n\n";
  o << "[codec]\nmode = " << (codec.mode == CodecMode::kConv ? "conv" : "identity")
    << "\nseed = " << codec.seed << "\nchannels = " << codec.channels
    << "\ntemporal_factor = " << codec.temporal_factor << "\nspatial_factor = " << codec.spatial_factor
    << "\nlatent_scale = " << fmt(codec.latent_scale) << "\nframes = " << video.frames
    << "\nheight = " << video.height << "\nwidth = " << video.width << "\n\n";
  o << "[backbone]\nn_blocks = " << backbone.n_blocks << "\nd_model = " << backbone.d_model
    << "\nn_heads = " << backbone.n_heads << "\npatch = " << join(backbone.patch)
    << "\ncond_dim = " << backbone.cond_dim << "\nmlp_ratio = " << backbone.mlp_ratio
    << "\nvocab = " << backbone.vocab << "\nfreq_dim = " << backbone.freq_dim
    << "\nseed = " << backbone.seed
    << "\nnormalize_memory = " << (backbone.normalize_memory ? "true" : "false")
    << "\npretrain_steps = " << pretrain.steps
    << "\npretrain_batch = " << pretrain.batch << "\npretrain_lr = " << fmt(pretrain.lr)
    << "\npretrain_clips = " << pretrain.clips << "\n\n";
  o << "[encoder]\nblock_channels = " << join(encoder.block_channels) << "\nkernel = " << encoder.kernel
    << "\npool = " << encoder.pool << "\ntokens_per_branch = " << encoder.tokens_per_branch
    << "\nd_model = " << encoder.d_model << "\nn_heads = " << encoder.n_heads
    << "\nmlp_ratio = " << encoder.mlp_ratio
    << "\nbranch_weight_sharing = " << (encoder.branch_weight_sharing ? "true" : "false")
    << "\nattention_mode = " << attention_mode_name(encoder.attention_mode)
    << "\nenable_lpf = " << (encoder.enable_lpf ? "true" : "false")
    << "\nenable_hpf = " << (encoder.enable_hpf ? "true" : "false") << "\nseed = " << encoder.seed
    << "\nbn_momentum = " << fmt(encoder.bn_momentum) << "\nbn_eps = " << fmt(encoder.bn_eps) << "\n\n";
  o << "[filters]\ncutoff_rho = " << fmt(filters.cutoff_rho)
    << "\nattenuation_gamma = " << fmt(filters.attenuation_gamma) << "\n\n";
  o << "[diffusion]\ntimesteps = " << diffusion.timesteps << "\nbeta_start = " << fmt(diffusion.beta_start)
    << "\nbeta_end = " << fmt(diffusion.beta_end) << "\nsampler_steps = " << diffusion.sampler_steps
    << "\n\n";
  o << "[training]\nsteps = " << training.steps << "\nbatch = " << training.batch
    << "\nlr = " << fmt(training.lr) << "\ndataset_size = " << training.dataset_size
    << "\neval_size = " << training.eval_size << "\nfreeze_check_every = " << training.freeze_check_every
    << "\ncheckpoint_every = " << training.checkpoint_every << "\n\n";
  o << "[retrieval]\ntop_k = " << retrieval.top_k << "\nd_embed = " << retrieval.d_embed
    << "\nbank_size = " << retrieval.bank_size << "\nbank_dir = " << retrieval.bank_dir << "\n\n";
  o << "[steering]\nalpha = " << fmt(steering.alpha) << "\nband = " << steering.band
    << "\nlayers = " << join(steering.layers) << "\nruns_per_side = " << steering.runs_per_side
    << "\n\n";
  o << "[output]\ndir = " << output.dir << "\npng = " << (output.png ? "true" : "false") << "\n";
  return o.str();
}

std::string RunConfig::hash() const {
  Fnv64 h;
  h.update(to_ini());
  return hex64(h.digest());
}

std::filesystem::path RunConfig::bank_root() const {
  if (!retrieval.bank_dir.empty()) return retrieval.bank_dir;
  if (const char* env = std::getenv("DITMEM_DATA_DIR"); env && *env) {
    return std::filesystem::path(env) / "bank";
  }
  return std::filesystem::path("data") / "bank";
}

}  // namespace ditmem
