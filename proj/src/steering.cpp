#include "ditmem/steering.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "ditmem/errors.hpp"

namespace ditmem {

std::vector<std::size_t> SteeringTable::timesteps() const {
  std::set<std::size_t> s;
  for (const auto& [k, v] : vectors) s.insert(k.first);
  return {s.begin(), s.end()};
}

std::vector<std::size_t> SteeringTable::layers() const {
  std::set<std::size_t> s;
  for (const auto& [k, v] : vectors) s.insert(k.second);
  return {s.begin(), s.end()};
}

Trace capture_run(const RunSpec& run, const CaptureSetup& setup) {
  if (!setup.backbone || !setup.schedule) throw std::invalid_argument("capture setup incomplete");
  Trace trace;
  SamplerPlan plan = make_plan(*setup.schedule, setup.steps);
  plan.capture = [&](std::size_t, std::size_t t, std::size_t layer, const Tensor& out) {
    const std::size_t n = out.dim(0), d = out.dim(1);
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += out.at(r, c);
    for (auto& m : mean) m /= static_cast<double>(n);
    trace[{t, layer}] = std::move(mean);
  };
  sample(plan, *setup.backbone, *setup.schedule, setup.backbone->encode_text(run.caption),
         setup.latent_shape, run.seed);
  return trace;
}

std::pair<std::vector<Trace>, std::vector<Trace>> capture_runs(const std::vector<RunSpec>& pos,
                                                               const std::vector<RunSpec>& neg,
                                                               const CaptureSetup& pos_setup,
                                                               const CaptureSetup& neg_setup) {
  if (!(pos_setup == neg_setup)) {
    throw std::invalid_argument("positive and negative runs must share one sampler configuration");
  }
  std::pair<std::vector<Trace>, std::vector<Trace>> out;
  for (const auto& r : pos) out.first.push_back(capture_run(r, pos_setup));
  for (const auto& r : neg) out.second.push_back(capture_run(r, neg_setup));
  return out;
}

namespace {

Trace mean_trace(const std::vector<Trace>& runs) {
  Trace acc;
  for (const auto& [k, v] : runs.front()) acc[k] = std::vector<double>(v.size(), 0.0);
  for (const auto& run : runs) {
    if (run.size() != acc.size()) throw DataError("steering traces cover different (t, layer) grids");
    for (const auto& [k, v] : run) {
      auto it = acc.find(k);
      if (it == acc.end() || it->second.size() != v.size()) {
        throw DataError("steering traces cover different (t, layer) grids");
      }
      for (std::size_t i = 0; i < v.size(); ++i) it->second[i] += v[i];
    }
  }
  for (auto& [k, v] : acc)
    for (auto& x : v) x /= static_cast<double>(runs.size());
  return acc;
}

}  // namespace

SteeringTable compute_steering(const std::vector<Trace>& pos, const std::vector<Trace>& neg) {
  if (pos.empty() || neg.empty()) throw std::invalid_argument("steering needs runs on both sides");
  const Trace mp = mean_trace(pos), mn = mean_trace(neg);
  if (mp.size() != mn.size()) throw DataError("positive and negative traces use different grids");
  SteeringTable table;
  table.n_pos = pos.size();
  table.n_neg = neg.size();
  for (const auto& [k, v] : mp) {
    auto it = mn.find(k);
    if (it == mn.end() || it->second.size() != v.size()) {
      throw DataError("positive and negative traces use different grids");
    }
    std::vector<double> s(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) s[i] = v[i] - it->second[i];
    table.vectors.emplace(k, std::move(s));
  }
  return table;
}

SteeringTable filter_table(const SteeringTable& table, freq::Band band, double cutoff_rho,
                           double attenuation_gamma) {
  if (table.filtered) throw std::invalid_argument("steering table is already filtered");
  SteeringTable out = table;
  const auto ts = table.timesteps();
  const std::size_t d = table.width();
  if (ts.empty()) throw DataError("steering table is empty");
  const auto mask = freq::build_mask({ts.size()}, band, cutoff_rho, attenuation_gamma);
  for (std::size_t layer : table.layers()) {
    Tensor seq({ts.size(), d});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto it = table.vectors.find({ts[i], layer});
      if (it == table.vectors.end()) {
        throw DataError("layer " + std::to_string(layer) + " lacks timestep " + std::to_string(ts[i]));
      }
      std::copy(it->second.begin(), it->second.end(), seq.ptr() + i * d);
    }
    // FFT round-off leaves residue of order eps * |input| in fully attenuated
    // bins; anything below this floor is treated as exactly zero.
    const double floor = kSteeringZeroTolerance * std::max(seq.max_abs(), 1e-300) *
                         std::sqrt(static_cast<double>(seq.numel()));
    const Tensor filtered = freq::apply_filter(seq, mask, false);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      std::vector<double> v(filtered.ptr() + i * d, filtered.ptr() + (i + 1) * d);
      double n2 = 0.0;
      for (double x : v) n2 += x * x;
      if (std::sqrt(n2) <= floor) std::fill(v.begin(), v.end(), 0.0);
      out.vectors[{ts[i], layer}] = std::move(v);
    }
  }
  out.filtered = true;
  out.band = band;
  return out;
}

SteeringTable normalize_table(const SteeringTable& table) {
  SteeringTable out = table;
  out.zero_vectors = 0;
  for (auto& [k, v] : out.vectors) {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (double& x : v) x *= inv;
    } else {
      ++out.zero_vectors;
    }
  }
  out.normalized = true;
  return out;
}

SteeringTable filter_and_normalize(const SteeringTable& table, freq::Band band, double cutoff_rho,
                                   double attenuation_gamma) {
  return normalize_table(filter_table(table, band, cutoff_rho, attenuation_gamma));
}

InjectionHook make_injection_hook(const SteeringTable& table, double alpha, std::size_t d_model,
                                  const std::vector<std::size_t>& layers) {
  if (!table.normalized) throw std::invalid_argument("injection needs a normalized steering table");
  if (table.width() != d_model) {
    throw std::invalid_argument("steering width " + std::to_string(table.width()) +
                                " does not match d_model " + std::to_string(d_model));
  }
  const auto all_layers = table.layers();
  const std::size_t n_layers = all_layers.empty() ? 0 : all_layers.back() + 1;
  std::set<std::size_t> active(layers.begin(), layers.end());
  if (active.empty()) active.insert(all_layers.begin(), all_layers.end());
  auto vectors = std::make_shared<Trace>(table.vectors);
  return [vectors, alpha, n_layers, active](std::size_t t) {
    std::vector<std::vector<double>> out(n_layers);
    for (std::size_t l : active) {
      auto it = vectors->find({t, l});
      if (it == vectors->end()) {
        throw DataError("steering table has no vector for timestep " + std::to_string(t) +
                        ", layer " + std::to_string(l));
      }
      out[l] = it->second;
      for (double& x : out[l]) x *= alpha;
    }
    return out;
  };
}

TensorArchive steering_to_archive(const SteeringTable& table) {
  TensorArchive a;
  const auto ts = table.timesteps();
  const std::size_t d = table.width();
  for (std::size_t layer : table.layers()) {
    Tensor seq({ts.size(), d});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const auto& v = table.vectors.at({ts[i], layer});
      std::copy(v.begin(), v.end(), &seq.at(i, 0));
    }
    a.tensors.emplace("layer" + std::to_string(layer), std::move(seq));
  }
  a.meta["kind"] = "steering-table";
  a.meta["timesteps"] = ts;
  a.meta["layers"] = table.layers();
  a.meta["d"] = d;
  a.meta["filtered"] = table.filtered;
  a.meta["normalized"] = table.normalized;
  a.meta["band"] = table.band ? std::string(freq::band_name(*table.band)) : std::string("none");
  a.meta["n_pos"] = table.n_pos;
  a.meta["n_neg"] = table.n_neg;
  a.meta["zero_vectors"] = table.zero_vectors;
  return a;
}

SteeringTable steering_from_archive(const TensorArchive& a) {
  if (a.meta.value("kind", "") != "steering-table") throw DataError("archive is not a steering table");
  SteeringTable t;
  const auto ts = a.meta.at("timesteps").get<std::vector<std::size_t>>();
  const auto layers = a.meta.at("layers").get<std::vector<std::size_t>>();
  const auto d = a.meta.at("d").get<std::size_t>();
  for (std::size_t layer : layers) {
    auto it = a.tensors.find("layer" + std::to_string(layer));
    if (it == a.tensors.end() || it->second.shape() != Shape{ts.size(), d}) {
      throw DataError("steering archive lacks layer " + std::to_string(layer));
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
      t.vectors[{ts[i], layer}] =
          std::vector<double>(it->second.ptr() + i * d, it->second.ptr() + (i + 1) * d);
    }
  }
  t.filtered = a.meta.at("filtered").get<bool>();
  t.normalized = a.meta.at("normalized").get<bool>();
  const auto band = a.meta.at("band").get<std::string>();
  if (band != "none") t.band = freq::parse_band(band);
  t.n_pos = a.meta.at("n_pos").get<std::size_t>();
  t.n_neg = a.meta.at("n_neg").get<std::size_t>();
  t.zero_vectors = a.meta.value("zero_vectors", std::size_t{0});
  return t;
}

}  // namespace ditmem
