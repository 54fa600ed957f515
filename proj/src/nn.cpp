#include "ditmem/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

const Var& ParameterSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_[name] = params_.size();
  params_.push_back({name, Var::leaf(std::move(init), false)});
  return params_.back().var;
}

const Var& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range(owner_ + ": no parameter " + name);
  return params_[it->second].var;
}

void ParameterSet::set_trainable(bool on) {
  for (auto& p : params_) p.var.set_requires_grad(on);
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) {
    if (p.var.has_grad()) p.var.zero_grad();
  }
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().numel();
  return n;
}

void ParameterSet::hash_into(Fnv64& h) const {
  for (const auto& p : params_) {
    h.update(p.name);
    for (auto d : p.var.shape()) h.update_u64(d);
    h.update_f64s(p.var.value().data());
  }
}

void ParameterSet::sha256_into(Sha256& h) const {
  for (const auto& p : params_) {
    h.update(p.name);
    h.update_f64s(p.var.value().data());
  }
}

TensorArchive ParameterSet::to_archive() const {
  TensorArchive a;
  for (const auto& p : params_) a.tensors.emplace(p.name, p.var.value());
  a.meta["owner"] = owner_;
  return a;
}

void ParameterSet::load_archive(const TensorArchive& archive) {
  for (auto& p : params_) {
    auto it = archive.tensors.find(p.name);
    if (it == archive.tensors.end()) throw DataError(owner_ + ": archive lacks parameter " + p.name);
    if (it->second.shape() != p.var.shape()) {
      throw DataError(owner_ + ": parameter " + p.name + " has shape " +
                      shape_to_string(it->second.shape()) + ", expected " +
                      shape_to_string(p.var.shape()));
    }
    p.var.mutable_value() = it->second;
  }
}

Tensor normal_init(const Shape& shape, double std, Rng& rng) {
  Tensor t(shape);
  rng.fill_normal(t.data());
  t *= std;
  return t;
}

Tensor DenseInit::weight(std::size_t in, std::size_t out, Rng& rng, double gain) {
  return normal_init({in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
}

void Adam::step(std::vector<Parameter*>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : params) {
    if (!p->var.requires_grad() || !p->var.has_grad()) continue;
    const Tensor& g = p->var.grad();
    Tensor& w = p->var.mutable_value();
    auto [mit, m_new] = m_.try_emplace(p->name, w.shape());
    auto [vit, v_new] = v_.try_emplace(p->name, w.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

TensorArchive Adam::state() const {
  TensorArchive a;
  for (const auto& [name, t] : m_) a.tensors.emplace("m/" + name, t);
  for (const auto& [name, t] : v_) a.tensors.emplace("v/" + name, t);
  a.meta["step"] = t_;
  return a;
}

void Adam::load_state(const TensorArchive& archive) {
  m_.clear();
  v_.clear();
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind("m/", 0) == 0) m_.emplace(name.substr(2), t);
    else if (name.rfind("v/", 0) == 0) v_.emplace(name.substr(2), t);
  }
  t_ = archive.meta.value("step", std::uint64_t{0});
}

std::vector<double> sinusoidal_embedding(double position, std::size_t dim, double max_period) {
  std::vector<double> out(dim, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::cos(position * freq);
    out[half + i] = std::sin(position * freq);
  }
  return out;
}

}  // namespace ditmem
