#pragma once

#include <map>
#include <string>
#include <vector>

#include "ditmem/autograd.hpp"
#include "ditmem/blob_io.hpp"
#include "ditmem/hashing.hpp"
#include "ditmem/rng.hpp"

namespace ditmem {

struct Parameter {
  std::string name;
  Var var;
};

// Ordered collection of named parameters belonging to one module.
class ParameterSet {
 public:
  explicit ParameterSet(std::string owner) : owner_(std::move(owner)) {}

  const std::string& owner() const { return owner_; }

  const Var& add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  void set_trainable(bool on);
  void zero_grad();
  std::size_t scalar_count() const;

  void hash_into(Fnv64& h) const;
  void sha256_into(Sha256& h) const;

  TensorArchive to_archive() const;
  // Replaces values by name; every parameter must be present with the same shape.
  void load_archive(const TensorArchive& archive);

 private:
  std::string owner_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// N(0, std^2) initialisation.
Tensor normal_init(const Shape& shape, double std, Rng& rng);

// Dense layer weights stored [in, out].
struct DenseInit {
  static Tensor weight(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Updates every parameter that requires gradients and holds one.
  void step(std::vector<Parameter*>& params);

  std::uint64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  TensorArchive state() const;
  void load_state(const TensorArchive& archive);

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// Sinusoidal embedding of a scalar position into `dim` features.
std::vector<double> sinusoidal_embedding(double position, std::size_t dim,
                                         double max_period = 10000.0);

}  // namespace ditmem
