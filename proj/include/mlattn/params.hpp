#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mlattn/autodiff.hpp"

namespace mlattn {

struct Parameter {
  ad::Var var;
  Tensor m;  // Adam first moment
  Tensor v;  // Adam second moment
  std::int64_t step = 0;
  bool frozen = false;
};

// Named trainable parameters plus non-trainable buffers (batchnorm running
// statistics). Iteration order is lexicographic by name.
class ParamStore {
 public:
  ad::Var add(const std::string& name, Tensor init);
  Tensor& add_buffer(const std::string& name, Tensor init);

  bool contains(const std::string& name) const { return params_.contains(name); }
  bool contains_buffer(const std::string& name) const { return buffers_.contains(name); }
  ad::Var get(const std::string& name) const;
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;

  const std::map<std::string, Parameter>& params() const { return params_; }
  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Tensor>& buffers() const { return buffers_; }
  std::map<std::string, Tensor>& buffers() { return buffers_; }

  void zero_grad();
  // Freezes every parameter whose name starts with one of `prefixes`.
  // Returns the number of parameters frozen.
  std::size_t freeze(const std::vector<std::string>& prefixes);
  std::size_t num_scalars() const;
  // Deep copy with fresh graph leaves.
  ParamStore clone() const;

 private:
  std::map<std::string, Parameter> params_;
  std::map<std::string, Tensor> buffers_;
};

// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of every non-frozen parameter using the
// gradients currently accumulated on the parameter leaves.
void adam_step(ParamStore& store, const AdamOptions& opt);
// Same update with explicitly supplied gradients, one per parameter name.
void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, const AdamOptions& opt);

enum class LoadMode {
  strict,  // file and store must hold exactly the same entries
  subset,  // load entries present in both; shapes must still agree
};

struct LoadReport {
  std::string metadata;
  std::size_t loaded = 0;
  std::vector<std::string> skipped;  // in file but not in store (subset mode)
};

// Weight file: "MLAW1" magic, metadata string, entry headers
// (name, kind, dtype, shape), then little-endian raw buffers.
void save_weights(const ParamStore& store, const std::filesystem::path& path, const std::string& metadata = {});
LoadReport load_weights(ParamStore& store, const std::filesystem::path& path, LoadMode mode = LoadMode::strict);
std::string read_weights_metadata(const std::filesystem::path& path);

}  // namespace mlattn
