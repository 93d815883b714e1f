#pragma once

// Diagonal-Gaussian policy: a tanh MLP produces the action mean, and a
// state-independent log standard deviation is a free parameter.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "metadapt/autodiff.hpp"
#include "metadapt/error.hpp"
#include "metadapt/rng.hpp"

namespace metadapt {

struct TensorSpec {
  std::string name;
  ad::Shape shape;
  bool operator==(const TensorSpec&) const = default;
};

using Manifest = std::vector<TensorSpec>;

struct PolicyArchitecture {
  std::size_t obs_dim = 1;
  std::size_t action_dim = 1;
  std::vector<std::size_t> hidden_sizes{32, 32};

  void validate() const {
    if (obs_dim < 1 || action_dim < 1) throw Error("policy dimensions must be >= 1");
    for (std::size_t h : hidden_sizes)
      if (h < 1) throw Error("hidden layer sizes must be >= 1");
  }

  // Tensors in flattening order: (weight, bias) per layer, then log_std.
  // Weights are fan_in x fan_out so a batch of row observations multiplies
  // from the left.
  [[nodiscard]] Manifest manifest() const {
    Manifest m;
    std::size_t fan_in = obs_dim;
    for (std::size_t i = 0; i < hidden_sizes.size(); ++i) {
      const std::string prefix = "hidden" + std::to_string(i);
      m.push_back({prefix + ".weight", {fan_in, hidden_sizes[i]}});
      m.push_back({prefix + ".bias", {1, hidden_sizes[i]}});
      fan_in = hidden_sizes[i];
    }
    m.push_back({"output.weight", {fan_in, action_dim}});
    m.push_back({"output.bias", {1, action_dim}});
    m.push_back({"log_std", {1, action_dim}});
    return m;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : manifest()) n += t.shape.size();
    return n;
  }

  [[nodiscard]] std::size_t layer_count() const { return hidden_sizes.size() + 1; }

  bool operator==(const PolicyArchitecture&) const = default;
};

// θ: one array per manifest entry.
struct PolicyParams {
  PolicyArchitecture arch;
  std::vector<ad::Array> tensors;

  [[nodiscard]] Manifest manifest() const { return arch.manifest(); }

  [[nodiscard]] std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(arch.parameter_count());
    for (const auto& t : tensors) flat.insert(flat.end(), t.data.begin(), t.data.end());
    return flat;
  }

  static PolicyParams unflatten(const PolicyArchitecture& arch, std::span<const double> flat) {
    if (flat.size() != arch.parameter_count()) {
      throw ShapeError("flat parameter vector has " + std::to_string(flat.size()) + " entries, expected " +
                       std::to_string(arch.parameter_count()));
    }
    PolicyParams p{arch, {}};
    std::size_t offset = 0;
    for (const auto& spec : arch.manifest()) {
      std::vector<double> values(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                 flat.begin() + static_cast<std::ptrdiff_t>(offset + spec.shape.size()));
      p.tensors.emplace_back(spec.shape, std::move(values));
      offset += spec.shape.size();
    }
    return p;
  }

  [[nodiscard]] const ad::Array& log_std() const { return tensors.back(); }
  [[nodiscard]] const ad::Array& weight(std::size_t layer) const { return tensors[2 * layer]; }
  [[nodiscard]] const ad::Array& bias(std::size_t layer) const { return tensors[2 * layer + 1]; }
};

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, log_std constant.
inline PolicyParams init_params(const PolicyArchitecture& arch, RngStream& rng, double log_std_init = -0.5) {
  arch.validate();
  PolicyParams p{arch, {}};
  for (const auto& spec : arch.manifest()) {
    ad::Array t(spec.shape);
    if (spec.name.ends_with(".weight")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.shape.rows));
      for (double& v : t.data) v = rng.uniform(-bound, bound);
    } else if (spec.name == "log_std") {
      for (double& v : t.data) v = log_std_init;
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

inline PolicyParams init_params(std::size_t obs_dim, std::size_t action_dim, std::vector<std::size_t> hidden,
                                RngStream& rng) {
  return init_params(PolicyArchitecture{obs_dim, action_dim, std::move(hidden)}, rng);
}

// Numeric forward pass of the mean network for a batch (rows = observations).
inline ad::Array policy_mean(const PolicyParams& params, const ad::Array& observations) {
  if (observations.cols() != params.arch.obs_dim) {
    throw ShapeError("observation width " + std::to_string(observations.cols()) + " != obs_dim " +
                     std::to_string(params.arch.obs_dim));
  }
  ad::Array h = observations;
  const std::size_t layers = params.arch.layer_count();
  for (std::size_t l = 0; l < layers; ++l) {
    ad::Array z = ad::kernels::matmul(h, params.weight(l));
    const ad::Array& b = params.bias(l);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += b.data[j];
    if (l + 1 < layers) z = ad::kernels::tanh(z);
    h = std::move(z);
  }
  return h;
}

struct ActionDistribution {
  std::vector<double> mean;
  std::vector<double> std;
};

inline ActionDistribution action_distribution(const PolicyParams& params, std::span<const double> obs) {
  if (obs.size() != params.arch.obs_dim) throw ShapeError("observation size does not match obs_dim");
  const ad::Array mu = policy_mean(params, ad::Array::row(std::vector<double>(obs.begin(), obs.end())));
  ActionDistribution d;
  d.mean = mu.data;
  for (double ls : params.log_std().data) d.std.push_back(std::exp(ls));
  return d;
}

// a = mean + std * eps, eps ~ N(0, I). The action is returned unclipped.
inline std::vector<double> sample_action(const ActionDistribution& dist, RngStream& rng) {
  std::vector<double> a(dist.mean.size());
  for (std::size_t j = 0; j < a.size(); ++j) a[j] = dist.mean[j] + dist.std[j] * rng.normal();
  return a;
}

// Graph-side Gaussian policy.
class GaussianPolicy {
 public:
  explicit GaussianPolicy(PolicyArchitecture arch) : arch_(std::move(arch)) { arch_.validate(); }

  [[nodiscard]] const PolicyArchitecture& architecture() const { return arch_; }

  // One parameter node per manifest entry.
  std::vector<ad::Node> declare_parameters(ad::Graph& g) const {
    std::vector<ad::Node> out;
    for (const auto& spec : arch_.manifest()) out.push_back(g.parameter(spec.shape, spec.name));
    return out;
  }

  static ad::Bindings bind(std::span<const ad::Node> nodes, const PolicyParams& params) {
    ad::Bindings b;
    for (std::size_t i = 0; i < nodes.size(); ++i) b.bind(nodes[i], params.tensors[i]);
    return b;
  }

  [[nodiscard]] ad::Node mean(std::span<const ad::Node> params, ad::Node observations) const {
    ad::Node h = observations;
    const std::size_t layers = arch_.layer_count();
    for (std::size_t l = 0; l < layers; ++l) {
      h = ad::matmul(h, params[2 * l]) + params[2 * l + 1];
      if (l + 1 < layers) h = ad::tanh(h);
    }
    return h;
  }

  // log pi(a_r | s_r) for each row r, as an m x 1 column.
  [[nodiscard]] ad::Node log_prob_column(std::span<const ad::Node> params, const ad::Array& observations,
                                         const ad::Array& actions) const {
    if (observations.rows() != actions.rows() || actions.cols() != arch_.action_dim) {
      throw ShapeError("observation/action batch shapes do not match the policy");
    }
    ad::Graph& g = *params.front().graph;
    const ad::Node mu = mean(params, g.constant(observations));
    const ad::Node log_std = params.back();
    const ad::Node z = (g.constant(actions) - mu) * ad::exp(-log_std);
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    const ad::Node per_dim = -0.5 * ad::square(z) - (log_std + half_log_2pi);
    return ad::sum_cols(per_dim);
  }

  // Scalar log-density of a single (obs, action) pair.
  [[nodiscard]] ad::Node log_prob(std::span<const ad::Node> params, std::span<const double> obs,
                                  std::span<const double> action) const {
    if (obs.size() != arch_.obs_dim || action.size() != arch_.action_dim) {
      throw ShapeError("log_prob shape mismatch");
    }
    const ad::Node column = log_prob_column(params, ad::Array::row({obs.begin(), obs.end()}),
                                            ad::Array::row({action.begin(), action.end()}));
    return ad::sum(column);
  }

 private:
  PolicyArchitecture arch_;
};

}  // namespace metadapt
