#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lsemvae/params.hpp"

namespace lsemvae {

/// Per-lead convolutional encoder geometry. Three stride-2 stages take the
/// signal from L to L/8 samples with `channels` feature maps.
struct EncoderConfig {
  std::size_t input_length = 5000;
  std::array<std::size_t, 3> channels{16, 32, 64};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t latent_dim = 256;

  std::size_t feature_length() const { return input_length / 8; }
  void validate() const;
};

struct ModelConfig {
  std::vector<std::string> leads;
  EncoderConfig encoder;
  std::size_t gate_hidden = 64;
  std::size_t fc_size = 128;
  std::size_t num_classes = 2;
  bool with_decoder = true;
  bool with_classifier = false;

  void validate() const;

  /// Round trip through checkpoint metadata.
  std::map<std::string, std::string> to_metadata() const;
  static ModelConfig from_metadata(const std::map<std::string, std::string>& meta);
};

/// Diagonal Gaussian latent expert.
struct GaussianExpert {
  std::vector<double> mu;
  std::vector<double> var;

  std::size_t dim() const { return mu.size(); }
  /// Throws DomainError unless shapes agree and every variance is finite and > 0.
  void validate() const;
};

/// Graph-level expert: mean and variance nodes, both [d].
struct ExpertVars {
  Var mu;
  Var var;
};

namespace names {
std::string encoder(const std::string& lead, const std::string& part);
inline const std::string kDecoderPrefix = "decoder.";
inline const std::string kGatePrefix = "gate.";
inline const std::string kClassifierPrefix = "classifier.";
}  // namespace names

inline constexpr double kEncoderVarMin = 1e-6;
inline constexpr double kEncoderVarMax = 1e6;

/// Kaiming-uniform fan-in initialization (bound sqrt(6 / fan_in)) for all
/// weights, zero biases. Each tensor draws from its own stream keyed by its
/// name, so the result does not depend on construction order.
template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed);

/// Fan-in used for the initialization bound of a weight tensor.
std::size_t weight_fan_in(const std::string& name, const Shape& shape);

template <typename T>
ExpertVars encoder_forward(ParamBinder<T>& p, const std::string& lead, Var signal);

template <typename T>
Var decoder_forward(ParamBinder<T>& p, Var z, std::size_t length);

/// One shared MLP applied to each expert mean; returns K logits.
template <typename T>
Var gating_forward(ParamBinder<T>& p, std::span<const Var> mus);

/// `dropout_rng` null means eval mode.
template <typename T>
Var classifier_forward(ParamBinder<T>& p, Var joint_mu, double dropout, CounterRng* dropout_rng);

// Value-level conveniences on double parameters.
GaussianExpert encoder_forward(const ParamStore<double>& params, const std::string& lead,
                               std::span<const double> signal);
std::vector<double> decoder_forward(const ParamStore<double>& params, std::span<const double> z,
                                    std::size_t length);
std::vector<double> gating_forward(const ParamStore<double>& params,
                                   const std::vector<std::vector<double>>& mus);
std::vector<double> classifier_forward(const ParamStore<double>& params, std::span<const double> joint_mu);

}  // namespace lsemvae
