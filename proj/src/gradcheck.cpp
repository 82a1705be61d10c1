#include "lsemvae/gradcheck.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>

namespace lsemvae {

namespace {

struct Eval {
  double loss;
  std::uint64_t pattern;
};

Eval evaluate(const LossBuilder& build, const ParamStore<double>& params) {
  Tape<double> tape;
  ParamBinder<double> binder(tape, params);
  const Var loss = build(binder);
  if (tape.size(loss) != 1) throw ContractError("gradient check needs a scalar loss");
  return {tape.value(loss)[0], tape.activation_pattern()};
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& build, const ParamStore<double>& params,
                                  const GradCheckOptions& options) {
  ParamStore<double> grads = params.zeros_like();
  std::uint64_t base_pattern = 0;
  {
    Tape<double> tape;
    ParamBinder<double> binder(tape, params, &grads);
    const Var loss = build(binder);
    tape.backward(loss);
    base_pattern = tape.activation_pattern();
  }

  GradCheckResult result;
  ParamStore<double> probe = params;
  CounterRng rng(options.seed);
  for (auto& [name, tensor] : probe.tensors) {
    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.coords_per_tensor > 0 && coords.size() > options.coords_per_tensor) {
      CounterRng stream = rng.fork(fnv1a(name));
      stream.shuffle(coords);
      coords.resize(options.coords_per_tensor);
    }
    const auto& analytic = grads.at(name);
    for (std::size_t i : coords) {
      const double original = tensor[i];
      tensor[i] = original + options.h;
      const Eval plus = evaluate(build, probe);
      tensor[i] = original - options.h;
      const Eval minus = evaluate(build, probe);
      tensor[i] = original;
      if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
        ++result.skipped_kinks;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * options.h);
      // Rounding in the two loss values alone moves the difference quotient by about this much.
      const double floor = 16.0 * DBL_EPSILON * std::max({std::abs(plus.loss), std::abs(minus.loss), 1.0}) / (2.0 * options.h);
      if (std::abs(analytic[i]) <= floor && std::abs(numeric) <= floor) {
        ++result.below_noise;
        continue;
      }
      const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
      ++result.checked;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.worst_param = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace lsemvae
