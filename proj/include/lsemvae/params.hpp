#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lsemvae/autodiff.hpp"

namespace lsemvae {

/// Named parameter tensors. std::map gives the sorted, deterministic
/// iteration order that checkpoints and optimizers rely on.
template <typename T>
struct ParamStore {
  std::map<std::string, Tensor<T>> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  void add(const std::string& name, Tensor<T> t);
  std::size_t num_scalars() const;
  std::vector<std::string> names() const;

  /// Same names and shapes, all zeros.
  ParamStore zeros_like() const;
  void fill_zero();

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
    return out;
  }
};

/// Lazily binds parameters from a store onto a tape. A parameter named in
/// `frozen` or absent from `grads` (every parameter, when `grads` is null)
/// gets no gradient sink.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, const ParamStore<T>& params, ParamStore<T>* grads = nullptr,
              const std::set<std::string>* frozen = nullptr)
      : tape_(tape), params_(params), grads_(grads), frozen_(frozen) {}

  Var operator()(const std::string& name);
  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& params_;
  ParamStore<T>* grads_;
  const std::set<std::string>* frozen_;
  std::map<std::string, Var> bound_;
};

/// Checkpoint: "LSCK" magic, u32 version, u32-length metadata text, u32 tensor
/// count, then per tensor in sorted-name order: u32 name length, name, u32
/// rank, u64 dims, float32 little-endian data.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParamStore<float> params;
};

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws ShapeError naming the first tensor whose presence or shape differs.
void validate_layout(const ParamStore<float>& loaded, const ParamStore<float>& expected);

/// SHA-256 hex digest over the sorted (name, shape, float bytes) of the given
/// tensors; used to prove frozen parameters were left untouched.
std::string param_digest(const ParamStore<float>& params, const std::set<std::string>& names);

extern template struct ParamStore<float>;
extern template struct ParamStore<double>;
extern template class ParamBinder<float>;
extern template class ParamBinder<double>;

}  // namespace lsemvae
