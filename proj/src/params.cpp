#include "lsemvae/params.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <sstream>

#include "binary_io.hpp"

namespace lsemvae {

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> t) {
  if (!tensors.emplace(name, std::move(t)).second) {
    throw ContractError("duplicate parameter '" + name + "'");
  }
}

template <typename T>
std::size_t ParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [k, v] : tensors) n += v.size();
  return n;
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : tensors) out.push_back(k);
  return out;
}

template <typename T>
ParamStore<T> ParamStore<T>::zeros_like() const {
  ParamStore out;
  for (const auto& [k, v] : tensors) out.tensors.emplace(k, Tensor<T>(v.shape));
  return out;
}

template <typename T>
void ParamStore<T>::fill_zero() {
  for (auto& [k, v] : tensors) std::fill(v.data.begin(), v.data.end(), T(0));
}

template <typename T>
Var ParamBinder<T>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor<T>& value = params_.at(name);
  Tensor<T>* sink = nullptr;
  if (grads_ && !(frozen_ && frozen_->count(name)) && grads_->contains(name)) sink = &grads_->at(name);
  Var v = tape_.parameter(value, sink);
  bound_.emplace(name, v);
  return v;
}

// ----------------------------------------------------------------- checkpoint

namespace {
constexpr char kMagic[4] = {'L', 'S', 'C', 'K'};
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint metadata may not contain '=' in keys or newlines");
    }
    meta += k + "=" + v + "\n";
  }
  w.str(meta);
  w.u32(static_cast<std::uint32_t>(ckpt.params.tensors.size()));
  for (const auto& [name, t] : ckpt.params.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptFile("bad checkpoint magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw CorruptFile("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  std::istringstream meta(r.str(1u << 24));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptFile("malformed metadata line '" + line + "'");
    ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(4096);
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw CorruptFile("bad rank for tensor '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    const std::size_t n = numel(shape);
    r.need(n * 4);
    Tensor<float> t(shape);
    for (auto& v : t.data) v = r.f32();
    if (ckpt.params.tensors.count(name)) throw CorruptFile("duplicate tensor '" + name + "'");
    ckpt.params.tensors.emplace(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw CorruptFile("trailing bytes after checkpoint tensors");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

void validate_layout(const ParamStore<float>& loaded, const ParamStore<float>& expected) {
  for (const auto& [name, t] : expected.tensors) {
    auto it = loaded.tensors.find(name);
    if (it == loaded.tensors.end()) throw ShapeError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape != t.shape) {
      throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                       shape_str(t.shape));
    }
  }
  for (const auto& [name, t] : loaded.tensors) {
    if (!expected.contains(name)) throw ShapeError("unexpected tensor '" + name + "' in checkpoint");
  }
}

std::string param_digest(const ParamStore<float>& params, const std::set<std::string>& names) {
  detail::ByteWriter w;
  for (const auto& name : names) {
    const auto& t = params.at(name);
    w.str(name);
    for (auto d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(w.bytes().data(), w.bytes().size(), md, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

template struct ParamStore<float>;
template struct ParamStore<double>;
template class ParamBinder<float>;
template class ParamBinder<double>;

}  // namespace lsemvae
