#pragma once

#include <stdexcept>
#include <string>

namespace lsemvae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define LSEMVAE_DEFINE_ERROR(Name)            \
  class Name : public Error {                 \
   public:                                    \
    explicit Name(const std::string& what)    \
        : Error(std::string(#Name ": ") + what) {} \
  }

LSEMVAE_DEFINE_ERROR(CorruptFile);
LSEMVAE_DEFINE_ERROR(NotInterpolatable);
LSEMVAE_DEFINE_ERROR(FilterConfigError);
LSEMVAE_DEFINE_ERROR(SpecError);
LSEMVAE_DEFINE_ERROR(DelineationFailure);
LSEMVAE_DEFINE_ERROR(ShapeError);
LSEMVAE_DEFINE_ERROR(ContractError);
LSEMVAE_DEFINE_ERROR(DomainError);
LSEMVAE_DEFINE_ERROR(CorpusError);
LSEMVAE_DEFINE_ERROR(DivergenceError);
LSEMVAE_DEFINE_ERROR(LeadNotFound);
LSEMVAE_DEFINE_ERROR(StratificationError);
LSEMVAE_DEFINE_ERROR(UndefinedMetric);
LSEMVAE_DEFINE_ERROR(ConfigError);

#undef LSEMVAE_DEFINE_ERROR

}  // namespace lsemvae
