#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmclip/autograd.hpp"
#include "mmclip/rng.hpp"
#include "mmclip/tensor.hpp"

namespace mmclip {

/// Named, ordered parameter tensors. Indices are stable once added.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  std::span<Tensor> values() { return values_; }
  std::span<const Tensor> values() const { return values_; }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t numel() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Parameter handles on one tape, indexed like the ParamStore.
using Binding = std::vector<Var>;

/// Binds every parameter as a borrowed leaf. With requires_grad = false the
/// parameters enter as constants (inference).
Binding bind(Tape& tape, const ParamStore& params, bool requires_grad = true);

/// Classical (heavy-ball) momentum: v <- momentum*v + g; p <- p - lr*v.
void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr,
              double momentum, std::span<Tensor> velocity);

/// Maximum elementwise relative error between the reverse-mode gradient of
/// `loss_fn` at `params` and central differences with step `eps`. The
/// denominator is max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Var(Tape&, Var)>& loss_fn, const Tensor& params,
                         double eps);

/// Checkpoint file: "MMCK", u32 version, then per entry u32 name length,
/// UTF-8 name, u32 rank, u32 dims..., float64 payload. All little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors read_checkpoint(const std::filesystem::path& path);

}  // namespace mmclip
