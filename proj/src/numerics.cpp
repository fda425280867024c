#include "mmclip/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mmclip {

std::size_t ParamStore::add(std::string name, Tensor value) {
  if (find(name)) throw Error("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Binding bind(Tape& tape, const ParamStore& params, bool requires_grad) {
  Binding b;
  b.reserve(params.size());
  for (const Tensor& v : params.values())
    b.push_back(requires_grad ? tape.variable_ref(v) : tape.constant_ref(v));
  return b;
}

void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr,
              double momentum, std::span<Tensor> velocity) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("sgd_step: list lengths differ (" + std::to_string(params.size()) + ", " +
                     std::to_string(grads.size()) + ", " + std::to_string(velocity.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != velocity[i].shape()) {
      throw ShapeError("sgd_step: shape mismatch at entry " + std::to_string(i) + ": " +
                       shape_str(params[i].shape()) + ", " + shape_str(grads[i].shape()) + ", " +
                       shape_str(velocity[i].shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto v = velocity[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& loss_fn, const Tensor& params,
                         double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw Error("finite_diff_check: eps must be in (0, 1e-2]");
  Tensor analytic;
  {
    Tape tape;
    Var p = tape.variable(params);
    Var loss = loss_fn(tape, p);
    if (loss.value().size() != 1) {
      throw ShapeError("finite_diff_check: loss is not scalar, shape " + shape_str(loss.shape()));
    }
    tape.backward(loss);
    analytic = tape.grad(p);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var p = tape.constant(at);
    return loss_fn(tape, p).value().item();
  };
  Tensor probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return static_cast<bool>(is);
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  os.write("MMCK", 4);
  put_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : entries) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw Error("write failed for checkpoint: " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MMCK", 4) != 0) throw Error("bad checkpoint magic in " + path.string());
  std::uint32_t version = 0;
  if (!get_u32(is, version) || version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version in " + path.string());
  }
  NamedTensors out;
  std::uint32_t name_len = 0;
  while (get_u32(is, name_len)) {
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = 0;
    if (!is || !get_u32(is, rank)) throw Error("truncated checkpoint entry header in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!get_u32(is, v)) throw Error("truncated checkpoint shape in " + path.string());
      d = v;
    }
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw Error("truncated checkpoint payload for '" + name + "' in " + path.string());
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace mmclip
