#include "mlattn/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "mlattn/error.hpp"

namespace mlattn {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
  if (params_.contains(name) || buffers_.contains(name)) throw UsageError("duplicate parameter name: " + name);
  Parameter p;
  p.m = Tensor(init.shape());
  p.v = Tensor(init.shape());
  p.var = ad::parameter(std::move(init));
  return params_.emplace(name, std::move(p)).first->second.var;
}

Tensor& ParamStore::add_buffer(const std::string& name, Tensor init) {
  if (params_.contains(name) || buffers_.contains(name)) throw UsageError("duplicate buffer name: " + name);
  return buffers_.emplace(name, std::move(init)).first->second;
}

ad::Var ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter: " + name);
  return it->second.var;
}

Tensor& ParamStore::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw UsageError("unknown buffer: " + name);
  return it->second;
}

const Tensor& ParamStore::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw UsageError("unknown buffer: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.var.zero_grad();
}

std::size_t ParamStore::freeze(const std::vector<std::string>& prefixes) {
  std::size_t n = 0;
  for (auto& [name, p] : params_) {
    for (const auto& prefix : prefixes) {
      if (name.starts_with(prefix)) {
        p.frozen = true;
        ++n;
        break;
      }
    }
  }
  return n;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.var.value().size();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, p] : params_) {
    Parameter q;
    q.var = ad::parameter(p.var.value());
    q.m = p.m;
    q.v = p.v;
    q.step = p.step;
    q.frozen = p.frozen;
    out.params_.emplace(name, std::move(q));
  }
  out.buffers_ = buffers_;
  return out;
}

Tensor he_uniform(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

namespace {

void adam_update(Parameter& p, const Tensor& g, const AdamOptions& opt) {
  ++p.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step));
  Tensor& w = p.var.mutable_value();
  for (std::size_t i = 0; i < w.size(); ++i) {
    p.m[i] = opt.beta1 * p.m[i] + (1.0 - opt.beta1) * g[i];
    p.v[i] = opt.beta2 * p.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
    const double m_hat = p.m[i] / bc1;
    const double v_hat = p.v[i] / bc2;
    w[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
  }
}

}  // namespace

void adam_step(ParamStore& store, const AdamOptions& opt) {
  for (auto& [_, p] : store.params()) {
    if (!p.frozen) adam_update(p, p.var.grad(), opt);
  }
}

void adam_step(ParamStore& store, const std::map<std::string, Tensor>& grads, const AdamOptions& opt) {
  for (const auto& [name, g] : grads) {
    if (!store.contains(name)) throw UsageError("adam_step: gradient for unknown parameter " + name);
    if (g.shape() != store.get(name).shape()) {
      throw UsageError(fmt::format("adam_step: gradient {} does not match parameter {} {}", shape_str(g.shape()), name,
                                   shape_str(store.get(name).shape())));
    }
  }
  for (auto& [name, p] : store.params()) {
    if (p.frozen) continue;
    auto it = grads.find(name);
    if (it == grads.end()) throw UsageError("adam_step: missing gradient for " + name);
    adam_update(p, it->second, opt);
  }
}

namespace {

constexpr char kMagic[5] = {'M', 'L', 'A', 'W', '1'};
constexpr std::uint8_t kKindParam = 0;
constexpr std::uint8_t kKindBuffer = 1;
constexpr std::uint8_t kDtypeF64 = 1;
constexpr std::uint8_t kDtypeF32 = 2;

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename U>
  void uint(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::filesystem::path path) : in_(in), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw FormatError(fmt::format("{}: truncated weight file", path_.string()));
  }
  template <typename U>
  U uint() {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  std::string str(std::size_t limit) {
    const auto n = uint<std::uint32_t>();
    if (n > limit) throw FormatError(fmt::format("{}: string length {} exceeds limit", path_.string(), n));
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream& in_;
  std::filesystem::path path_;
};

struct EntryHeader {
  std::string name;
  std::uint8_t kind;
  std::uint8_t dtype;
  Shape shape;
};

std::ifstream open_and_check_magic(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file " + path.string());
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0) {
    throw FormatError(path.string() + ": not an MLAW1 weight file (bad magic)");
  }
  return in;
}

}  // namespace

void save_weights(const ParamStore& store, const std::filesystem::path& path, const std::string& metadata) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write weight file " + path.string());
  Writer w(out);
  w.bytes(kMagic, 5);
  w.str(metadata);
  std::vector<std::pair<const std::string*, const Tensor*>> entries;
  std::vector<std::uint8_t> kinds;
  for (const auto& [name, p] : store.params()) {
    entries.emplace_back(&name, &p.var.value());
    kinds.push_back(kKindParam);
  }
  for (const auto& [name, t] : store.buffers()) {
    entries.emplace_back(&name, &t);
    kinds.push_back(kKindBuffer);
  }
  w.uint(static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    w.str(*entries[i].first);
    w.uint(kinds[i]);
    w.uint(kDtypeF64);
    const Shape& s = entries[i].second->shape();
    w.uint(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) w.uint(static_cast<std::uint64_t>(d));
  }
  for (const auto& [_, t] : entries) {
    for (double v : t->data()) w.uint(std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError("failed writing weight file " + path.string());
}

std::string read_weights_metadata(const std::filesystem::path& path) {
  auto in = open_and_check_magic(path);
  Reader r(in, path);
  return r.str(1u << 24);
}

LoadReport load_weights(ParamStore& store, const std::filesystem::path& path, LoadMode mode) {
  auto in = open_and_check_magic(path);
  Reader r(in, path);
  LoadReport report;
  report.metadata = r.str(1u << 24);
  const auto count = r.uint<std::uint32_t>();
  std::vector<EntryHeader> headers;
  headers.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    EntryHeader h;
    h.name = r.str(4096);
    h.kind = r.uint<std::uint8_t>();
    h.dtype = r.uint<std::uint8_t>();
    if (h.kind != kKindParam && h.kind != kKindBuffer) {
      throw FormatError(fmt::format("{}: entry '{}' has unknown kind {}", path.string(), h.name, h.kind));
    }
    if (h.dtype != kDtypeF64 && h.dtype != kDtypeF32) {
      throw FormatError(fmt::format("{}: entry '{}' has unknown dtype {}", path.string(), h.name, h.dtype));
    }
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) throw FormatError(fmt::format("{}: entry '{}' has rank {}", path.string(), h.name, rank));
    for (std::uint32_t d = 0; d < rank; ++d) h.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    headers.push_back(std::move(h));
  }

  // Validate everything before touching the store.
  std::vector<Tensor*> targets(headers.size(), nullptr);
  std::size_t expected = 0;
  for (std::size_t i = 0; i < headers.size(); ++i) {
    const EntryHeader& h = headers[i];
    Tensor* target = nullptr;
    if (h.kind == kKindParam && store.contains(h.name)) {
      target = &store.params().at(h.name).var.mutable_value();
    } else if (h.kind == kKindBuffer && store.contains_buffer(h.name)) {
      target = &store.buffer(h.name);
    }
    if (target == nullptr) {
      if (mode == LoadMode::strict) {
        throw FormatError(fmt::format("{}: entry '{}' is not part of the model", path.string(), h.name));
      }
      report.skipped.push_back(h.name);
      continue;
    }
    if (target->shape() != h.shape) {
      throw FormatError(fmt::format("{}: entry '{}' has shape {}, model expects {}", path.string(), h.name,
                                    shape_str(h.shape), shape_str(target->shape())));
    }
    targets[i] = target;
    ++expected;
  }
  if (mode == LoadMode::strict && expected != store.params().size() + store.buffers().size()) {
    for (const auto& [name, _] : store.params()) {
      bool found = false;
      for (const auto& h : headers) found = found || (h.kind == kKindParam && h.name == name);
      if (!found) throw FormatError(fmt::format("{}: missing entry '{}'", path.string(), name));
    }
    for (const auto& [name, _] : store.buffers()) {
      bool found = false;
      for (const auto& h : headers) found = found || (h.kind == kKindBuffer && h.name == name);
      if (!found) throw FormatError(fmt::format("{}: missing entry '{}'", path.string(), name));
    }
  }

  for (std::size_t i = 0; i < headers.size(); ++i) {
    const std::size_t n = shape_numel(headers[i].shape);
    Tensor values(headers[i].shape);
    for (std::size_t k = 0; k < n; ++k) {
      if (headers[i].dtype == kDtypeF64) {
        values[k] = std::bit_cast<double>(r.uint<std::uint64_t>());
      } else {
        values[k] = static_cast<double>(std::bit_cast<float>(r.uint<std::uint32_t>()));
      }
    }
    if (targets[i] != nullptr) {
      *targets[i] = std::move(values);
      ++report.loaded;
    }
  }
  return report;
}

}  // namespace mlattn
