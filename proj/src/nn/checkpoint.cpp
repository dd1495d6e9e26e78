#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "maxl/errors.hpp"
#include "maxl/nn.hpp"

namespace maxl::nn {
namespace {

// Everything is written little-endian regardless of the host.
class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}

  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

 private:
  void le(std::uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(buf, n);
  }
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) {
      throw TruncatedFileError("checkpoint " + origin_ + ": truncated at byte " +
                               std::to_string(pos_));
    }
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

constexpr std::uint32_t kMaxDims = 8;

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot write " + path.string());
  Writer w(out);
  w.bytes(std::string(kCheckpointMagic, sizeof kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.u64(ckpt.meta.size());
  w.bytes(ckpt.meta);
  w.u64(ckpt.tensors.size());
  for (const NamedTensor& t : ckpt.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.dim()));
    for (std::size_t d : t.value.shape()) w.u64(d);
    for (double v : t.value.data()) w.f64(v);
  }
  out.flush();
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());

  if (r.remaining() < sizeof kCheckpointMagic) {
    throw TruncatedFileError("checkpoint " + path.string() + ": shorter than its header");
  }
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw BadMagicError("checkpoint " + path.string() + ": bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint " + path.string() + ": unsupported version " +
                      std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.meta = r.bytes(r.u64());
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    const std::uint32_t dims = r.u32();
    if (dims > kMaxDims) {
      throw FormatError("checkpoint " + path.string() + ": tensor '" + t.name + "' has " +
                        std::to_string(dims) + " dimensions");
    }
    ag::Shape shape(dims);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d != 0 && numel > r.remaining() / d) {
        throw TruncatedFileError("checkpoint " + path.string() + ": tensor '" + t.name +
                                 "' larger than the file");
      }
      numel *= d;
    }
    if (numel > r.remaining() / 8) {
      throw TruncatedFileError("checkpoint " + path.string() + ": tensor '" + t.name +
                               "' larger than the file");
    }
    std::vector<double> values(numel);
    for (double& v : values) v = r.f64();
    t.value = ag::Tensor(std::move(shape), std::move(values));
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError("checkpoint " + path.string() + ": trailing bytes");
  }
  return ckpt;
}

void append_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.tensors.push_back(NamedTensor{prefix + params.name(i), params.value(i)});
  }
}

void restore_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& params) {
  std::size_t found = 0;
  for (const NamedTensor& t : ckpt.tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    const std::string name = t.name.substr(prefix.size());
    std::size_t index = 0;
    try {
      index = params.index_of(name);
    } catch (const InvalidArgumentError&) {
      throw FormatError("checkpoint: unexpected parameter '" + t.name + "'");
    }
    if (t.value.shape() != params.value(index).shape()) {
      throw FormatError("checkpoint: parameter '" + t.name + "' has shape " +
                        ag::shape_str(t.value.shape()) + ", network expects " +
                        ag::shape_str(params.value(index).shape()));
    }
    params.set_value(index, t.value);
    ++found;
  }
  if (found != params.size()) {
    throw FormatError("checkpoint: found " + std::to_string(found) + " of " +
                      std::to_string(params.size()) + " parameters under '" + prefix + "'");
  }
}

}  // namespace maxl::nn
