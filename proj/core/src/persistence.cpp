#include "mcblock/persistence.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mcblock/error.hpp"

namespace mcblock {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf_(b) {}
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n)
      throw LoadError(std::string("weights file truncated while reading ") + what);
  }
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const ModelParams& params) {
  const ModelHyper& h = params.hyper;
  Writer w;
  w.bytes("MCBK", 4);
  w.u32(kWeightsVersion);
  w.u32(h.arch == Arch::detector ? 0u : 1u);
  w.u32(static_cast<std::uint32_t>(h.image_size));
  w.u32(static_cast<std::uint32_t>(h.num_classes));
  w.u32(static_cast<std::uint32_t>(h.anchors.size()));
  for (const Anchor& a : h.anchors) {
    w.f32(a.w);
    w.f32(a.h);
  }
  w.u32(static_cast<std::uint32_t>(h.block_size));
  w.f32(h.drop_prob);
  w.u32(static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.f32(v);
  }
  return std::move(w.out);
}

ModelParams deserialize_weights(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != "MCBK") throw LoadError("not a weights file (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kWeightsVersion)
    throw LoadError("unsupported weights format version " + std::to_string(version));
  ModelParams p;
  ModelHyper& h = p.hyper;
  const std::uint32_t arch = r.u32("architecture tag");
  if (arch > 1) throw LoadError("unknown architecture tag " + std::to_string(arch));
  h.arch = arch == 0 ? Arch::detector : Arch::classifier;
  h.image_size = static_cast<int>(r.u32("image size"));
  h.num_classes = static_cast<int>(r.u32("class count"));
  const std::uint32_t n_anchors = r.u32("anchor count");
  if (n_anchors > 1024) throw LoadError("implausible anchor count");
  h.anchors.clear();
  for (std::uint32_t i = 0; i < n_anchors; ++i) {
    Anchor a;
    a.w = r.f32("anchor");
    a.h = r.f32("anchor");
    h.anchors.push_back(a);
  }
  h.block_size = static_cast<int>(r.u32("block size"));
  h.drop_prob = r.f32("drop probability");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const std::uint32_t len = r.u32("tensor name length");
    nt.name = r.str(len, "tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) throw LoadError("tensor '" + nt.name + "' has invalid rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32("tensor extent");
      if (e == 0 || e > (1u << 28)) throw LoadError("tensor '" + nt.name + "' has invalid extent");
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    std::vector<float> data(numel);
    for (float& v : data) v = r.f32("tensor data");
    nt.tensor = Tensor(std::move(shape), std::move(data));
    p.tensors.push_back(std::move(nt));
  }
  if (!r.done()) throw LoadError("trailing bytes after last tensor");
  return p;
}

void save_weights(const ModelParams& params, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

ModelParams load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

void check_compatible(const ModelParams& loaded, const ModelHyper& expected) {
  const ModelParams want = ModelParams::zeros(expected);
  if (loaded.hyper.arch != expected.arch)
    throw LoadError(std::string("weights are for a ") + to_string(loaded.hyper.arch) +
                    ", config expects a " + to_string(expected.arch));
  for (std::size_t i = 0; i < want.tensors.size(); ++i) {
    const auto& w = want.tensors[i];
    if (i >= loaded.tensors.size())
      throw LoadError("weights file is missing tensor '" + w.name + "'");
    const auto& l = loaded.tensors[i];
    if (l.name != w.name)
      throw LoadError("tensor '" + l.name + "' found where '" + w.name + "' was expected");
    if (l.tensor.shape() != w.tensor.shape())
      throw LoadError("tensor '" + w.name + "' has shape " + shape_str(l.tensor.shape()) +
                      ", config implies " + shape_str(w.tensor.shape()));
  }
  if (loaded.tensors.size() > want.tensors.size())
    throw LoadError("unexpected extra tensor '" + loaded.tensors[want.tensors.size()].name + "'");
  if (loaded.hyper.anchors != expected.anchors)
    throw LoadError("anchor set in weights differs from config");
}

}  // namespace mcblock
