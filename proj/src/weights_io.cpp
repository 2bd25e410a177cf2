#include "gcvk/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace gcvk {
namespace {

constexpr char kMagic[4] = {'G', 'C', 'V', 'K'};

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    require(bytes_.size() - pos_ >= n, ErrorKind::format,
            std::string("weights file truncated while reading ") + what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kWeightsVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(name.size() <= 0xFFFF, ErrorKind::format, "tensor name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    if (t.dtype() == DType::f32) {
      for (float v : t.data<float>()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    } else {
      for (double v : t.data<double>()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(const std::string& bytes) {
  Reader in(bytes);
  require(in.take(4, "magic") == std::string(kMagic, 4), ErrorKind::format, "not a weights file (bad magic)");
  const auto version = in.get<std::uint32_t>("version");
  require(version == kWeightsVersion, ErrorKind::format,
          "unsupported weights version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint16_t>("name length");
    std::string name = in.take(len, "tensor name");
    require(!seen[name], ErrorKind::format, "duplicate tensor name in weights file: " + name);
    seen[name] = true;
    const auto code = in.get<std::uint8_t>("dtype");
    require(code <= 1, ErrorKind::format, "tensor " + name + ": unknown dtype code " + std::to_string(code));
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape;
    for (int r = 0; r < rank; ++r) {
      const auto e = in.get<std::uint32_t>("extent");
      require(e >= 1, ErrorKind::format, "tensor " + name + ": zero extent");
      shape.push_back(e);
    }
    const auto n = static_cast<std::size_t>(numel_of(shape));
    if (code == 0) {
      std::vector<float> v(n);
      for (auto& x : v) x = std::bit_cast<float>(in.get<std::uint32_t>(name.c_str()));
      out.emplace_back(name, Tensor::from<float>(shape, std::move(v)));
    } else {
      std::vector<double> v(n);
      for (auto& x : v) x = std::bit_cast<double>(in.get<std::uint64_t>(name.c_str()));
      out.emplace_back(name, Tensor::from<double>(shape, std::move(v)));
    }
  }
  require(in.done(), ErrorKind::format, "trailing bytes after the last tensor");
  return out;
}

std::string encode_weights(Model& model) {
  std::vector<NamedTensor> tensors;
  model.visit([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, t); });
  return encode_tensors(tensors);
}

void decode_weights(Model& model, const std::string& bytes) {
  std::map<std::string, Tensor> incoming;
  for (auto& [name, t] : decode_tensors(bytes)) incoming.emplace(name, std::move(t));
  std::size_t matched = 0;
  model.visit([&](const std::string& name, Tensor& slot) {
    auto it = incoming.find(name);
    require(it != incoming.end(), ErrorKind::format, "weights file is missing tensor " + name);
    require(it->second.dtype() == slot.dtype(), ErrorKind::format,
            "tensor " + name + ": dtype " + to_string(it->second.dtype()) + " but model is " +
                to_string(slot.dtype()));
    require(it->second.shape() == slot.shape(), ErrorKind::format,
            "tensor " + name + ": shape " + shape_str(it->second.shape()) + " but model expects " +
                shape_str(slot.shape()));
    ++matched;
  });
  if (matched != incoming.size()) {
    std::map<std::string, bool> known;
    model.visit([&](const std::string& name, Tensor&) { known[name] = true; });
    for (const auto& [name, t] : incoming) {
      require(known.count(name) != 0, ErrorKind::format, "weights file has unexpected tensor " + name);
    }
  }
  model.visit([&](const std::string& name, Tensor& slot) { slot = incoming.at(name); });
}

void save_weights(Model& model, const std::string& path) {
  const std::string bytes = encode_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::format, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::format, "failed writing " + path);
}

void load_weights(Model& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::format, "cannot open weights file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  decode_weights(model, buf.str());
}

}  // namespace gcvk
