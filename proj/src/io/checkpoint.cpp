#include "lpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "lpt/errors.hpp"

namespace lpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'P', 'T', '1'};

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U value;
    std::memcpy(&value, take(sizeof(U), what), sizeof(U));
    return value;
  }
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint truncated while reading " + std::string(what) + " at byte " + std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <std::floating_point T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

template <typename Src, std::floating_point T>
void read_payload(Reader& r, std::span<T> dst) {
  const char* p = r.take(dst.size() * sizeof(Src), "payload");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Src v;
    std::memcpy(&v, p + i * sizeof(Src), sizeof(Src));
    dst[i] = static_cast<T>(v);
  }
}

}  // namespace

template <std::floating_point T>
std::string encode_checkpoint(const ParameterList<T>& tensors) {
  std::set<std::string> names;
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!names.insert(name).second) throw ContractError("checkpoint: duplicate tensor name '" + name + "'");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put<std::uint64_t>(out, dim);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  }
  for (const auto& p : tensors) {
    const auto v = p.tensor.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  return out;
}

template <std::floating_point T>
ParameterList<T> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw DataError("checkpoint: bad magic, expected LPT1");
  const auto count = r.get<std::uint32_t>("tensor count");
  struct Header {
    std::string name;
    Shape shape;
    DType dtype;
  };
  std::vector<Header> headers;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    const auto len = r.get<std::uint32_t>("name length");
    h.name.assign(r.take(len, "name"), len);
    if (!names.insert(h.name).second) throw DataError("checkpoint: duplicate tensor name '" + h.name + "'");
    const auto rank = r.get<std::uint32_t>("rank");
    for (std::uint32_t d = 0; d < rank; ++d) h.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dim")));
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag > 1) throw DataError("checkpoint: tensor '" + h.name + "' has unknown dtype tag " + std::to_string(tag));
    h.dtype = static_cast<DType>(tag);
    headers.push_back(std::move(h));
  }
  ParameterList<T> out;
  for (auto& h : headers) {
    Tensor<T> t(h.shape);
    if (h.dtype == DType::F32) {
      read_payload<float>(r, t.mutable_values());
    } else {
      read_payload<double>(r, t.mutable_values());
    }
    out.push_back({std::move(h.name), std::move(t)});
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes after the last payload");
  return out;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const ParameterList<T>& tensors) {
  const std::string bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

template <std::floating_point T>
ParameterList<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_checkpoint<T>(buf.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template std::string encode_checkpoint(const ParameterList<float>&);
template std::string encode_checkpoint(const ParameterList<double>&);
template ParameterList<float> decode_checkpoint<float>(const std::string&);
template ParameterList<double> decode_checkpoint<double>(const std::string&);
template void save_checkpoint(const std::filesystem::path&, const ParameterList<float>&);
template void save_checkpoint(const std::filesystem::path&, const ParameterList<double>&);
template ParameterList<float> load_checkpoint<float>(const std::filesystem::path&);
template ParameterList<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace lpt
