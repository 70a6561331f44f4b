#include "malfuse/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace malfuse {
namespace {

static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void doubles(std::vector<double>& out) {
    need(out.size() * sizeof(double));
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
    pos_ += out.size() * sizeof(double);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("model archive truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelArchive::add(const std::string& name, const Tensor& value) {
  if (contains(name)) throw Error("model archive: duplicate array '" + name + "'");
  arrays_.emplace_back(name, value);
}

bool ModelArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : arrays_)
    if (n == name) return true;
  return false;
}

const Tensor& ModelArchive::get(const std::string& name) const {
  for (const auto& [n, t] : arrays_)
    if (n == name) return t;
  throw Error("model archive: missing array '" + name + "'");
}

void ModelArchive::load_into(Parameter& p) const {
  const Tensor& t = get(p.name);
  if (t.shape != p.value.shape) {
    throw ShapeError("model archive: array '" + p.name + "' has shape " + shape_string(t.shape) + ", expected " +
                     shape_string(p.value.shape));
  }
  p.value = t;
}

std::string ModelArchive::to_bytes() const {
  std::string out(kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kind.size()));
  out += kind;
  const std::string meta_text = meta.dump();
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(arrays_.size()));
  for (const auto& [name, t] : arrays_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  return out;
}

ModelArchive ModelArchive::from_bytes(std::string_view bytes) {
  Reader r(bytes);
  if (r.str(kMagic.size()) != kMagic) throw Error("not a model archive (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw Error("unsupported model archive version " + std::to_string(version));
  ModelArchive a;
  a.kind = r.str(r.get<std::uint32_t>());
  a.meta = nlohmann::json::parse(r.str(r.get<std::uint64_t>()));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (std::size_t& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    r.doubles(t.data);
    a.arrays_.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw Error("model archive has trailing bytes");
  return a;
}

void ModelArchive::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  const std::string bytes = to_bytes();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelArchive ModelArchive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_bytes(ss.str());
}

}  // namespace malfuse
