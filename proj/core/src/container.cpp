#include "odeflow/container.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>

#include "odeflow/error.hpp"

namespace odeflow {

namespace {

constexpr char kMagic[4] = {'O', 'D', 'E', 'V'};

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2,
                                                                       std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("container truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Container::put(std::string name, std::vector<double> values) {
  if (name.size() > 0xffff) throw ContractError("section name too long");
  auto it = std::find_if(sections.begin(), sections.end(),
                         [&](const Section& s) { return s.name == name; });
  if (it != sections.end()) {
    it->values = std::move(values);
  } else {
    sections.push_back({std::move(name), std::move(values)});
  }
}

bool Container::has(std::string_view name) const {
  return std::any_of(sections.begin(), sections.end(),
                     [&](const Section& s) { return s.name == name; });
}

const Section& Container::get(std::string_view name) const {
  for (const Section& s : sections)
    if (s.name == name) return s;
  throw FormatError("container has no section '" + std::string(name) + "'");
}

Tensor Container::tensor(std::string_view name, Shape shape) const {
  const Section& s = get(name);
  if (s.values.size() != shape_numel(shape)) {
    throw FormatError("section '" + std::string(name) + "' holds " +
                      std::to_string(s.values.size()) + " values, expected " +
                      shape_string(shape));
  }
  return Tensor(std::move(shape), s.values);
}

double Container::scalar(std::string_view name) const {
  const Section& s = get(name);
  if (s.values.size() != 1) throw FormatError("section '" + std::string(name) + "' is not a scalar");
  return s.values[0];
}

std::string encode_container(const Container& c) {
  std::string out(kMagic, 4);
  put_le(out, c.header.version);
  put_le(out, c.header.dim);
  put_le(out, c.header.heads);
  put_le(out, c.header.patches);
  put_le(out, c.header.mlp_ratio);
  put_le(out, static_cast<std::uint8_t>(c.header.kind));
  for (const Section& s : c.sections) {
    put_le(out, static_cast<std::uint16_t>(s.name.size()));
    out += s.name;
    put_le(out, static_cast<std::uint64_t>(s.values.size()));
    for (double v : s.values) put_le(out, v);
  }
  return out;
}

Container decode_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) throw FormatError("bad container magic");
  Container c;
  c.header.version = r.get<std::uint32_t>();
  if (c.header.version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(c.header.version));
  }
  c.header.dim = r.get<std::uint32_t>();
  c.header.heads = r.get<std::uint32_t>();
  c.header.patches = r.get<std::uint32_t>();
  c.header.mlp_ratio = r.get<std::uint32_t>();
  const auto kind = r.get<std::uint8_t>();
  if (kind > 2) throw FormatError("unknown container kind " + std::to_string(kind));
  c.header.kind = static_cast<ContainerKind>(kind);
  while (!r.done()) {
    Section s;
    const auto len = r.get<std::uint16_t>();
    s.name = std::string(r.take(len));
    const auto count = r.get<std::uint64_t>();
    if (count > r.remaining() / 8) throw FormatError("section '" + s.name + "' truncated");
    s.values.resize(count);
    for (auto& v : s.values) v = r.get<double>();
    c.sections.push_back(std::move(s));
  }
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::filesystem::filesystem_error("cannot open", path, std::make_error_code(std::errc::no_such_file_or_directory));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container load_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

void put_block(Container& c, const std::string& prefix, const BlockParams& p) {
  for (const Parameter* q : p.parameters()) c.put(prefix + q->name, q->value);
}

void get_block(const Container& c, const std::string& prefix, BlockParams& p) {
  for (Parameter* q : p.parameters()) q->value = c.tensor(prefix + q->name, q->value.shape());
}

Container block_container(const BlockParams& p, std::uint32_t patches) {
  Container c;
  c.header.dim = static_cast<std::uint32_t>(p.dim);
  c.header.heads = static_cast<std::uint32_t>(p.heads);
  c.header.patches = patches;
  c.header.mlp_ratio = static_cast<std::uint32_t>(p.mlp_ratio);
  c.header.kind = ContainerKind::Block;
  put_block(c, "block.", p);
  return c;
}

BlockParams block_from_container(const Container& c) {
  BlockParams p(c.header.dim, c.header.heads, c.header.mlp_ratio);
  get_block(c, "block.", p);
  return p;
}

}  // namespace odeflow
