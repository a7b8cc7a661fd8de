#include "promptlab/vlm/container.hpp"

#include <cstring>
#include <fstream>

#include "promptlab/core/error.hpp"

namespace promptlab::vlm {

uint64_t fnv1a(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("container: truncated ") + what);
  return v;
}

}  // namespace

void write_container(const std::string& path, const Container& c) {
  if (c.magic.size() != 4) {
    throw ValueError("container: magic must be 4 bytes, got '" + c.magic + "'");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("container: cannot open " + path + " for write");
  out.write(c.magic.data(), 4);
  write_pod(out, c.version);
  write_pod(out, c.seed);
  write_pod(out, c.flag);
  write_pod(out, static_cast<uint32_t>(c.tensors.size()));
  for (const auto& [name, tensor] : c.tensors) {
    write_pod(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<uint8_t>(tensor.rank()));
    for (int i = 0; i < tensor.rank(); ++i) {
      write_pod(out, static_cast<uint64_t>(tensor.dim(i)));
    }
    const size_t bytes = tensor.size() * sizeof(double);
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(bytes));
    write_pod(out, fnv1a(tensor.data(), bytes));
  }
  for (const std::string& word : c.words) {
    write_pod(out, static_cast<uint16_t>(word.size()));
    out.write(word.data(), static_cast<std::streamsize>(word.size()));
  }
  if (!out) throw FormatError("container: write failed for " + path);
}

Container read_container(const std::string& path,
                         const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("container: cannot open " + path);
  Container c;
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, expected_magic.data(), 4) != 0) {
    throw FormatError("container: bad magic in " + path + ", expected " +
                      expected_magic);
  }
  c.magic = expected_magic;
  c.version = read_pod<uint32_t>(in, "version");
  if (c.version != kContainerVersion) {
    throw FormatError("container: unsupported version " +
                      std::to_string(c.version));
  }
  c.seed = read_pod<uint64_t>(in, "seed");
  c.flag = read_pod<uint8_t>(in, "flag");
  const uint32_t count = read_pod<uint32_t>(in, "tensor count");
  c.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = read_pod<uint16_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("container: truncated tensor name");
    const uint8_t rank = read_pod<uint8_t>(in, "rank");
    std::vector<int> shape;
    size_t n = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint64_t dim = read_pod<uint64_t>(in, "dimension");
      shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    std::vector<double> data(n);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw FormatError("container: truncated payload for " + name);
    const uint64_t stored = read_pod<uint64_t>(in, "checksum");
    const uint64_t actual = fnv1a(data.data(), n * sizeof(double));
    if (stored != actual) {
      throw FormatError("container: checksum mismatch for tensor " + name);
    }
    c.tensors.emplace_back(
        name, core::Tensor::from_data(std::move(shape), std::move(data)));
  }
  // Trailing words run to end of file.
  while (true) {
    uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (in.eof()) break;
    if (!in) throw FormatError("container: truncated word length");
    std::string word(len, '\0');
    in.read(word.data(), len);
    if (!in) throw FormatError("container: truncated word");
    c.words.push_back(std::move(word));
  }
  return c;
}

}  // namespace promptlab::vlm
