#include "cnd/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cnd/encoders.hpp"
#include "cnd/errors.hpp"

namespace cnd {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'N', 'D', 'A', 'R', 'C', 'H', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto len = get<std::uint32_t>();
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  void read_doubles(double* dst, std::size_t count) {
    if (count > (limit_ - pos_) / sizeof(double)) throw IoError("archive: truncated tensor payload");
    std::memcpy(dst, bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > limit_ - pos_) throw IoError("archive: truncated file");
  }
  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

const Mat* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string serialize_archive(const TensorArchive& archive) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.meta.size()));
  for (const auto& [k, v] : archive.meta) {
    put_string(out, k);
    put_string(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, m] : archive.tensors) {
    put_string(out, name);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  put<std::uint64_t>(out, hash_bytes(out.data(), out.size()));
  return out;
}

TensorArchive parse_archive(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IoError("archive: bad magic or truncated header");
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != hash_bytes(bytes.data(), body)) throw IoError("archive: checksum mismatch (corrupt or truncated)");

  Reader in(bytes, body);
  in.get<std::uint64_t>();  // magic
  const auto version = in.get<std::uint32_t>();
  if (version != kArchiveVersion) throw IoError("archive: unsupported version " + std::to_string(version));
  TensorArchive archive;
  const auto meta_count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = in.get_string();
    archive.meta[k] = in.get_string();
  }
  const auto tensor_count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    std::string name = in.get_string();
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (cols != 0 && rows > (body / sizeof(double)) / cols) throw IoError("archive: implausible tensor shape");
    Mat m(static_cast<Index>(rows), static_cast<Index>(cols));
    in.read_doubles(m.data(), static_cast<std::size_t>(rows * cols));
    archive.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (in.pos() != body) throw IoError("archive: trailing bytes");
  return archive;
}

void write_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  const std::string bytes = serialize_archive(archive);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_archive(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace cnd
