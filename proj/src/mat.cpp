#include "mlattn/mat.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>
#include <zlib.h>

#include "mlattn/error.hpp"

namespace mlattn::mat {

namespace {

enum MiType : std::uint32_t {
  miINT8 = 1,
  miUINT8 = 2,
  miINT16 = 3,
  miUINT16 = 4,
  miINT32 = 5,
  miUINT32 = 6,
  miSINGLE = 7,
  miDOUBLE = 9,
  miINT64 = 12,
  miUINT64 = 13,
  miMATRIX = 14,
  miCOMPRESSED = 15,
  miUTF8 = 16,
  miUTF16 = 17,
  miUTF32 = 18,
};

enum MxClass : std::uint32_t {
  mxCELL = 1,
  mxSTRUCT = 2,
  mxCHAR = 4,
  mxDOUBLE = 6,
  mxUINT64 = 15,
};

constexpr std::size_t kHeaderBytes = 128;

struct Element {
  std::uint32_t type = 0;
  const unsigned char* data = nullptr;
  std::size_t size = 0;
};

class Reader {
 public:
  Reader(const unsigned char* begin, std::size_t size, const std::string& origin)
      : p_(begin), end_(begin + size), origin_(origin) {}

  bool done() const { return p_ >= end_; }

  Element next() {
    need(8, "element tag");
    std::uint32_t type = load<std::uint32_t>(p_);
    Element e;
    if ((type >> 16) != 0) {
      // Small data element: size in the upper half, payload in the tag.
      e.type = type & 0xffff;
      e.size = type >> 16;
      if (e.size > 4) fail(fmt::format("small element of {} bytes", e.size));
      e.data = p_ + 4;
      p_ += 8;
      return e;
    }
    e.type = type;
    e.size = load<std::uint32_t>(p_ + 4);
    p_ += 8;
    need(e.size, "element payload");
    e.data = p_;
    const std::size_t padded = e.type == miCOMPRESSED ? e.size : (e.size + 7) / 8 * 8;
    p_ += std::min<std::size_t>(padded, static_cast<std::size_t>(end_ - p_));
    return e;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(fmt::format("{}: malformed MAT-file ({})", origin_, what));
  }

  template <typename T>
  static T load(const unsigned char* at) {
    T v;
    std::memcpy(&v, at, sizeof(T));
    return v;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (static_cast<std::size_t>(end_ - p_) < n) fail(fmt::format("truncated {}", what));
  }

  const unsigned char* p_;
  const unsigned char* end_;
  const std::string& origin_;
};

std::size_t width_of(std::uint32_t type) {
  switch (type) {
    case miINT8:
    case miUINT8:
    case miUTF8:
      return 1;
    case miINT16:
    case miUINT16:
    case miUTF16:
      return 2;
    case miINT32:
    case miUINT32:
    case miSINGLE:
    case miUTF32:
      return 4;
    case miDOUBLE:
    case miINT64:
    case miUINT64:
      return 8;
    default:
      return 0;
  }
}

double value_at(std::uint32_t type, const unsigned char* at) {
  switch (type) {
    case miINT8:
      return Reader::load<std::int8_t>(at);
    case miUINT8:
    case miUTF8:
      return Reader::load<std::uint8_t>(at);
    case miINT16:
      return Reader::load<std::int16_t>(at);
    case miUINT16:
    case miUTF16:
      return Reader::load<std::uint16_t>(at);
    case miINT32:
      return Reader::load<std::int32_t>(at);
    case miUINT32:
    case miUTF32:
      return Reader::load<std::uint32_t>(at);
    case miSINGLE:
      return Reader::load<float>(at);
    case miDOUBLE:
      return Reader::load<double>(at);
    case miINT64:
      return static_cast<double>(Reader::load<std::int64_t>(at));
    case miUINT64:
      return static_cast<double>(Reader::load<std::uint64_t>(at));
    default:
      return 0.0;
  }
}

std::vector<double> widen(const Element& e, const Reader& r) {
  const std::size_t w = width_of(e.type);
  if (w == 0) r.fail(fmt::format("numeric data of element type {}", e.type));
  if (e.size % w != 0) r.fail("numeric payload not a whole number of values");
  std::vector<double> out(e.size / w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value_at(e.type, e.data + i * w);
  return out;
}

std::vector<unsigned char> inflate_all(const Element& e, const std::string& origin) {
  std::vector<unsigned char> out;
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw FormatError(fmt::format("{}: zlib initialization failed", origin));
  zs.next_in = const_cast<unsigned char*>(e.data);
  zs.avail_in = static_cast<uInt>(e.size);
  unsigned char chunk[1 << 15];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError(fmt::format("{}: corrupt compressed MAT element (zlib error {})", origin, rc));
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw FormatError(fmt::format("{}: truncated compressed MAT element", origin));
    }
  }
  inflateEnd(&zs);
  return out;
}

Array parse_matrix(const Element& m, const std::string& origin);

// Cell and struct members are full miMATRIX elements (possibly empty).
Array parse_member(Reader& r, const std::string& origin) {
  const Element e = r.next();
  if (e.type != miMATRIX) r.fail(fmt::format("expected a matrix member, found element type {}", e.type));
  return parse_matrix(e, origin);
}

Array parse_matrix(const Element& m, const std::string& origin) {
  Array a;
  if (m.size == 0) {
    a.kind = ArrayClass::numeric;
    a.dims = {0, 0};
    return a;
  }
  Reader r(m.data, m.size, origin);
  const Element flags = r.next();
  if (flags.type != miUINT32 || flags.size < 8) r.fail("array flags");
  const std::uint32_t word = Reader::load<std::uint32_t>(flags.data);
  const std::uint32_t cls = word & 0xff;
  const Element dims = r.next();
  for (double d : widen(dims, r)) a.dims.push_back(static_cast<std::size_t>(d));
  const Element name = r.next();
  a.name.assign(reinterpret_cast<const char*>(name.data), name.size);

  if (cls == mxCELL) {
    a.kind = ArrayClass::cell;
    for (std::size_t i = 0; i < a.numel(); ++i) a.elements.push_back(parse_member(r, origin));
  } else if (cls == mxSTRUCT) {
    a.kind = ArrayClass::structure;
    const Element len = r.next();
    const auto name_len = static_cast<std::size_t>(widen(len, r).at(0));
    const Element names = r.next();
    if (name_len == 0 || names.size % name_len != 0) r.fail("struct field names");
    for (std::size_t off = 0; off < names.size; off += name_len) {
      const char* s = reinterpret_cast<const char*>(names.data + off);
      a.fields.emplace_back(s, strnlen(s, name_len));
    }
    for (std::size_t i = 0; i < a.numel() * a.fields.size(); ++i) a.elements.push_back(parse_member(r, origin));
  } else if (cls == mxCHAR || (cls >= mxDOUBLE && cls <= mxUINT64)) {
    a.kind = cls == mxCHAR ? ArrayClass::character : ArrayClass::numeric;
    if (!r.done()) a.real = widen(r.next(), r);
    // An imaginary part, if present, is ignored.
    if (a.real.size() != a.numel() && !(a.numel() == 0 && a.real.empty())) {
      r.fail(fmt::format("array '{}' declares {} values but stores {}", a.name, a.numel(), a.real.size()));
    }
  } else {
    a.kind = ArrayClass::unsupported;
  }
  return a;
}

}  // namespace

std::size_t Array::numel() const {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return dims.empty() ? 0 : n;
}

const Array* Array::field(const std::string& name, std::size_t index) const {
  if (kind != ArrayClass::structure) return nullptr;
  for (std::size_t f = 0; f < fields.size(); ++f) {
    if (fields[f] == name) {
      const std::size_t at = index * fields.size() + f;
      return at < elements.size() ? &elements[at] : nullptr;
    }
  }
  return nullptr;
}

std::vector<Array> read_bytes(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < kHeaderBytes) throw FormatError(fmt::format("{}: too short for a MAT-file header", origin));
  if (std::memcmp(bytes.data(), "MATLAB 7.3", 10) == 0) {
    throw FormatError(fmt::format("{}: MAT v7.3 (HDF5) files are not supported; re-save with -v7", origin));
  }
  if (bytes[126] != 'I' || bytes[127] != 'M') {
    throw FormatError(fmt::format("{}: not a little-endian Level 5 MAT-file", origin));
  }
  std::vector<Array> out;
  Reader r(bytes.data() + kHeaderBytes, bytes.size() - kHeaderBytes, origin);
  while (!r.done()) {
    const Element e = r.next();
    if (e.type == miCOMPRESSED) {
      const std::vector<unsigned char> raw = inflate_all(e, origin);
      Reader inner(raw.data(), raw.size(), origin);
      while (!inner.done()) {
        const Element m = inner.next();
        if (m.type == miMATRIX) out.push_back(parse_matrix(m, origin));
      }
    } else if (e.type == miMATRIX) {
      out.push_back(parse_matrix(e, origin));
    }
  }
  return out;
}

std::vector<Array> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open MAT-file '{}'", path.string()));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_bytes(bytes, path.string());
}

}  // namespace mlattn::mat
