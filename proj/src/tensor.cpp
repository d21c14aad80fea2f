#include "advin/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace advin {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");
static_assert(sizeof(float) == 4);

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor: rank must be at least 1");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " holds " +
                     std::to_string(shape_numel(shape_)) + " elements, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (rank() == 0 || begin >= end || end > shape_[0]) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") invalid for " + to_string(shape_));
  }
  const std::size_t stride = numel() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s),
                std::vector<float>(data_.begin() + begin * stride,
                                   data_.begin() + end * stride));
}

Tensor Tensor::row(std::size_t i) const {
  if (rank() < 2) throw ShapeError("row: need rank >= 2, got " + to_string(shape_));
  Tensor r = slice_rows(i, i + 1);
  return r.reshaped(Shape(shape_.begin() + 1, shape_.end()));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

float Tensor::abs_max() const {
  float m = 0.0f;
  for (float v : data_) m = std::max(m, std::fabs(v));
  return m;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  const Shape& inner = items.front().shape();
  Shape s{items.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  std::vector<float> data;
  data.reserve(shape_numel(s));
  for (const auto& t : items) {
    if (t.shape() != inner) {
      throw ShapeError("stack: shape " + to_string(t.shape()) +
                       " does not match " + to_string(inner));
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(s), std::move(data));
}

void append_tensor_record(std::vector<std::uint8_t>& out, const Tensor& t) {
  if (t.rank() > 255) throw ShapeError("serialize: rank exceeds 255");
  out.insert(out.end(), kTensorMagic, kTensorMagic + 4);
  out.push_back(kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    const auto v = static_cast<std::uint32_t>(d);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.raw());
  out.insert(out.end(), bytes, bytes + t.numel() * sizeof(float));
}

std::vector<std::uint8_t> serialize_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out;
  append_tensor_record(out, t);
  return out;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  const auto bytes = serialize_tensor(t);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

Tensor parse_tensor_record(std::span<const std::uint8_t> bytes,
                           std::size_t& offset) {
  auto need = [&](std::size_t n) {
    if (offset + n > bytes.size()) throw FormatError("tensor record truncated");
  };
  need(6);
  if (std::memcmp(bytes.data() + offset, kTensorMagic, 4) != 0) {
    throw FormatError("tensor record: bad magic");
  }
  if (bytes[offset + 4] != kTensorVersion) {
    throw FormatError("tensor record: unsupported version " +
                      std::to_string(bytes[offset + 4]));
  }
  const std::size_t rank = bytes[offset + 5];
  offset += 6;
  need(rank * 4);
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t{bytes[offset + b]} << (8 * b);
    shape[i] = v;
    offset += 4;
  }
  if (rank == 0) throw FormatError("tensor record: rank 0");
  const std::size_t n = shape_numel(shape);
  need(n * sizeof(float));
  std::vector<float> data(n);
  std::memcpy(data.data(), bytes.data() + offset, n * sizeof(float));
  offset += n * sizeof(float);
  return Tensor(std::move(shape), std::move(data));
}

Tensor read_tensor(std::istream& is) {
  std::uint8_t head[6];
  if (!is.read(reinterpret_cast<char*>(head), 6)) {
    throw FormatError("tensor record truncated");
  }
  std::vector<std::uint8_t> buf(head, head + 6);
  const std::size_t rank = head[5];
  buf.resize(6 + rank * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data() + 6),
               static_cast<std::streamsize>(rank * 4))) {
    throw FormatError("tensor record truncated");
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= std::uint32_t{buf[6 + i * 4 + b]} << (8 * b);
    n *= v;
  }
  const std::size_t header = buf.size();
  buf.resize(header + n * sizeof(float));
  if (!is.read(reinterpret_cast<char*>(buf.data() + header),
               static_cast<std::streamsize>(n * sizeof(float)))) {
    throw FormatError("tensor record truncated");
  }
  std::size_t offset = 0;
  return parse_tensor_record(buf, offset);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return s;
}

}  // namespace advin
