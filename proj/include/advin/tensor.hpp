#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advin {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when the operands of a primitive do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on malformed serialized input.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major float32 array.
///
/// A Tensor is a plain value: copies are deep and independent. The autograd
/// tape keeps its own copies, so mutating a Tensor after handing it to a tape
/// never changes a recorded computation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  const float* raw() const { return data_.data(); }
  float* raw() { return data_.data(); }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  /// Row i along axis 0 with the leading axis dropped.
  Tensor row(std::size_t i) const;

  bool all_finite() const;
  float abs_max() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

// Serialized record: "ADVN", u8 version (1), u8 rank, rank x u32 LE dims,
// then numel x float32 LE.
inline constexpr char kTensorMagic[4] = {'A', 'D', 'V', 'N'};
inline constexpr std::uint8_t kTensorVersion = 1;

void append_tensor_record(std::vector<std::uint8_t>& out, const Tensor& t);
std::vector<std::uint8_t> serialize_tensor(const Tensor& t);
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
/// Parses one record at `offset`, advancing it past the record.
Tensor parse_tensor_record(std::span<const std::uint8_t> bytes,
                           std::size_t& offset);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace advin
