#include "advin/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "advin/rng.hpp"

namespace advin {
namespace {

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor({3, 0}), ShapeError);
}

TEST(Tensor, CopiesAreIndependent) {
  Tensor a = Tensor::full({3}, 1.0f);
  Tensor b = a;
  b[0] = 5.0f;
  EXPECT_EQ(a[0], 1.0f);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = a.reshaped({3, 2});
  EXPECT_EQ(b.shape(), (Shape{3, 2}));
  EXPECT_EQ(b[5], 6.0f);
  EXPECT_THROW(a.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, SliceRowsAndRow) {
  Tensor a({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor s = a.slice_rows(1, 3);
  EXPECT_EQ(s, Tensor({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(a.row(2), Tensor({2}, {5, 6}));
  EXPECT_THROW(a.slice_rows(2, 4), ShapeError);
  EXPECT_THROW(a.slice_rows(2, 2), ShapeError);
}

TEST(Tensor, StackAddsLeadingAxis) {
  std::vector<Tensor> rows{Tensor({2}, {1, 2}), Tensor({2}, {3, 4})};
  EXPECT_EQ(stack(rows), Tensor({2, 2}, {1, 2, 3, 4}));
  rows.push_back(Tensor({3}));
  EXPECT_THROW(stack(rows), ShapeError);
}

TEST(Tensor, FiniteAndAbsMax) {
  Tensor t({3}, {-4.0f, 1.0f, 2.0f});
  EXPECT_TRUE(t.all_finite());
  EXPECT_EQ(t.abs_max(), 4.0f);
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Serialization, RecordLayout) {
  Tensor t({2}, {1.0f, -2.0f});
  const auto bytes = serialize_tensor(t);
  // magic, version, rank, one u32 dim, two floats
  ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 4 + 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "ADVN");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 1);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[7], 0);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 10, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Serialization, RoundTripIsBitExact) {
  Rng rng(3);
  Tensor t({2, 3, 4});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor(ss), t);

  std::vector<std::uint8_t> two;
  append_tensor_record(two, t);
  append_tensor_record(two, Tensor::scalar(7.0f));
  std::size_t offset = 0;
  EXPECT_EQ(parse_tensor_record(two, offset), t);
  EXPECT_EQ(parse_tensor_record(two, offset), Tensor::scalar(7.0f));
  EXPECT_EQ(offset, two.size());
}

TEST(Serialization, RejectsMalformedRecords) {
  auto bytes = serialize_tensor(Tensor({2}, {1, 2}));
  std::size_t offset = 0;
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(parse_tensor_record(truncated, offset), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  offset = 0;
  EXPECT_THROW(parse_tensor_record(bad_magic, offset), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  offset = 0;
  EXPECT_THROW(parse_tensor_record(bad_version, offset), FormatError);
}

TEST(Hash, Fnv1aReferenceVectors) {
  // Published FNV-1a 64 test vectors.
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  const std::string a = "a";
  EXPECT_EQ(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), a.size())),
            0xaf63dc4c8601ec8cULL);
  const std::string foobar = "foobar";
  EXPECT_EQ(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(foobar.data()), foobar.size())),
            0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, "x", 0), derive_seed(1, "x", 0));
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 4; ++s)
    for (const char* name : {"a", "b", "pgd-init"})
      for (std::uint64_t i = 0; i < 8; ++i) seen.insert(derive_seed(s, name, i));
  EXPECT_EQ(seen.size(), 4u * 3 * 8);
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng rng(11);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform(-2.0, 3.0);
    ASSERT_GE(u, -2.0);
    ASSERT_LT(u, 3.0);
    sum += u;
    ASSERT_LT(rng.below(7), 7u);
  }
  EXPECT_NEAR(sum / 20000.0, 0.5, 0.05);
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  Rng rng(5);
  rng.shuffle(std::span<int>(v));
  std::set<int> s(v.begin(), v.end());
  EXPECT_EQ(s.size(), 50u);
  std::vector<int> again(50);
  for (int i = 0; i < 50; ++i) again[i] = i;
  Rng rng2(5);
  rng2.shuffle(std::span<int>(again));
  EXPECT_EQ(v, again);
}

}  // namespace
}  // namespace advin
