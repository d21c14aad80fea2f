#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advin/tensor.hpp"

namespace advin {

enum class Split { kTrain, kTest };
std::string to_string(Split split);

/// Images (N,C,H,W) in [0,1] with integer labels in [0,K). Immutable.
class LabeledDataset {
 public:
  LabeledDataset(Tensor images, std::vector<int> labels, std::size_t classes, Split split,
                 std::vector<std::size_t> source_indices = {});

  std::size_t size() const { return labels_.size(); }
  std::size_t classes() const { return classes_; }
  Split split() const { return split_; }
  const Tensor& images() const { return images_; }
  const std::vector<int>& labels() const { return labels_; }
  Shape image_shape() const { return Shape(images_.shape().begin() + 1, images_.shape().end()); }
  Tensor image(std::size_t i) const { return images_.row(i); }
  int label(std::size_t i) const { return labels_.at(i); }
  /// Indices into the parent dataset for subsets; empty otherwise.
  const std::vector<std::size_t>& source_indices() const { return source_indices_; }

  /// Gathers the given rows into a batch.
  std::pair<Tensor, std::vector<int>> batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts() const;

  /// FNV-1a over serialize(): stable across platforms.
  std::uint64_t hash() const { return hash_; }
  /// Images record, labels record (float32), class-count record.
  std::vector<std::uint8_t> serialize() const;

 private:
  Tensor images_;
  std::vector<int> labels_;
  std::size_t classes_;
  Split split_;
  std::vector<std::size_t> source_indices_;
  std::uint64_t hash_ = 0;
};

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path, Split split = Split::kTrain);

struct TrainTest {
  LabeledDataset train;
  LabeledDataset test;
};

// CIFAR-10 binary layout: per record one label byte, then 1024 R, 1024 G and
// 1024 B bytes (row-major 32x32 planes).
inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;

/// One batch file. Throws on missing file or a size that is not a whole
/// number of records.
LabeledDataset read_cifar10_batch(const std::filesystem::path& file, Split split);
/// data_batch_1..5.bin and test_batch.bin under `dir`.
TrainTest load_cifar10(const std::filesystem::path& dir);

struct GlyphSetConfig {
  std::size_t classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t side = 16;
  std::size_t channels = 1;
  double noise_std = 0.1;
  /// Glyphs shift by a uniform integer offset in [-max_offset, max_offset]
  /// on each axis; 0 freezes placement.
  std::size_t max_offset = 2;
  double background = 0.2;
  double foreground = 0.4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Number of distinct glyph templates available.
std::size_t glyph_template_count();
/// Noise-free template for class k at a given offset, (C,side,side).
Tensor render_glyph(const GlyphSetConfig& cfg, std::size_t k, int dx, int dy);

/// Procedural shapes dataset. Example i has class i % K; train and test come
/// from disjoint random streams.
TrainTest make_glyphset(const GlyphSetConfig& cfg);

/// Class-balanced random subset, kept in original order. Rows whose entry in
/// `allowed` is false are never drawn.
LabeledDataset subset(const LabeledDataset& ds, std::size_t per_class, std::uint64_t seed,
                      const std::vector<bool>* allowed = nullptr);

}  // namespace advin
