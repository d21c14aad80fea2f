#include "advin/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "advin/rng.hpp"

namespace advin {

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

LabeledDataset::LabeledDataset(Tensor images, std::vector<int> labels, std::size_t classes,
                               Split split, std::vector<std::size_t> source_indices)
    : images_(std::move(images)),
      labels_(std::move(labels)),
      classes_(classes),
      split_(split),
      source_indices_(std::move(source_indices)) {
  if (images_.rank() != 4) {
    throw ShapeError("dataset: images must be (N,C,H,W), got " + to_string(images_.shape()));
  }
  if (images_.dim(0) != labels_.size()) {
    throw ShapeError("dataset: " + std::to_string(images_.dim(0)) + " images but " +
                     std::to_string(labels_.size()) + " labels");
  }
  if (classes_ < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  for (int y : labels_) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes_) {
      throw std::out_of_range("dataset: label " + std::to_string(y) + " outside [0," +
                              std::to_string(classes_) + ")");
    }
  }
  for (float v : images_.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("dataset: pixel outside [0,1] or not finite");
    }
  }
  hash_ = fnv1a64(serialize());
}

std::pair<Tensor, std::vector<int>> LabeledDataset::batch(
    std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::invalid_argument("dataset: empty batch");
  const std::size_t per = images_.numel() / size();
  Shape s = images_.shape();
  s[0] = indices.size();
  std::vector<float> data(indices.size() * per);
  std::vector<int> ys(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    if (k >= size()) throw std::out_of_range("dataset: index " + std::to_string(k));
    std::copy(images_.raw() + k * per, images_.raw() + (k + 1) * per, data.begin() + i * per);
    ys[i] = labels_[k];
  }
  return {Tensor(std::move(s), std::move(data)), std::move(ys)};
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> c(classes_, 0);
  for (int y : labels_) ++c[static_cast<std::size_t>(y)];
  return c;
}

std::vector<std::uint8_t> LabeledDataset::serialize() const {
  std::vector<std::uint8_t> out;
  append_tensor_record(out, images_);
  std::vector<float> ys(labels_.begin(), labels_.end());
  append_tensor_record(out, Tensor({labels_.size()}, std::move(ys)));
  append_tensor_record(out, Tensor::scalar(static_cast<float>(classes_)));
  return out;
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
  const auto bytes = ds.serialize();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LabeledDataset load_dataset(const std::filesystem::path& path, Split split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  std::size_t off = 0;
  Tensor images = parse_tensor_record(bytes, off);
  const Tensor ys = parse_tensor_record(bytes, off);
  const Tensor k = parse_tensor_record(bytes, off);
  if (off != bytes.size()) throw FormatError(path.string() + ": trailing bytes");
  std::vector<int> labels(ys.numel());
  for (std::size_t i = 0; i < ys.numel(); ++i) labels[i] = static_cast<int>(ys[i]);
  return LabeledDataset(std::move(images), std::move(labels), static_cast<std::size_t>(k[0]),
                        split);
}

LabeledDataset read_cifar10_batch(const std::filesystem::path& file, Split split) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("missing CIFAR-10 batch file " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(file.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a whole number of " + std::to_string(kCifarRecordBytes) +
                      "-byte records");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  const std::size_t per = kCifarRecordBytes - 1;
  std::vector<float> pixels(n * per);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(file.string() + ": record " + std::to_string(i) + " has label " +
                        std::to_string(rec[0]));
    }
    labels[i] = rec[0];
    for (std::size_t k = 0; k < per; ++k) pixels[i * per + k] = static_cast<float>(rec[1 + k]) / 255.0f;
  }
  return LabeledDataset(Tensor({n, 3, kCifarSide, kCifarSide}, std::move(pixels)),
                        std::move(labels), 10, split);
}

namespace {

LabeledDataset concat(const std::vector<LabeledDataset>& parts, Split split) {
  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& p : parts) {
    pixels.insert(pixels.end(), p.images().data().begin(), p.images().data().end());
    labels.insert(labels.end(), p.labels().begin(), p.labels().end());
  }
  Shape s = parts.front().images().shape();
  s[0] = labels.size();
  return LabeledDataset(Tensor(std::move(s), std::move(pixels)), std::move(labels),
                        parts.front().classes(), split);
}

}  // namespace

TrainTest load_cifar10(const std::filesystem::path& dir) {
  std::vector<LabeledDataset> train;
  for (int b = 1; b <= 5; ++b) {
    train.push_back(read_cifar10_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                                       Split::kTrain));
  }
  return {concat(train, Split::kTrain), read_cifar10_batch(dir / "test_batch.bin", Split::kTest)};
}

// ---------------------------------------------------------------------------
// GlyphSet

namespace {

// Templates are predicates on the unit square (u right, v down).
using Glyph = std::function<bool(double u, double v)>;

bool hbar(double u, double v, double at) { return std::fabs(v - at) < 0.09 && u > 0.2 && u < 0.8; }
bool vbar(double u, double v, double at) { return std::fabs(u - at) < 0.09 && v > 0.2 && v < 0.8; }
bool in_box(double u, double v) { return u > 0.2 && u < 0.8 && v > 0.2 && v < 0.8; }
double radius(double u, double v) { return std::hypot(u - 0.5, v - 0.5); }

const std::vector<Glyph>& glyphs() {
  static const std::vector<Glyph> g = {
      [](double u, double v) { return hbar(u, v, 0.5); },
      [](double u, double v) { return vbar(u, v, 0.5); },
      [](double u, double v) { return hbar(u, v, 0.5) || vbar(u, v, 0.5); },
      [](double u, double v) {
        return in_box(u, v) && (std::fabs(u - v) < 0.08 || std::fabs(u + v - 1.0) < 0.08);
      },
      [](double u, double v) { return radius(u, v) > 0.18 && radius(u, v) < 0.3; },
      [](double u, double v) { return u > 0.32 && u < 0.68 && v > 0.32 && v < 0.68; },
      [](double u, double v) {
        return in_box(u, v) && !(u > 0.3 && u < 0.7 && v > 0.3 && v < 0.7);
      },
      [](double u, double v) {
        return v > 0.25 && v < 0.75 && std::fabs(u - 0.5) < (v - 0.25) * 0.6;
      },
      [](double u, double v) { return vbar(u, v, 0.3) || (hbar(u, v, 0.7) && u < 0.8); },
      [](double u, double v) { return hbar(u, v, 0.3) || (vbar(u, v, 0.5) && v > 0.3); },
      [](double u, double v) { return radius(u, v) < 0.2; },
      [](double u, double v) { return hbar(u, v, 0.32) || hbar(u, v, 0.68); },
      [](double u, double v) { return vbar(u, v, 0.32) || vbar(u, v, 0.68); },
      [](double u, double v) {
        return in_box(u, v) && std::fabs(u + v - 1.0) < 0.08;
      },
  };
  return g;
}

}  // namespace

std::size_t glyph_template_count() { return glyphs().size(); }

void GlyphSetConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("glyphset: need at least 2 classes");
  if (classes > glyph_template_count()) {
    throw std::invalid_argument("glyphset: " + std::to_string(classes) + " classes requested, " +
                                std::to_string(glyph_template_count()) + " templates available");
  }
  if (side < 8) throw std::invalid_argument("glyphset: side must be at least 8");
  if (channels == 0) throw std::invalid_argument("glyphset: zero channels");
  if (train_per_class == 0 || test_per_class == 0) {
    throw std::invalid_argument("glyphset: per-class counts must be positive");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("glyphset: negative noise");
  if (max_offset * 2 >= side) throw std::invalid_argument("glyphset: offset too large for side");
  if (!(background >= 0.0 && foreground <= 1.0 && background <= 1.0 && foreground >= 0.0)) {
    throw std::invalid_argument("glyphset: intensities must lie in [0,1]");
  }
}

Tensor render_glyph(const GlyphSetConfig& cfg, std::size_t k, int dx, int dy) {
  const Glyph& glyph = glyphs().at(k);
  const std::size_t s = cfg.side;
  Tensor img({cfg.channels, s, s});
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      const double u = (static_cast<double>(c) - dx + 0.5) / static_cast<double>(s);
      const double v = (static_cast<double>(r) - dy + 0.5) / static_cast<double>(s);
      const float value = static_cast<float>(glyph(u, v) ? cfg.foreground : cfg.background);
      for (std::size_t ch = 0; ch < cfg.channels; ++ch) img[(ch * s + r) * s + c] = value;
    }
  }
  return img;
}

namespace {

LabeledDataset render_split(const GlyphSetConfig& cfg, std::size_t per_class, Split split) {
  const std::size_t n = per_class * cfg.classes;
  const std::size_t per = cfg.channels * cfg.side * cfg.side;
  std::vector<float> pixels(n * per);
  std::vector<int> labels(n);
  const std::string stream = split == Split::kTrain ? "glyph-train" : "glyph-test";
  const int span = static_cast<int>(cfg.max_offset);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed, stream, i));
    const std::size_t k = i % cfg.classes;
    const int dx = static_cast<int>(rng.below(static_cast<std::size_t>(2 * span + 1))) - span;
    const int dy = static_cast<int>(rng.below(static_cast<std::size_t>(2 * span + 1))) - span;
    const Tensor img = render_glyph(cfg, k, dx, dy);
    for (std::size_t p = 0; p < per; ++p) {
      double v = img[p];
      if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
      pixels[i * per + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    labels[i] = static_cast<int>(k);
  }
  return LabeledDataset(Tensor({n, cfg.channels, cfg.side, cfg.side}, std::move(pixels)),
                        std::move(labels), cfg.classes, split);
}

}  // namespace

TrainTest make_glyphset(const GlyphSetConfig& cfg) {
  cfg.validate();
  return {render_split(cfg, cfg.train_per_class, Split::kTrain),
          render_split(cfg, cfg.test_per_class, Split::kTest)};
}

LabeledDataset subset(const LabeledDataset& ds, std::size_t per_class, std::uint64_t seed,
                      const std::vector<bool>* allowed) {
  if (allowed && allowed->size() != ds.size()) {
    throw std::invalid_argument("subset: mask length differs from dataset size");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.classes());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (allowed && !(*allowed)[i]) continue;
    by_class[static_cast<std::size_t>(ds.label(i))].push_back(i);
  }
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < ds.classes(); ++k) {
    auto& pool = by_class[k];
    if (pool.size() < per_class) {
      throw std::invalid_argument("subset: class " + std::to_string(k) + " has " +
                                  std::to_string(pool.size()) + " examples, " +
                                  std::to_string(per_class) + " requested");
    }
    Rng rng(derive_seed(seed, "subset", k));
    rng.shuffle(std::span<std::size_t>(pool));
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<long>(per_class));
  }
  std::sort(chosen.begin(), chosen.end());
  auto [images, labels] = ds.batch(chosen);
  return LabeledDataset(std::move(images), std::move(labels), ds.classes(), ds.split(),
                        std::move(chosen));
}

}  // namespace advin
