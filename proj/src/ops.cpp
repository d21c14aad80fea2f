#include "advin/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace advin {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Eigen::Index;

[[noreturn]] void shape_mismatch(const char* op, const std::string& what, const Shape& a,
                           const Shape& b) {
  throw ShapeError(std::string(op) + ": " + what + " " + to_string(a) + " vs " +
                   to_string(b));
}

void require_rank(const char* op, Var v, std::size_t rank) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + to_string(v.shape()));
  }
}

Index idx(std::size_t v) { return static_cast<Index>(v); }

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t ckk() const { return c * kh * kw; }
  std::size_t plane() const { return oh * ow; }
};

// col has shape (C*KH*KW, N*OH*OW).
void im2col(const ConvGeometry& g, const float* x, float* col) {
  const std::size_t cols = g.n * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        float* dst = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const float* src = x + (n * g.c + c) * g.h * g.w;
          float* row = dst + n * g.plane();
          for (std::size_t y = 0; y < g.oh; ++y) {
            const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
            for (std::size_t xo = 0; xo < g.ow; ++xo) {
              const long ix = static_cast<long>(xo * g.stride + j) - static_cast<long>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                  ix < static_cast<long>(g.w);
              row[y * g.ow + xo] =
                  inside ? src[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)]
                         : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, float* dx) {
  const std::size_t cols = g.n * g.plane();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const float* src = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          float* dst = dx + (n * g.c + c) * g.h * g.w;
          const float* row = src + n * g.plane();
          for (std::size_t y = 0; y < g.oh; ++y) {
            const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t xo = 0; xo < g.ow; ++xo) {
              const long ix = static_cast<long>(xo * g.stride + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              dst[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] +=
                  row[y * g.ow + xo];
            }
          }
        }
      }
    }
  }
}

Var pool2d(Var x, std::size_t kernel, std::size_t stride, bool is_max) {
  const char* op = is_max ? "max_pool2d" : "avg_pool2d";
  require_rank(op, x, 4);
  const Shape& s = x.shape();
  if (kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3]) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(kernel) +
                     " does not fit input " + to_string(s));
  }
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  Tensor out({n, c, oh, ow});
  const float* in = x.value().raw();
  float* o = out.raw();
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (is_max) argmax->resize(out.numel());
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = in + plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t out_i = (plane * oh + y) * ow + xo;
        if (is_max) {
          std::size_t best = (y * stride) * w + xo * stride;
          for (std::size_t i = 0; i < kernel; ++i) {
            for (std::size_t j = 0; j < kernel; ++j) {
              const std::size_t k = (y * stride + i) * w + xo * stride + j;
              if (src[k] > src[best]) best = k;
            }
          }
          o[out_i] = src[best];
          (*argmax)[out_i] = plane * h * w + best;
        } else {
          float acc = 0.0f;
          for (std::size_t i = 0; i < kernel; ++i) {
            for (std::size_t j = 0; j < kernel; ++j) {
              acc += src[(y * stride + i) * w + xo * stride + j];
            }
          }
          o[out_i] = acc * inv;
        }
      }
    }
  }
  return x.tape().record(
      op, std::move(out), {x},
      [=](const Tensor& g, std::span<Tensor* const> grads) {
        Tensor* dx = grads[0];
        if (!dx) return;
        const float* go = g.raw();
        float* d = dx->raw();
        if (is_max) {
          for (std::size_t k = 0; k < argmax->size(); ++k) d[(*argmax)[k]] += go[k];
          return;
        }
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          float* dst = d + plane * h * w;
          for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const float v = go[(plane * oh + y) * ow + xo] * inv;
              for (std::size_t i = 0; i < kernel; ++i) {
                for (std::size_t j = 0; j < kernel; ++j) {
                  dst[(y * stride + i) * w + xo * stride + j] += v;
                }
              }
            }
          }
        }
      });
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opts) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1]) shape_mismatch("conv2d", "input channels differ, input/weight", xs, ws);
  if (opts.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (xs[2] + 2 * opts.padding < ws[2] || xs[3] + 2 * opts.padding < ws[3]) {
    shape_mismatch("conv2d", "kernel larger than padded input, input/weight", xs, ws);
  }
  if (bias.valid() && bias.shape() != Shape{ws[0]}) {
    shape_mismatch("conv2d", "bias length differs from output channels, bias/weight",
             bias.shape(), ws);
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0,
                 opts.stride, opts.padding};
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  const std::size_t cols = g.n * g.plane();
  auto col = std::make_shared<std::vector<float>>(g.ckk() * cols);
  im2col(g, x.value().raw(), col->data());

  MatR prod = CMapR(weight.value().raw(), idx(g.o), idx(g.ckk())) *
              CMapR(col->data(), idx(g.ckk()), idx(cols));
  Tensor out({g.n, g.o, g.oh, g.ow});
  const float* b = bias.valid() ? bias.value().raw() : nullptr;
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.o; ++o) {
      float* dst = out.raw() + (n * g.o + o) * g.plane();
      const float* src = prod.data() + o * cols + n * g.plane();
      const float bo = b ? b[o] : 0.0f;
      for (std::size_t p = 0; p < g.plane(); ++p) dst[p] = src[p] + bo;
    }
  }

  std::vector<Var> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  const Tensor& wv = weight.value();
  auto wcopy = std::make_shared<Tensor>(wv);
  return x.tape().record(
      "conv2d", std::move(out), std::move(parents),
      [g, col, wcopy](const Tensor& grad, std::span<Tensor* const> grads) {
        const std::size_t cols = g.n * g.plane();
        // Gather grad (N,O,P) into (O, N*P).
        MatR gm(idx(g.o), idx(cols));
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t o = 0; o < g.o; ++o) {
            const float* src = grad.raw() + (n * g.o + o) * g.plane();
            std::copy(src, src + g.plane(), gm.data() + o * cols + n * g.plane());
          }
        }
        if (grads[1]) {
          MapR(grads[1]->raw(), idx(g.o), idx(g.ckk())).noalias() +=
              gm * CMapR(col->data(), idx(g.ckk()), idx(cols)).transpose();
        }
        if (grads.size() > 2 && grads[2]) {
          float* db = grads[2]->raw();
          for (std::size_t o = 0; o < g.o; ++o) {
            float acc = 0.0f;
            const float* r = gm.data() + o * cols;
            for (std::size_t k = 0; k < cols; ++k) acc += r[k];
            db[o] += acc;
          }
        }
        if (grads[0]) {
          MatR dcol = CMapR(wcopy->raw(), idx(g.o), idx(g.ckk())).transpose() * gm;
          col2im_add(g, dcol.data(), grads[0]->raw());
        }
      });
}

Var linear(Var x, Var weight, Var bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs[1] != ws[1]) shape_mismatch("linear", "feature size differs, input/weight", xs, ws);
  if (bias.valid() && bias.shape() != Shape{ws[0]}) {
    shape_mismatch("linear", "bias length differs from outputs, bias/weight", bias.shape(), ws);
  }
  const std::size_t n = xs[0], d = xs[1], o = ws[0];
  Tensor out({n, o});
  MapR(out.raw(), idx(n), idx(o)).noalias() =
      CMapR(x.value().raw(), idx(n), idx(d)) *
      CMapR(weight.value().raw(), idx(o), idx(d)).transpose();
  if (bias.valid()) {
    const float* b = bias.value().raw();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < o; ++j) out[i * o + j] += b[j];
    }
  }
  std::vector<Var> parents{x, weight};
  if (bias.valid()) parents.push_back(bias);
  auto xv = std::make_shared<Tensor>(x.value());
  auto wv = std::make_shared<Tensor>(weight.value());
  return x.tape().record(
      "linear", std::move(out), std::move(parents),
      [n, d, o, xv, wv](const Tensor& grad, std::span<Tensor* const> grads) {
        CMapR gm(grad.raw(), idx(n), idx(o));
        if (grads[0]) {
          MapR(grads[0]->raw(), idx(n), idx(d)).noalias() +=
              gm * CMapR(wv->raw(), idx(o), idx(d));
        }
        if (grads[1]) {
          MapR(grads[1]->raw(), idx(o), idx(d)).noalias() +=
              gm.transpose() * CMapR(xv->raw(), idx(n), idx(d));
        }
        if (grads.size() > 2 && grads[2]) {
          float* db = grads[2]->raw();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < o; ++j) db[j] += grad[i * o + j];
          }
        }
      });
}

Var relu(Var x) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  auto mask = std::make_shared<std::vector<bool>>(in.numel());
  for (std::size_t i = 0; i < in.numel(); ++i) (*mask)[i] = in[i] > 0.0f;
  return x.tape().record("relu", std::move(out), {x},
                         [mask](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           float* d = grads[0]->raw();
                           for (std::size_t i = 0; i < mask->size(); ++i) {
                             if ((*mask)[i]) d[i] += g[i];
                           }
                         });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  return pool2d(x, kernel, stride, true);
}

Var avg_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  return pool2d(x, kernel, stride, false);
}

Var global_avg_pool(Var x) {
  require_rank("global_avg_pool", x, 4);
  const Shape s = x.shape();
  const std::size_t planes = s[0] * s[1], area = s[2] * s[3];
  Tensor out({s[0], s[1]});
  const float* in = x.value().raw();
  const float inv = 1.0f / static_cast<float>(area);
  for (std::size_t p = 0; p < planes; ++p) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < area; ++k) acc += in[p * area + k];
    out[p] = acc * inv;
  }
  return x.tape().record("global_avg_pool", std::move(out), {x},
                         [planes, area, inv](const Tensor& g,
                                             std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           float* d = grads[0]->raw();
                           for (std::size_t p = 0; p < planes; ++p) {
                             const float v = g[p] * inv;
                             for (std::size_t k = 0; k < area; ++k) d[p * area + k] += v;
                           }
                         });
}

Var flatten(Var x) {
  const Shape s = x.shape();
  if (s.size() < 2) throw ShapeError("flatten: need rank >= 2, got " + to_string(s));
  const std::size_t n = s[0];
  Tensor out = x.value().reshaped({n, x.value().numel() / n});
  return x.tape().record("flatten", std::move(out), {x},
                         [](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           float* d = grads[0]->raw();
                           for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
                         });
}

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) shape_mismatch("add", "operand shapes differ", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b},
                         [](const Tensor& g, std::span<Tensor* const> grads) {
                           for (Tensor* d : grads) {
                             if (!d) continue;
                             for (std::size_t i = 0; i < g.numel(); ++i) (*d)[i] += g[i];
                           }
                         });
}

Var mul(Var a, Var b) {
  if (a.shape() != b.shape()) shape_mismatch("mul", "operand shapes differ", a.shape(), b.shape());
  auto av = std::make_shared<Tensor>(a.value());
  auto bv = std::make_shared<Tensor>(b.value());
  Tensor out = *av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= (*bv)[i];
  return a.tape().record("mul", std::move(out), {a, b},
                         [av, bv](const Tensor& g, std::span<Tensor* const> grads) {
                           if (grads[0]) {
                             for (std::size_t i = 0; i < g.numel(); ++i)
                               (*grads[0])[i] += g[i] * (*bv)[i];
                           }
                           if (grads[1]) {
                             for (std::size_t i = 0; i < g.numel(); ++i)
                               (*grads[1])[i] += g[i] * (*av)[i];
                           }
                         });
}

Var scale(Var x, float factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return x.tape().record("scale", std::move(out), {x},
                         [factor](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (std::size_t i = 0; i < g.numel(); ++i)
                             (*grads[0])[i] += g[i] * factor;
                         });
}

Var sum(Var x) {
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  return x.tape().record("sum", Tensor::scalar(static_cast<float>(acc)), {x},
                         [](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (auto& v : grads[0]->data()) v += g[0];
                         });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                          Reduction reduction) {
  require_rank("softmax_cross_entropy", logits, 2);
  const Shape& s = logits.shape();
  const std::size_t n = s[0], k = s[1];
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + to_string(s));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<Tensor>(softmax_rows(logits.value()));
  const auto rows = cross_entropy_rows(logits.value(), labels);
  double total = 0.0;
  for (float r : rows) total += r;
  const float norm = reduction == Reduction::kMean ? 1.0f / static_cast<float>(n) : 1.0f;
  auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  return logits.tape().record(
      "softmax_cross_entropy", Tensor::scalar(static_cast<float>(total) * norm), {logits},
      [probs, ys, n, k, norm](const Tensor& g, std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        float* d = grads[0]->raw();
        const float scale = g[0] * norm;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const float onehot = static_cast<std::size_t>((*ys)[i]) == j ? 1.0f : 0.0f;
            d[i * k + j] += scale * ((*probs)[i * k + j] - onehot);
          }
        }
      });
}

std::vector<float> cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy_rows: logits " + to_string(logits.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * k;
    const float m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - m));
    out[i] = static_cast<float>(std::log(s) + m - row[labels[i]]);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("argmax_rows: expected rank 2, got " + to_string(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_rows: expected rank 2, got " + to_string(logits.shape()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.raw() + i * k;
    const float m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j] - m)) / s);
    }
  }
  return out;
}

}  // namespace advin
