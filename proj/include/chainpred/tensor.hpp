#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainpred/rng.hpp"

namespace chainpred {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense float64 tensor, row-major. 4-D layout is (batch, channels, height,
// width). grad is allocated for parameters and for every activation created
// inside a Graph.
struct Tensor {
  std::vector<int> dims;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::size_t numel_of(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("non-positive dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline TensorPtr tensor(std::vector<int> dims, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  t->data.assign(numel_of(dims), 0.0);
  t->dims = std::move(dims);
  t->requires_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

inline TensorPtr tensor(std::vector<int> dims, std::vector<double> values,
                        bool requires_grad = false) {
  auto t = tensor(std::move(dims), requires_grad);
  if (values.size() != t->data.size())
    throw ShapeError("value count does not match dims");
  t->data = std::move(values);
  return t;
}

inline bool same_dims(const Tensor& a, const Tensor& b) {
  return a.dims == b.dims;
}

inline void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data)
    if (!std::isfinite(v))
      throw ValidationError(std::string("non-finite value in ") + what);
}

// Reverse-mode tape. Ops append a closure for their backward pass; backward()
// replays the tape in reverse. One Graph per forward pass, single-threaded.
class Graph {
 public:
  TensorPtr make(std::vector<int> dims) {
    auto t = tensor(std::move(dims), true);
    return t;
  }

  void push(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) throw ShapeError("backward: loss must be scalar");
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> tape_;
};

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (!same_dims(*a, *b)) throw ShapeError("add: dims mismatch");
  auto out = g.make(a->dims);
  for (std::size_t i = 0; i < out->numel(); ++i)
    out->data[i] = a->data[i] + b->data[i];
  g.push([a, b, out] {
    a->ensure_grad();
    b->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i) {
      a->grad[i] += out->grad[i];
      b->grad[i] += out->grad[i];
    }
  });
  return out;
}

inline TensorPtr relu(Graph& g, const TensorPtr& in) {
  auto out = g.make(in->dims);
  for (std::size_t i = 0; i < in->numel(); ++i)
    out->data[i] = in->data[i] > 0.0 ? in->data[i] : 0.0;
  g.push([in, out] {
    in->ensure_grad();
    // subgradient at 0 is 0
    for (std::size_t i = 0; i < in->numel(); ++i)
      if (in->data[i] > 0.0) in->grad[i] += out->grad[i];
  });
  return out;
}

inline TensorPtr concat_channels(Graph& g, const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  int n = xs[0]->dim(0), h = xs[0]->dim(2), w = xs[0]->dim(3);
  int ctot = 0;
  for (auto& x : xs) {
    if (x->dims.size() != 4 || x->dim(0) != n || x->dim(2) != h ||
        x->dim(3) != w)
      throw ShapeError("concat_channels: spatial/batch dims mismatch");
    ctot += x->dim(1);
  }
  auto out = g.make({n, ctot, h, w});
  std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    std::size_t off = static_cast<std::size_t>(b) * ctot * plane;
    for (auto& x : xs) {
      std::size_t sz = static_cast<std::size_t>(x->dim(1)) * plane;
      std::copy_n(&x->data[static_cast<std::size_t>(b) * sz], sz,
                  &out->data[off]);
      off += sz;
    }
  }
  g.push([xs, out, n, ctot, plane] {
    for (auto& x : xs) x->ensure_grad();
    for (int b = 0; b < n; ++b) {
      std::size_t off = static_cast<std::size_t>(b) * ctot * plane;
      for (auto& x : xs) {
        std::size_t sz = static_cast<std::size_t>(x->dim(1)) * plane;
        for (std::size_t i = 0; i < sz; ++i)
          x->grad[static_cast<std::size_t>(b) * sz + i] += out->grad[off + i];
        off += sz;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution / transposed convolution
// ---------------------------------------------------------------------------

// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout]
inline TensorPtr conv2d(Graph& g, const TensorPtr& in, const TensorPtr& w,
                        const TensorPtr& b, int stride, int pad) {
  if (in->dims.size() != 4 || w->dims.size() != 4)
    throw ShapeError("conv2d: expects 4-D input and weight");
  int n = in->dim(0), cin = in->dim(1), h = in->dim(2), wd = in->dim(3);
  int cout = w->dim(0), kh = w->dim(2), kw = w->dim(3);
  if (w->dim(1) != cin) throw ShapeError("conv2d: Cin mismatch");
  if (b->numel() != static_cast<std::size_t>(cout))
    throw ShapeError("conv2d: bias size mismatch");
  if (kh > h + 2 * pad || kw > wd + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (wd + 2 * pad - kw) / stride + 1;
  auto out = g.make({n, cout, oh, ow});

  auto idx4 = [](int a, int b2, int c, int d, int D1, int D2, int D3) {
    return ((static_cast<std::size_t>(a) * D1 + b2) * D2 + c) * D3 + d;
  };
  for (int bn = 0; bn < n; ++bn) {
    for (int co = 0; co < cout; ++co) {
      double bias = b->data[static_cast<std::size_t>(co)];
      double* orow0 = &out->data[idx4(bn, co, 0, 0, cout, oh, ow)];
      std::fill(orow0, orow0 + static_cast<std::size_t>(oh) * ow, bias);
      for (int ci = 0; ci < cin; ++ci) {
        const double* iplane = &in->data[idx4(bn, ci, 0, 0, cin, h, wd)];
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            double wv = w->data[idx4(co, ci, ky, kx, cin, kh, kw)];
            for (int y = 0; y < oh; ++y) {
              int iy = y * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const double* irow = iplane + static_cast<std::size_t>(iy) * wd;
              double* orow = orow0 + static_cast<std::size_t>(y) * ow;
              int x0 = 0, x1 = ow;
              // clamp so ix = x*stride - pad + kx stays in [0, wd)
              while (x0 < ow && x0 * stride - pad + kx < 0) ++x0;
              while (x1 > x0 && (x1 - 1) * stride - pad + kx >= wd) --x1;
              int ix = x0 * stride - pad + kx;
              if (stride == 1) {
                for (int x = x0; x < x1; ++x)
                  orow[x] += wv * irow[ix + (x - x0)];
              } else {
                for (int x = x0; x < x1; ++x, ix += stride)
                  orow[x] += wv * irow[ix];
              }
            }
          }
        }
      }
    }
  }

  g.push([in, w, b, out, n, cin, h, wd, cout, kh, kw, oh, ow, stride, pad,
          idx4] {
    in->ensure_grad();
    w->ensure_grad();
    b->ensure_grad();
    for (int bn = 0; bn < n; ++bn) {
      for (int co = 0; co < cout; ++co) {
        const double* ogrow0 = &out->grad[idx4(bn, co, 0, 0, cout, oh, ow)];
        double bsum = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i)
          bsum += ogrow0[i];
        b->grad[static_cast<std::size_t>(co)] += bsum;
        for (int ci = 0; ci < cin; ++ci) {
          const double* iplane = &in->data[idx4(bn, ci, 0, 0, cin, h, wd)];
          double* igplane = &in->grad[idx4(bn, ci, 0, 0, cin, h, wd)];
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              std::size_t wi = idx4(co, ci, ky, kx, cin, kh, kw);
              double wv = w->data[wi];
              double wg = 0.0;
              for (int y = 0; y < oh; ++y) {
                int iy = y * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                const double* irow =
                    iplane + static_cast<std::size_t>(iy) * wd;
                double* igrow = igplane + static_cast<std::size_t>(iy) * wd;
                const double* ogrow = ogrow0 + static_cast<std::size_t>(y) * ow;
                int x0 = 0, x1 = ow;
                while (x0 < ow && x0 * stride - pad + kx < 0) ++x0;
                while (x1 > x0 && (x1 - 1) * stride - pad + kx >= wd) --x1;
                int ix = x0 * stride - pad + kx;
                for (int x = x0; x < x1; ++x, ix += stride) {
                  wg += irow[ix] * ogrow[x];
                  igrow[ix] += wv * ogrow[x];
                }
              }
              w->grad[wi] += wg;
            }
          }
        }
      }
    }
  });
  return out;
}

// input [N,Cin,H,W], weight [Cin,Cout,kh,kw], bias [Cout]
// out H' = (H-1)*stride - 2*pad + kh
inline TensorPtr deconv2d(Graph& g, const TensorPtr& in, const TensorPtr& w,
                          const TensorPtr& b, int stride, int pad) {
  if (in->dims.size() != 4 || w->dims.size() != 4)
    throw ShapeError("deconv2d: expects 4-D input and weight");
  int n = in->dim(0), cin = in->dim(1), h = in->dim(2), wd = in->dim(3);
  int cout = w->dim(1), kh = w->dim(2), kw = w->dim(3);
  if (w->dim(0) != cin) throw ShapeError("deconv2d: Cin mismatch");
  if (b->numel() != static_cast<std::size_t>(cout))
    throw ShapeError("deconv2d: bias size mismatch");
  int oh = (h - 1) * stride - 2 * pad + kh;
  int ow = (wd - 1) * stride - 2 * pad + kw;
  if (oh <= 0 || ow <= 0) throw ShapeError("deconv2d: non-positive output dims");
  auto out = g.make({n, cout, oh, ow});

  auto idx4 = [](int a, int b2, int c, int d, int D1, int D2, int D3) {
    return ((static_cast<std::size_t>(a) * D1 + b2) * D2 + c) * D3 + d;
  };
  for (int bn = 0; bn < n; ++bn) {
    for (int co = 0; co < cout; ++co) {
      double* oplane = &out->data[idx4(bn, co, 0, 0, cout, oh, ow)];
      std::fill(oplane, oplane + static_cast<std::size_t>(oh) * ow,
                b->data[static_cast<std::size_t>(co)]);
      for (int ci = 0; ci < cin; ++ci) {
        const double* iplane = &in->data[idx4(bn, ci, 0, 0, cin, h, wd)];
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            double wv = w->data[idx4(ci, co, ky, kx, cout, kh, kw)];
            for (int y = 0; y < h; ++y) {
              int oy = y * stride - pad + ky;
              if (oy < 0 || oy >= oh) continue;
              const double* irow = iplane + static_cast<std::size_t>(y) * wd;
              double* orow = oplane + static_cast<std::size_t>(oy) * ow;
              for (int x = 0; x < wd; ++x) {
                int ox = x * stride - pad + kx;
                if (ox < 0 || ox >= ow) continue;
                orow[ox] += wv * irow[x];
              }
            }
          }
        }
      }
    }
  }

  g.push([in, w, b, out, n, cin, h, wd, cout, kh, kw, oh, ow, stride, pad,
          idx4] {
    in->ensure_grad();
    w->ensure_grad();
    b->ensure_grad();
    for (int bn = 0; bn < n; ++bn) {
      for (int co = 0; co < cout; ++co) {
        const double* ogplane = &out->grad[idx4(bn, co, 0, 0, cout, oh, ow)];
        double bsum = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i)
          bsum += ogplane[i];
        b->grad[static_cast<std::size_t>(co)] += bsum;
        for (int ci = 0; ci < cin; ++ci) {
          const double* iplane = &in->data[idx4(bn, ci, 0, 0, cin, h, wd)];
          double* igplane = &in->grad[idx4(bn, ci, 0, 0, cin, h, wd)];
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              std::size_t wi = idx4(ci, co, ky, kx, cout, kh, kw);
              double wv = w->data[wi];
              double wg = 0.0;
              for (int y = 0; y < h; ++y) {
                int oy = y * stride - pad + ky;
                if (oy < 0 || oy >= oh) continue;
                const double* irow = iplane + static_cast<std::size_t>(y) * wd;
                double* igrow = igplane + static_cast<std::size_t>(y) * wd;
                const double* ogrow =
                    ogplane + static_cast<std::size_t>(oy) * ow;
                for (int x = 0; x < wd; ++x) {
                  int ox = x * stride - pad + kx;
                  if (ox < 0 || ox >= ow) continue;
                  wg += irow[x] * ogrow[ox];
                  igrow[x] += wv * ogrow[ox];
                }
              }
              w->grad[wi] += wg;
            }
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// 2x2 max pool, stride 2. Ties go to the first element in row-major order.
inline TensorPtr maxpool2(Graph& g, const TensorPtr& in) {
  if (in->dims.size() != 4) throw ShapeError("maxpool2: expects 4-D input");
  int n = in->dim(0), c = in->dim(1), h = in->dim(2), w = in->dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2: odd spatial dims");
  int oh = h / 2, ow = w / 2;
  auto out = g.make({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out->numel());
  std::size_t o = 0;
  for (int bn = 0; bn < n; ++bn)
    for (int ch = 0; ch < c; ++ch) {
      std::size_t base =
          (static_cast<std::size_t>(bn) * c + ch) * static_cast<std::size_t>(h) * w;
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x, ++o) {
          std::size_t i00 = base + static_cast<std::size_t>(2 * y) * w + 2 * x;
          std::size_t best = i00;
          double bv = in->data[i00];
          std::size_t cand[3] = {i00 + 1, i00 + static_cast<std::size_t>(w),
                                 i00 + static_cast<std::size_t>(w) + 1};
          for (std::size_t ci : cand)
            if (in->data[ci] > bv) {
              bv = in->data[ci];
              best = ci;
            }
          out->data[o] = bv;
          (*argmax)[o] = best;
        }
    }
  g.push([in, out, argmax] {
    in->ensure_grad();
    for (std::size_t i = 0; i < out->numel(); ++i)
      in->grad[(*argmax)[i]] += out->grad[i];
  });
  return out;
}

// k x k average pool, stride k. Used to bring heatmap-resolution feedback
// down to hidden-state resolution.
inline TensorPtr avgpool(Graph& g, const TensorPtr& in, int k) {
  if (in->dims.size() != 4) throw ShapeError("avgpool: expects 4-D input");
  int n = in->dim(0), c = in->dim(1), h = in->dim(2), w = in->dim(3);
  if (h % k != 0 || w % k != 0)
    throw ShapeError("avgpool: dims not divisible by window");
  int oh = h / k, ow = w / k;
  auto out = g.make({n, c, oh, ow});
  double inv = 1.0 / (static_cast<double>(k) * k);
  std::size_t o = 0;
  for (int bn = 0; bn < n; ++bn)
    for (int ch = 0; ch < c; ++ch) {
      std::size_t base =
          (static_cast<std::size_t>(bn) * c + ch) * static_cast<std::size_t>(h) * w;
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x, ++o) {
          double s = 0.0;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx)
              s += in->data[base + static_cast<std::size_t>(y * k + dy) * w +
                            (x * k + dx)];
          out->data[o] = s * inv;
        }
    }
  g.push([in, out, n, c, h, w, oh, ow, k, inv] {
    in->ensure_grad();
    std::size_t o2 = 0;
    for (int bn = 0; bn < n; ++bn)
      for (int ch = 0; ch < c; ++ch) {
        std::size_t base = (static_cast<std::size_t>(bn) * c + ch) *
                           static_cast<std::size_t>(h) * w;
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x, ++o2) {
            double gv = out->grad[o2] * inv;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx)
                in->grad[base + static_cast<std::size_t>(y * k + dy) * w +
                         (x * k + dx)] += gv;
          }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Running statistics live in tensors so they persist through checkpoints
// alongside the trainable parameters.
struct BatchNormState {
  TensorPtr running_mean;
  TensorPtr running_var;
  explicit BatchNormState(int channels = 1)
      : running_mean(tensor({channels})), running_var(tensor({channels})) {
    std::fill(running_var->data.begin(), running_var->data.end(), 1.0);
  }
};

enum class Mode { kTrain, kEval };

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.99;

inline TensorPtr batchnorm(Graph& g, const TensorPtr& in,
                           const TensorPtr& gamma, const TensorPtr& beta,
                           BatchNormState& state, Mode mode) {
  if (in->dims.size() != 4) throw ShapeError("batchnorm: expects 4-D input");
  int n = in->dim(0), c = in->dim(1), h = in->dim(2), w = in->dim(3);
  if (gamma->numel() != static_cast<std::size_t>(c) ||
      beta->numel() != static_cast<std::size_t>(c) ||
      state.running_mean->numel() != static_cast<std::size_t>(c))
    throw ShapeError("batchnorm: channel count mismatch");
  std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t m = static_cast<std::size_t>(n) * plane;  // per-channel count
  if (mode == Mode::kTrain && m < 2)
    throw ShapeError("batchnorm: need N*H*W >= 2 in train mode");

  auto out = g.make(in->dims);
  auto mean = std::make_shared<std::vector<double>>(c);
  auto var = std::make_shared<std::vector<double>>(c);
  auto xhat = std::make_shared<std::vector<double>>(in->numel());

  for (int ch = 0; ch < c; ++ch) {
    double mu, v;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (int bn = 0; bn < n; ++bn) {
        const double* p = &in->data[(static_cast<std::size_t>(bn) * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mu = s / static_cast<double>(m);
      double sv = 0.0;
      for (int bn = 0; bn < n; ++bn) {
        const double* p = &in->data[(static_cast<std::size_t>(bn) * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) {
          double d = p[i] - mu;
          sv += d * d;
        }
      }
      v = sv / static_cast<double>(m);  // biased, as normalized
      auto& rm = state.running_mean->data[static_cast<std::size_t>(ch)];
      auto& rv = state.running_var->data[static_cast<std::size_t>(ch)];
      rm = kBnMomentum * rm + (1.0 - kBnMomentum) * mu;
      rv = kBnMomentum * rv + (1.0 - kBnMomentum) * v;
    } else {
      mu = state.running_mean->data[static_cast<std::size_t>(ch)];
      v = state.running_var->data[static_cast<std::size_t>(ch)];
    }
    (*mean)[static_cast<std::size_t>(ch)] = mu;
    (*var)[static_cast<std::size_t>(ch)] = v;
    double inv_std = 1.0 / std::sqrt(v + kBnEpsilon);
    double gm = gamma->data[static_cast<std::size_t>(ch)];
    double bt = beta->data[static_cast<std::size_t>(ch)];
    for (int bn = 0; bn < n; ++bn) {
      std::size_t off = (static_cast<std::size_t>(bn) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double xh = (in->data[off + i] - mu) * inv_std;
        (*xhat)[off + i] = xh;
        out->data[off + i] = gm * xh + bt;
      }
    }
  }

  g.push([in, gamma, beta, out, mean, var, xhat, n, c, plane, m, mode] {
    in->ensure_grad();
    gamma->ensure_grad();
    beta->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      double inv_std =
          1.0 / std::sqrt((*var)[static_cast<std::size_t>(ch)] + kBnEpsilon);
      double gm = gamma->data[static_cast<std::size_t>(ch)];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int bn = 0; bn < n; ++bn) {
        std::size_t off = (static_cast<std::size_t>(bn) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          double dy = out->grad[off + i];
          sum_dy += dy;
          sum_dy_xhat += dy * (*xhat)[off + i];
        }
      }
      gamma->grad[static_cast<std::size_t>(ch)] += sum_dy_xhat;
      beta->grad[static_cast<std::size_t>(ch)] += sum_dy;
      double inv_m = 1.0 / static_cast<double>(m);
      for (int bn = 0; bn < n; ++bn) {
        std::size_t off = (static_cast<std::size_t>(bn) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          double dy = out->grad[off + i];
          double dx;
          if (mode == Mode::kTrain) {
            dx = gm * inv_std *
                 (dy - inv_m * sum_dy - (*xhat)[off + i] * inv_m * sum_dy_xhat);
          } else {
            dx = gm * inv_std * dy;
          }
          in->grad[off + i] += dx;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over spatial locations and the heatmap loss
// ---------------------------------------------------------------------------

// scores [N,1,H,W] -> probabilities summing to 1 over (H,W) per sample.
inline TensorPtr spatial_softmax(Graph& g, const TensorPtr& scores) {
  if (scores->dims.size() != 4 || scores->dim(1) != 1)
    throw ShapeError("spatial_softmax: expects [N,1,H,W]");
  int n = scores->dim(0);
  std::size_t plane =
      static_cast<std::size_t>(scores->dim(2)) * scores->dim(3);
  auto out = g.make(scores->dims);
  for (int bn = 0; bn < n; ++bn) {
    std::size_t off = static_cast<std::size_t>(bn) * plane;
    double mx = scores->data[off];
    for (std::size_t i = 1; i < plane; ++i)
      mx = std::max(mx, scores->data[off + i]);
    double z = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      double e = std::exp(scores->data[off + i] - mx);
      out->data[off + i] = e;
      z += e;
    }
    double inv = 1.0 / z;
    for (std::size_t i = 0; i < plane; ++i) out->data[off + i] *= inv;
  }
  g.push([scores, out, n, plane] {
    scores->ensure_grad();
    for (int bn = 0; bn < n; ++bn) {
      std::size_t off = static_cast<std::size_t>(bn) * plane;
      double dot = 0.0;
      for (std::size_t i = 0; i < plane; ++i)
        dot += out->grad[off + i] * out->data[off + i];
      for (std::size_t i = 0; i < plane; ++i)
        scores->grad[off + i] +=
            out->data[off + i] * (out->grad[off + i] - dot);
    }
  });
  return out;
}

// scores [N,1,H,W] -> log probabilities (numerically stable log-softmax).
inline TensorPtr spatial_log_softmax(Graph& g, const TensorPtr& scores) {
  if (scores->dims.size() != 4 || scores->dim(1) != 1)
    throw ShapeError("spatial_log_softmax: expects [N,1,H,W]");
  int n = scores->dim(0);
  std::size_t plane =
      static_cast<std::size_t>(scores->dim(2)) * scores->dim(3);
  auto out = g.make(scores->dims);
  for (int bn = 0; bn < n; ++bn) {
    std::size_t off = static_cast<std::size_t>(bn) * plane;
    double mx = scores->data[off];
    for (std::size_t i = 1; i < plane; ++i)
      mx = std::max(mx, scores->data[off + i]);
    double z = 0.0;
    for (std::size_t i = 0; i < plane; ++i)
      z += std::exp(scores->data[off + i] - mx);
    double lz = std::log(z) + mx;
    for (std::size_t i = 0; i < plane; ++i)
      out->data[off + i] = scores->data[off + i] - lz;
  }
  g.push([scores, out, n, plane] {
    scores->ensure_grad();
    for (int bn = 0; bn < n; ++bn) {
      std::size_t off = static_cast<std::size_t>(bn) * plane;
      double gsum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) gsum += out->grad[off + i];
      for (std::size_t i = 0; i < plane; ++i)
        scores->grad[off + i] +=
            out->grad[off + i] - std::exp(out->data[off + i]) * gsum;
    }
  });
  return out;
}

// -sum(target * log_prob), averaged over the batch. target must be a
// per-sample probability distribution.
inline TensorPtr heatmap_cross_entropy(Graph& g, const TensorPtr& log_probs,
                                       const TensorPtr& target) {
  if (!same_dims(*log_probs, *target))
    throw ShapeError("heatmap_cross_entropy: dims mismatch");
  int n = log_probs->dim(0);
  std::size_t plane = log_probs->numel() / static_cast<std::size_t>(n);
  for (int bn = 0; bn < n; ++bn) {
    double s = 0.0;
    std::size_t off = static_cast<std::size_t>(bn) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double tv = target->data[off + i];
      if (tv < 0.0) throw ValidationError("heatmap_cross_entropy: negative target");
      s += tv;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw ValidationError("heatmap_cross_entropy: target not normalized");
  }
  auto out = g.make({1});
  double loss = 0.0;
  for (std::size_t i = 0; i < log_probs->numel(); ++i)
    loss -= target->data[i] * log_probs->data[i];
  out->data[0] = loss / static_cast<double>(n);
  if (!std::isfinite(out->data[0]))
    throw ValidationError("heatmap_cross_entropy: non-finite loss");
  g.push([log_probs, target, out, n] {
    log_probs->ensure_grad();
    double s = out->grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < log_probs->numel(); ++i)
      log_probs->grad[i] -= s * target->data[i];
  });
  return out;
}

// Scalar accumulator: sum of scalar losses.
inline TensorPtr add_scalars(Graph& g, const std::vector<TensorPtr>& xs) {
  auto out = g.make({1});
  for (auto& x : xs) {
    if (x->numel() != 1) throw ShapeError("add_scalars: non-scalar input");
    out->data[0] += x->data[0];
  }
  g.push([xs, out] {
    for (auto& x : xs) {
      x->ensure_grad();
      x->grad[0] += out->grad[0];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerState {
  double learning_rate = 0.003;
  double momentum = 0.9;
  std::int64_t step_count = 0;
  std::int64_t decay_every = 2000;
  double decay_factor = 0.3;
  std::vector<std::vector<double>> velocity;  // one per parameter

  double effective_lr() const {
    return learning_rate *
           std::pow(decay_factor,
                    static_cast<double>(step_count / decay_every));
  }
};

inline void sgd_momentum_step(const std::vector<TensorPtr>& params,
                              OptimizerState& opt) {
  if (opt.velocity.empty()) {
    opt.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      opt.velocity[i].assign(params[i]->numel(), 0.0);
  }
  if (opt.velocity.size() != params.size())
    throw ShapeError("sgd_momentum_step: velocity count mismatch");
  double lr = opt.effective_lr();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (p.grad.size() != p.data.size())
      throw ValidationError("sgd_momentum_step: missing gradient");
    auto& v = opt.velocity[i];
    if (v.size() != p.data.size())
      throw ShapeError("sgd_momentum_step: velocity shape mismatch");
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = opt.momentum * v[j] + p.grad[j];
      p.data[j] -= lr * v[j];
      if (!std::isfinite(p.data[j]))
        throw ValidationError("sgd_momentum_step: non-finite parameter");
    }
    p.zero_grad();
  }
  ++opt.step_count;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// f builds a fresh graph over `inputs` and returns a scalar loss tensor.
// Returns the max over all input coordinates of the relative error between
// analytic and central-difference gradients.
inline double grad_check(
    const std::function<TensorPtr(Graph&, const std::vector<TensorPtr>&)>& f,
    const std::vector<TensorPtr>& inputs, double epsilon = 1e-5) {
  for (auto& t : inputs) {
    t->ensure_grad();
    t->zero_grad();
  }
  Graph g;
  auto loss = f(g, inputs);
  g.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t->grad);

  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = *inputs[ti];
    for (std::size_t j = 0; j < t.numel(); ++j) {
      double saved = t.data[j];
      t.data[j] = saved + epsilon;
      Graph gp;
      double fp = f(gp, inputs)->data[0];
      t.data[j] = saved - epsilon;
      Graph gm;
      double fm = f(gm, inputs)->data[0];
      t.data[j] = saved;
      double numeric = (fp - fm) / (2.0 * epsilon);
      double a = analytic[ti][j];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw ValidationError("grad_check: non-finite gradient");
      double rel = std::abs(a - numeric) /
                   std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  for (auto& t : inputs) t->zero_grad();
  return max_rel;
}

inline void fill_normal(Tensor& t, Rng& rng, double stddev = 0.01) {
  for (double& v : t.data) v = rng.normal(0.0, stddev);
}

}  // namespace chainpred
