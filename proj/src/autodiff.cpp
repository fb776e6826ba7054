#include "proxslim/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "proxslim/errors.hpp"

namespace proxslim {

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  Node node{std::move(value), {}, nullptr};
  if (recording_) {
    node.inputs.reserve(inputs.size());
    for (Var v : inputs) node.inputs.push_back(v.id);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Gradients Tape::backward(Var loss) const {
  if (!recording_) throw ContractError("backward() on a tape that was not recording");
  if (loss.id >= nodes_.size()) throw ContractError("backward(): loss slot is not on this tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward(): loss must be a scalar, got shape " +
                        shape_string(nodes_[loss.id].value.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id] = Tensor(nodes_[loss.id].value.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    grad_in.clear();
    for (std::size_t in : node.inputs) {
      if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
      grad_in.push_back(&grads[in]);
    }
    node.backward(*this, grads[i], grad_in);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (grads[i].empty()) grads[i] = Tensor(nodes_[i].value.shape(), 0.0);
  }
  return Gradients(std::move(grads));
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ShapeError("window of size " + std::to_string(kernel) + " does not fit input extent " +
                     std::to_string(in));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

double softplus_value(double x, double c) {
  const double t = c * x;
  if (t > 0) return (t + std::log1p(std::exp(-t))) / c;
  return std::log1p(std::exp(t)) / c;
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softmax_pool_value(std::span<const double> window, double c) {
  if (window.empty()) throw ContractError("softmax pooling over an empty window");
  if (!(c > 0)) throw ContractError("softmax pooling needs c > 0");
  const double m = *std::max_element(window.begin(), window.end());
  double num = 0.0, den = 0.0;
  for (double x : window) {
    const double e = std::exp(c * (x - m));
    num += x * e;
    den += e;
  }
  return num / den;
}

namespace ops {
namespace {

const Tensor& val(const Tape& t, Var v) { return t.value(v); }

std::size_t inner_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(x.shape()));
  }
}

void require_channel_vector(const Tensor& x, const Tensor& v, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": input needs a channel axis");
  if (v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError(std::string(op) + ": per-channel vector " + shape_string(v.shape()) +
                     " does not match " + shape_string(x.shape()));
  }
}

template <typename F, typename D>
Var unary(Tape& t, Var a, const char* op, F f, D df) {
  const Tensor& x = val(t, a);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(op, std::move(out), {a},
                  [a, df](const Tape& tape, const Tensor& g, std::span<Tensor* const> gin) {
                    const Tensor& xv = tape.value(a);
                    Tensor& ga = *gin[0];
                    for (std::size_t i = 0; i < xv.size(); ++i) ga[i] += g[i] * df(xv[i]);
                  });
}

enum class PoolKind { kAverage, kMax, kSoftmax };

Var pool2d(Tape& t, Var xv, std::size_t k, PoolKind kind, double c, const char* op) {
  const Tensor& x = val(t, xv);
  require_rank(x, 4, op);
  if (k == 0) throw ShapeError(std::string(op) + ": pool size must be positive");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_output_extent(H, k, k, 0);
  const std::size_t Wo = conv_output_extent(W, k, k, 0);
  Tensor out({B, C, Ho, Wo});
  std::vector<double> window(k * k);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* xp = x.data() + bc * H * W;
    double* op_ = out.data() + bc * Ho * Wo;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            window[i * k + j] = xp[(oh * k + i) * W + ow * k + j];
        double r = 0.0;
        switch (kind) {
          case PoolKind::kAverage:
            for (double w : window) r += w;
            r /= static_cast<double>(k * k);
            break;
          case PoolKind::kMax:
            r = *std::max_element(window.begin(), window.end());
            break;
          case PoolKind::kSoftmax:
            r = softmax_pool_value(window, c);
            break;
        }
        op_[oh * Wo + ow] = r;
      }
    }
  }
  const Var outv{t.size()};
  return t.record(
      op, std::move(out), {xv},
      [xv, outv, k, kind, c](const Tape& tape, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& x = tape.value(xv);
        const Tensor& y = tape.value(outv);
        Tensor& gx = *gin[0];
        const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Ho = y.dim(2), Wo = y.dim(3);
        for (std::size_t bc = 0; bc < BC; ++bc) {
          const double* xp = x.data() + bc * H * W;
          double* gp = gx.data() + bc * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const double go = g[bc * Ho * Wo + oh * Wo + ow];
              const double yo = y[bc * Ho * Wo + oh * Wo + ow];
              if (kind == PoolKind::kAverage) {
                const double s = go / static_cast<double>(k * k);
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) gp[(oh * k + i) * W + ow * k + j] += s;
              } else if (kind == PoolKind::kMax) {
                std::size_t best = (oh * k) * W + ow * k;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t idx = (oh * k + i) * W + ow * k + j;
                    if (xp[idx] > xp[best]) best = idx;
                  }
                gp[best] += go;
              } else {
                // d/dx_j = p_j (1 + c (x_j - y)), p = softmax(c x) over the window
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j)
                    m = std::max(m, xp[(oh * k + i) * W + ow * k + j]);
                double den = 0.0;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j)
                    den += std::exp(c * (xp[(oh * k + i) * W + ow * k + j] - m));
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t idx = (oh * k + i) * W + ow * k + j;
                    const double p = std::exp(c * (xp[idx] - m)) / den;
                    gp[idx] += go * p * (1.0 + c * (xp[idx] - yo));
                  }
              }
            }
          }
        }
      });
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = val(t, a);
  const Tensor& Bm = val(t, b);
  require_rank(A, 2, "matmul");
  require_rank(Bm, 2, "matmul");
  const std::size_t m = A.dim(0), k = A.dim(1), n = Bm.dim(1);
  if (Bm.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_string(A.shape()) + " x " +
                     shape_string(Bm.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * Bm[p * n + j];
    }
  return t.record("matmul", std::move(out), {a, b},
                  [a, b](const Tape& tape, const Tensor& g, std::span<Tensor* const> gin) {
                    const Tensor& A = tape.value(a);
                    const Tensor& Bm = tape.value(b);
                    const std::size_t m = A.dim(0), k = A.dim(1), n = Bm.dim(1);
                    Tensor& ga = *gin[0];
                    Tensor& gb = *gin[1];
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * Bm[p * n + j];
                        ga[i * k + p] += s;
                      }
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                      }
                  });
}

Var transpose(Tape& t, Var a) {
  const Tensor& A = val(t, a);
  require_rank(A, 2, "transpose");
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return t.record("transpose", std::move(out), {a},
                  [m, n](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    Tensor& ga = *gin[0];
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                  });
}

Var reshape(Tape& t, Var a, Shape shape) {
  Tensor out = val(t, a).reshaped(std::move(shape));
  return t.record("reshape", std::move(out), {a},
                  [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    Tensor& ga = *gin[0];
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  });
}

Var conv2d(Tape& t, Var xv, Var wv, Conv2dGeometry geo) {
  const Tensor& x = val(t, xv);
  const Tensor& w = val(t, wv);
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: kernel " + shape_string(w.shape()) + " expects " +
                     std::to_string(w.dim(1)) + " input channels, input is " +
                     shape_string(x.shape()));
  }
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: only square kernels are supported");
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), K = w.dim(2), S = geo.stride, P = geo.padding;
  const std::size_t Ho = conv_output_extent(H, K, S, P);
  const std::size_t Wo = conv_output_extent(W, K, S, P);
  Tensor out({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* op = out.data() + (b * Co + co) * Ho * Wo;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* xp = x.data() + (b * Ci + ci) * H * W;
        const double* wp = w.data() + (co * Ci + ci) * K * K;
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw) {
            const double wk = wp[kh * K + kw];
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const std::ptrdiff_t ih =
                  static_cast<std::ptrdiff_t>(oh * S + kh) - static_cast<std::ptrdiff_t>(P);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(ow * S + kw) - static_cast<std::ptrdiff_t>(P);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                op[oh * Wo + ow] += wk * xp[ih * W + iw];
              }
            }
          }
      }
    }
  return t.record(
      "conv2d", std::move(out), {xv, wv},
      [xv, wv, S, P, Ho, Wo](const Tape& tape, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& x = tape.value(xv);
        const Tensor& w = tape.value(wv);
        Tensor& gx = *gin[0];
        Tensor& gw = *gin[1];
        const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t Co = w.dim(0), K = w.dim(2);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Co; ++co) {
            const double* gp = g.data() + (b * Co + co) * Ho * Wo;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double* xp = x.data() + (b * Ci + ci) * H * W;
              double* gxp = gx.data() + (b * Ci + ci) * H * W;
              const double* wp = w.data() + (co * Ci + ci) * K * K;
              double* gwp = gw.data() + (co * Ci + ci) * K * K;
              for (std::size_t kh = 0; kh < K; ++kh)
                for (std::size_t kw = 0; kw < K; ++kw) {
                  const double wk = wp[kh * K + kw];
                  double acc = 0.0;
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * S + kh) - static_cast<std::ptrdiff_t>(P);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * S + kw) -
                                                static_cast<std::ptrdiff_t>(P);
                      if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                      const double go = gp[oh * Wo + ow];
                      acc += go * xp[ih * W + iw];
                      gxp[ih * W + iw] += go * wk;
                    }
                  }
                  gwp[kh * K + kw] += acc;
                }
            }
          }
      });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = val(t, a);
  const Tensor& Bm = val(t, b);
  require_same_shape(A, Bm, "add");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + Bm[i];
  return t.record("add", std::move(out), {a, b},
                  [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    gin[0]->accumulate(g);
                    gin[1]->accumulate(g);
                  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& A = val(t, a);
  const Tensor& Bm = val(t, b);
  require_same_shape(A, Bm, "sub");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - Bm[i];
  return t.record("sub", std::move(out), {a, b},
                  [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    gin[0]->accumulate(g);
                    Tensor& gb = *gin[1];
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = val(t, a);
  const Tensor& Bm = val(t, b);
  require_same_shape(A, Bm, "mul");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * Bm[i];
  return t.record("mul", std::move(out), {a, b},
                  [a, b](const Tape& tape, const Tensor& g, std::span<Tensor* const> gin) {
                    const Tensor& A = tape.value(a);
                    const Tensor& Bm = tape.value(b);
                    Tensor& ga = *gin[0];
                    Tensor& gb = *gin[1];
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      ga[i] += g[i] * Bm[i];
                      gb[i] += g[i] * A[i];
                    }
                  });
}

Var scale(Tape& t, Var a, double s) {
  return unary(t, a, "scale", [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(Tape& t, Var a, double s) {
  return unary(t, a, "add_scalar", [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var square(Tape& t, Var a) {
  return unary(t, a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var pow_scalar(Tape& t, Var a, double p) {
  const Tensor& x = val(t, a);
  for (double v : x.values()) {
    if (!(v > 0)) throw NumericError("pow_scalar: base must be positive");
  }
  return unary(
      t, a, "pow_scalar", [p](double x) { return std::pow(x, p); },
      [p](double x) { return p * std::pow(x, p - 1.0); });
}

Var exp(Tape& t, Var a) {
  return unary(
      t, a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Tape& t, Var a) {
  for (double v : val(t, a).values()) {
    if (!(v > 0)) throw NumericError("log: argument must be positive");
  }
  return unary(
      t, a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var row_add(Tape& t, Var x, Var bias) {
  const Tensor& X = val(t, x);
  const Tensor& b = val(t, bias);
  require_rank(X, 2, "row_add");
  if (b.rank() != 1 || b.dim(0) != X.dim(1)) {
    throw ShapeError("row_add: bias " + shape_string(b.shape()) + " does not match " +
                     shape_string(X.shape()));
  }
  const std::size_t R = X.dim(0), C = X.dim(1);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = X[r * C + c] + b[c];
  return t.record("row_add", std::move(out), {x, bias},
                  [R, C](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    gin[0]->accumulate(g);
                    Tensor& gb = *gin[1];
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                  });
}

Var channel_add(Tape& t, Var x, Var v) {
  const Tensor& X = val(t, x);
  const Tensor& V = val(t, v);
  require_channel_vector(X, V, "channel_add");
  const std::size_t B = X.dim(0), C = X.dim(1), S = inner_size(X.shape());
  Tensor out(X.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        out[i] = X[i] + V[c];
      }
  return t.record("channel_add", std::move(out), {x, v},
                  [B, C, S](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    gin[0]->accumulate(g);
                    Tensor& gv = *gin[1];
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t s = 0; s < S; ++s) gv[c] += g[(b * C + c) * S + s];
                  });
}

Var channel_mul(Tape& t, Var x, Var v) {
  const Tensor& X = val(t, x);
  const Tensor& V = val(t, v);
  require_channel_vector(X, V, "channel_mul");
  const std::size_t B = X.dim(0), C = X.dim(1), S = inner_size(X.shape());
  Tensor out(X.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (b * C + c) * S + s;
        out[i] = X[i] * V[c];
      }
  return t.record("channel_mul", std::move(out), {x, v},
                  [x, v, B, C, S](const Tape& tape, const Tensor& g,
                                  std::span<Tensor* const> gin) {
                    const Tensor& X = tape.value(x);
                    const Tensor& V = tape.value(v);
                    Tensor& gx = *gin[0];
                    Tensor& gv = *gin[1];
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t s = 0; s < S; ++s) {
                          const std::size_t i = (b * C + c) * S + s;
                          gx[i] += g[i] * V[c];
                          gv[c] += g[i] * X[i];
                        }
                  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double v : val(t, a).values()) s += v;
  return t.record("sum", Tensor::scalar(s), {a},
                  [](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    Tensor& ga = *gin[0];
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                  });
}

Var mean(Tape& t, Var a) {
  const Tensor& A = val(t, a);
  double s = 0.0;
  for (double v : A.values()) s += v;
  const double n = static_cast<double>(A.size());
  return t.record("mean", Tensor::scalar(s / n), {a},
                  [n](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    Tensor& ga = *gin[0];
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] / n;
                  });
}

Var channel_mean(Tape& t, Var x) {
  const Tensor& X = val(t, x);
  if (X.rank() < 2) throw ShapeError("channel_mean: input needs a channel axis");
  const std::size_t B = X.dim(0), C = X.dim(1), S = inner_size(X.shape());
  const double n = static_cast<double>(B * S);
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < S; ++k) s += X[(b * C + c) * S + k];
    out[c] = s / n;
  }
  return t.record("channel_mean", std::move(out), {x},
                  [B, C, S, n](const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
                    Tensor& gx = *gin[0];
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t k = 0; k < S; ++k) gx[(b * C + c) * S + k] += g[c] / n;
                  });
}

Var softplus(Tape& t, Var a, double c) {
  if (!(c > 0)) throw ContractError("softplus: sharpness c must be positive");
  return unary(
      t, a, "softplus", [c](double x) { return softplus_value(x, c); },
      [c](double x) { return logistic(c * x); });
}

Var relu(Tape& t, Var a) {
  return unary(
      t, a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var avg_pool2d(Tape& t, Var x, std::size_t k) {
  return pool2d(t, x, k, PoolKind::kAverage, 0.0, "avg_pool2d");
}

Var max_pool2d(Tape& t, Var x, std::size_t k) {
  return pool2d(t, x, k, PoolKind::kMax, 0.0, "max_pool2d");
}

Var softmax_pool2d(Tape& t, Var x, std::size_t k, double c) {
  if (!(c > 0)) throw ContractError("softmax_pool2d: sharpness c must be positive");
  return pool2d(t, x, k, PoolKind::kSoftmax, c, "softmax_pool2d");
}

Var cross_entropy(Tape& t, Var logits, std::span<const std::size_t> labels) {
  const Tensor& Z = val(t, logits);
  require_rank(Z, 2, "cross_entropy");
  const std::size_t B = Z.dim(0), K = Z.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B) + " rows");
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  Tensor probs({B, K});
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (y[b] >= K) {
      throw ContractError("cross_entropy: label " + std::to_string(y[b]) + " out of range for " +
                          std::to_string(K) + " classes");
    }
    const double* z = Z.data() + b * K;
    const double m = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(z[k] - lse);
    total += lse - z[y[b]];
  }
  const double n = static_cast<double>(B);
  return t.record(
      "cross_entropy", Tensor::scalar(total / n), {logits},
      [probs = std::move(probs), y = std::move(y), B, K, n](
          const Tape&, const Tensor& g, std::span<Tensor* const> gin) {
        Tensor& gz = *gin[0];
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < K; ++k) {
            const double target = (k == y[b]) ? 1.0 : 0.0;
            gz[b * K + k] += g[0] * (probs[b * K + k] - target) / n;
          }
      });
}

}  // namespace ops
}  // namespace proxslim
