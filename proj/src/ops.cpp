#include "scanmtl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace mcx::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct Geometry {
  int channels, height, width;
  int kernel, stride, pad;
  int out_h, out_w;
};

// col: [C*k*k, out_h*out_w]
void im2col(const double* img, const Geometry& g, double* col) {
  const int patch = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        double* dst = col + (static_cast<std::size_t>(c) * g.kernel * g.kernel +
                             ky * g.kernel + kx) *
                                patch;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) {
            for (int ox = 0; ox < g.out_w; ++ox) dst[oy * g.out_w + ox] = 0.0;
            continue;
          }
          const double* src = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[oy * g.out_w + ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters col back into img (img is overwritten).
void col2im(const double* col, const Geometry& g, double* img) {
  const std::size_t img_size = static_cast<std::size_t>(g.channels) * g.height * g.width;
  std::fill(img, img + img_size, 0.0);
  const int patch = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const double* src = col + (static_cast<std::size_t>(c) * g.kernel * g.kernel +
                                   ky * g.kernel + kx) *
                                      patch;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          double* dst = img + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " +
                                std::to_string(rank) + ", got " + t.shape_string());
  }
}

}  // namespace

int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

int deconv_out_size(int in, int kernel, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + kernel;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (w.dim(1) != x.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
  const int m = x.dim(0);
  const int out_c = w.dim(0);
  const Geometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad,
                   conv_out_size(x.dim(2), w.dim(2), stride, pad),
                   conv_out_size(x.dim(3), w.dim(3), stride, pad)};
  const int rows = g.channels * g.kernel * g.kernel;
  const int patch = g.out_h * g.out_w;
  Tensor y({m, out_c, g.out_h, g.out_w});
  RowMat col(rows, patch);
  ConstMatMap wm(w.data(), out_c, rows);
  for (int i = 0; i < m; ++i) {
    im2col(x.row(i).data(), g, col.data());
    MatMap ym(y.row(i).data(), out_c, patch);
    ym.noalias() = wm * col;
    for (int o = 0; o < out_c; ++o) ym.row(o).array() += b[o];
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride,
                     int pad, Tensor* dx, Tensor& dw, Tensor& db) {
  const int m = x.dim(0);
  const int out_c = w.dim(0);
  const Geometry g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, dy.dim(2), dy.dim(3)};
  const int rows = g.channels * g.kernel * g.kernel;
  const int patch = g.out_h * g.out_w;
  RowMat col(rows, patch);
  RowMat dcol(rows, patch);
  ConstMatMap wm(w.data(), out_c, rows);
  MatMap dwm(dw.data(), out_c, rows);
  if (dx) *dx = Tensor(x.shape());
  for (int i = 0; i < m; ++i) {
    ConstMatMap dym(dy.row(i).data(), out_c, patch);
    im2col(x.row(i).data(), g, col.data());
    dwm.noalias() += dym * col.transpose();
    for (int o = 0; o < out_c; ++o) db[o] += dym.row(o).sum();
    if (dx) {
      dcol.noalias() = wm.transpose() * dym;
      col2im(dcol.data(), g, dx->row(i).data());
    }
  }
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                        int pad) {
  require_rank(x, 4, "conv_transpose2d input");
  require_rank(w, 4, "conv_transpose2d weight");
  if (w.dim(0) != x.dim(1)) throw std::invalid_argument("conv_transpose2d: channel mismatch");
  const int m = x.dim(0);
  const int in_c = x.dim(1);
  const int out_c = w.dim(1);
  const int k = w.dim(2);
  const int out_h = deconv_out_size(x.dim(2), k, stride, pad);
  const int out_w = deconv_out_size(x.dim(3), k, stride, pad);
  // The output plane plays the role of a conv input whose conv output is x.
  const Geometry g{out_c, out_h, out_w, k, stride, pad, x.dim(2), x.dim(3)};
  const int rows = out_c * k * k;
  const int patch = g.out_h * g.out_w;
  Tensor y({m, out_c, out_h, out_w});
  RowMat col(rows, patch);
  ConstMatMap wm(w.data(), in_c, rows);
  for (int i = 0; i < m; ++i) {
    ConstMatMap xm(x.row(i).data(), in_c, patch);
    col.noalias() = wm.transpose() * xm;
    col2im(col.data(), g, y.row(i).data());
    MatMap ym(y.row(i).data(), out_c, out_h * out_w);
    for (int o = 0; o < out_c; ++o) ym.row(o).array() += b[o];
  }
  return y;
}

void conv_transpose2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                               int stride, int pad, Tensor* dx, Tensor& dw, Tensor& db) {
  const int m = x.dim(0);
  const int in_c = x.dim(1);
  const int out_c = w.dim(1);
  const int k = w.dim(2);
  const Geometry g{out_c, dy.dim(2), dy.dim(3), k, stride, pad, x.dim(2), x.dim(3)};
  const int rows = out_c * k * k;
  const int patch = g.out_h * g.out_w;
  RowMat dcol(rows, patch);
  ConstMatMap wm(w.data(), in_c, rows);
  MatMap dwm(dw.data(), in_c, rows);
  if (dx) *dx = Tensor(x.shape());
  for (int i = 0; i < m; ++i) {
    im2col(dy.row(i).data(), g, dcol.data());
    ConstMatMap xm(x.row(i).data(), in_c, patch);
    dwm.noalias() += xm * dcol.transpose();
    ConstMatMap dym(dy.row(i).data(), out_c, g.height * g.width);
    for (int o = 0; o < out_c; ++o) db[o] += dym.row(o).sum();
    if (dx) {
      MatMap dxm(dx->row(i).data(), in_c, patch);
      dxm.noalias() = wm * dcol;
    }
  }
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  if (w.dim(0) != x.dim(1)) throw std::invalid_argument("linear: feature mismatch");
  const int m = x.dim(0);
  const int in = w.dim(0);
  const int out = w.dim(1);
  Tensor y({m, out});
  ConstMatMap wm(w.data(), in, out);
  // Row by row so a sample's output never depends on its batch companions.
  for (int i = 0; i < m; ++i) {
    ConstMatMap xr(x.row(i).data(), 1, in);
    MatMap yr(y.row(i).data(), 1, out);
    yr.noalias() = xr * wm;
    for (int o = 0; o < out; ++o) yr(0, o) += b[o];
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx,
                     Tensor& dw, Tensor& db) {
  const int m = x.dim(0);
  const int in = w.dim(0);
  const int out = w.dim(1);
  ConstMatMap xm(x.data(), m, in);
  ConstMatMap wm(w.data(), in, out);
  ConstMatMap dym(dy.data(), m, out);
  MatMap dwm(dw.data(), in, out);
  dwm.noalias() += xm.transpose() * dym;
  for (int o = 0; o < out; ++o) db[o] += dym.col(o).sum();
  if (dx) {
    *dx = Tensor(x.shape());
    MatMap dxm(dx->data(), m, in);
    dxm.noalias() = dym * wm.transpose();
  }
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool input");
  const int m = x.dim(0);
  const int c = x.dim(1);
  const int plane = x.dim(2) * x.dim(3);
  Tensor y({m, c});
  for (int i = 0; i < m; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      double s = 0.0;
      for (int j = 0; j < plane; ++j) s += p[j];
      y.at(i, ch) = s / plane;
    }
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, const std::vector<int>& x_shape) {
  Tensor dx(x_shape);
  const int m = x_shape[0];
  const int c = x_shape[1];
  const int plane = x_shape[2] * x_shape[3];
  for (int i = 0; i < m; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double g = dy.at(i, ch) / plane;
      double* p = dx.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (int j = 0; j < plane; ++j) p[j] = g;
    }
  }
  return dx;
}

Tensor add_position_bias(const Tensor& x, const Tensor& b) {
  require_rank(x, 4, "add_position_bias input");
  if (b.size() != x.row_size()) throw std::invalid_argument("add_position_bias: size mismatch");
  Tensor y = x;
  for (int i = 0; i < x.dim(0); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
  return y;
}

void add_position_bias_backward(const Tensor& dy, Tensor& db) {
  for (int i = 0; i < dy.dim(0); ++i) {
    const auto r = dy.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) db[j] += r[j];
  }
}

void relu_inplace(Tensor& x) {
  for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
}

void sigmoid_inplace(Tensor& x) {
  for (double& v : x.values()) {
    // Split by sign so exp never overflows.
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
    // Keep the open interval even when the logit saturates.
    v = std::clamp(v, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
  }
}

void relu_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(y[i] > 0.0)) dy[i] = 0.0;
  }
}

void sigmoid_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= y[i] * (1.0 - y[i]);
}

}  // namespace mcx::ops
