#include "mcblock/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mcblock/error.hpp"

namespace mcblock::kernels {

void gemm_nn(int M, int N, int K, const float* __restrict A, const float* __restrict B,
             float* __restrict C) {
  for (int i = 0; i < M; ++i) {
    float* __restrict crow = C + static_cast<std::size_t>(i) * N;
    const float* arow = A + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const float a = arow[k];
      if (a == 0.0f) continue;
      const float* __restrict brow = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

void gemm_tn(int M, int N, int K, const float* __restrict A, const float* __restrict B,
             float* __restrict C) {
  for (int k = 0; k < K; ++k) {
    const float* arow = A + static_cast<std::size_t>(k) * M;
    const float* __restrict brow = B + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const float a = arow[i];
      if (a == 0.0f) continue;
      float* __restrict crow = C + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C) {
  // Transpose B once so the inner loop streams contiguously.
  std::vector<float> bt(static_cast<std::size_t>(K) * N);
  for (int j = 0; j < N; ++j)
    for (int k = 0; k < K; ++k)
      bt[static_cast<std::size_t>(k) * N + j] = B[static_cast<std::size_t>(j) * K + k];
  gemm_nn(M, N, K, A, bt.data(), C);
}

int conv_out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

void im2col(const float* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            float* cols) {
  const int Ho = conv_out_extent(H, kh, stride, pad);
  const int Wo = conv_out_extent(W, kw, stride, pad);
  std::size_t row = 0;
  for (int c = 0; c < C; ++c) {
    const float* plane = img + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        float* out = cols + row * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          float* orow = out + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(orow, orow + Wo, 0.0f);
            continue;
          }
          const float* irow = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            orow[ox] = (ix >= 0 && ix < W) ? irow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
            float* img) {
  const int Ho = conv_out_extent(H, kh, stride, pad);
  const int Wo = conv_out_extent(W, kw, stride, pad);
  std::size_t row = 0;
  for (int c = 0; c < C; ++c) {
    float* plane = img + static_cast<std::size_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const float* in = cols + row * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          float* irow = plane + static_cast<std::size_t>(iy) * W;
          const float* crow = in + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) irow[ix] += crow[ox];
          }
        }
      }
    }
  }
}

namespace {

struct ConvGeom {
  int N, C, H, W, F, kh, kw, Ho, Wo;
};

ConvGeom check_conv(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw DimensionError("conv2d expects rank-4 input and kernel, got " +
                         shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  if (input.dim(1) != kernel.dim(1))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " kernel " + shape_str(kernel.shape()));
  if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
  if (pad < 0) throw DimensionError("conv2d padding must be >= 0");
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
             kernel.dim(2), kernel.dim(3), 0, 0};
  if (g.kh > g.H + 2 * pad || g.kw > g.W + 2 * pad)
    throw DimensionError("conv2d kernel larger than padded input");
  g.Ho = conv_out_extent(g.H, g.kh, stride, pad);
  g.Wo = conv_out_extent(g.W, g.kw, stride, pad);
  return g;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  const ConvGeom g = check_conv(input, kernel, stride, pad);
  Tensor out({g.N, g.F, g.Ho, g.Wo});
  const int ckk = g.C * g.kh * g.kw;
  const int hw = g.Ho * g.Wo;
  const bool trivial = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
  std::vector<float> cols(trivial ? 0 : static_cast<std::size_t>(ckk) * hw);
  for (int n = 0; n < g.N; ++n) {
    const float* img = input.data() + static_cast<std::size_t>(n) * g.C * g.H * g.W;
    const float* b = img;
    if (!trivial) {
      im2col(img, g.C, g.H, g.W, g.kh, g.kw, stride, pad, cols.data());
      b = cols.data();
    }
    gemm_nn(g.F, hw, ckk, kernel.data(), b, out.data() + static_cast<std::size_t>(n) * g.F * hw);
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& d_out,
                            int stride, int pad, bool need_input_grad) {
  const ConvGeom g = check_conv(input, kernel, stride, pad);
  if (d_out.shape() != Shape{g.N, g.F, g.Ho, g.Wo})
    throw DimensionError("conv2d_backward: gradient shape mismatch");
  Conv2dGrads grads{need_input_grad ? Tensor(input.shape()) : Tensor(), Tensor(kernel.shape())};
  const int ckk = g.C * g.kh * g.kw;
  const int hw = g.Ho * g.Wo;
  const bool trivial = g.kh == 1 && g.kw == 1 && stride == 1 && pad == 0;
  std::vector<float> cols(static_cast<std::size_t>(ckk) * hw);
  std::vector<float> dcols(static_cast<std::size_t>(ckk) * hw);
  for (int n = 0; n < g.N; ++n) {
    const float* img = input.data() + static_cast<std::size_t>(n) * g.C * g.H * g.W;
    const float* dy = d_out.data() + static_cast<std::size_t>(n) * g.F * hw;
    const float* b = img;
    if (!trivial) {
      im2col(img, g.C, g.H, g.W, g.kh, g.kw, stride, pad, cols.data());
      b = cols.data();
    }
    gemm_nt(g.F, ckk, hw, dy, b, grads.d_kernel.data());
    if (!need_input_grad) continue;
    float* dimg = grads.d_input.data() + static_cast<std::size_t>(n) * g.C * g.H * g.W;
    if (trivial) {
      gemm_tn(ckk, hw, g.F, kernel.data(), dy, dimg);
    } else {
      std::fill(dcols.begin(), dcols.end(), 0.0f);
      gemm_tn(ckk, hw, g.F, kernel.data(), dy, dcols.data());
      col2im(dcols.data(), g.C, g.H, g.W, g.kh, g.kw, stride, pad, dimg);
    }
  }
  return grads;
}

Tensor softmax_lastdim(const Tensor& logits) {
  if (logits.rank() < 1) throw DimensionError("softmax needs rank >= 1");
  const int C = logits.dim(logits.rank() - 1);
  Tensor out(logits.shape());
  const std::size_t rows = logits.size() / static_cast<std::size_t>(C);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* x = logits.data() + r * C;
    float* y = out.data() + r * C;
    const float mx = *std::max_element(x, x + C);
    double total = 0.0;
    for (int c = 0; c < C; ++c) {
      const double e = std::exp(static_cast<double>(x[c]) - mx);
      y[c] = static_cast<float>(e);
      total += e;
    }
    for (int c = 0; c < C; ++c) y[c] = static_cast<float>(y[c] / total);
  }
  return out;
}

}  // namespace mcblock::kernels
