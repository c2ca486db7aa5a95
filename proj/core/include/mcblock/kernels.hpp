#pragma once

#include "mcblock/tensor.hpp"

// Raw numeric kernels behind the graph ops. Single-threaded by contract.
namespace mcblock::kernels {

/// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(int M, int N, int K, const float* A, const float* B, float* C);
/// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(int M, int N, int K, const float* A, const float* B, float* C);
/// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C);

int conv_out_extent(int in, int kernel, int stride, int pad);

void im2col(const float* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            float* cols);
/// Accumulates into img.
void col2im(const float* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
            float* img);

/// input [N,C,H,W], kernel [F,C,kH,kW] -> [N,F,H',W'], zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad);

struct Conv2dGrads {
  Tensor d_input;
  Tensor d_kernel;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& d_out,
                            int stride, int pad, bool need_input_grad = true);

/// Row-wise softmax over the last dimension, max-subtracted.
Tensor softmax_lastdim(const Tensor& logits);

}  // namespace mcblock::kernels
