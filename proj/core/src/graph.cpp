#include "mcblock/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mcblock/error.hpp"
#include "mcblock/kernels.hpp"

namespace mcblock {

Var Graph::push(Tensor value, std::vector<int> inputs,
                std::function<void(Graph&, int)> backward) {
  if (consumed_) throw ContractError("graph already consumed by backward(); call reset()");
  Node n;
  n.value = std::move(value);
  for (int in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw ContractError("invalid graph variable");
  return nodes_[v.id];
}

Tensor& Graph::grad_slot(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Graph::constant(Tensor value) {
  value.requires_grad = false;
  return push(std::move(value), {}, nullptr);
}

Var Graph::parameter(Tensor value) {
  value.requires_grad = true;
  Var v = push(std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = true;
  return v;
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Var Graph::conv2d(Var input, Var kernel, int stride, int padding) {
  Tensor out = kernels::conv2d(value(input), value(kernel), stride, padding);
  return push(std::move(out), {input.id, kernel.id}, [stride, padding](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    const int xi = n.inputs[0], ki = n.inputs[1];
    const bool need_x = g.nodes_[xi].requires_grad;
    auto grads = kernels::conv2d_backward(g.nodes_[xi].value, g.nodes_[ki].value, n.grad, stride,
                                          padding, need_x);
    if (need_x) {
      Tensor& dx = g.grad_slot(xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += grads.d_input[i];
    }
    if (g.nodes_[ki].requires_grad) {
      Tensor& dk = g.grad_slot(ki);
      for (std::size_t i = 0; i < dk.size(); ++i) dk[i] += grads.d_kernel[i];
    }
  });
}

Var Graph::add_channel_bias(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  if (xv.rank() != 4 || bv.size() != static_cast<std::size_t>(xv.dim(1)))
    throw DimensionError("add_channel_bias: bias " + shape_str(bv.shape()) +
                         " does not match channels of " + shape_str(xv.shape()));
  Tensor out = xv;
  const int N = xv.dim(0), C = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* p = out.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += bv[c];
    }
  return push(std::move(out), {x.id, bias.id}, [N, C, hw](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    const int xi = n.inputs[0], bi = n.inputs[1];
    if (g.nodes_[xi].requires_grad) {
      Tensor& dx = g.grad_slot(xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i];
    }
    if (g.nodes_[bi].requires_grad) {
      Tensor& db = g.grad_slot(bi);
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < N; ++b) {
          const float* p = n.grad.data() + (static_cast<std::size_t>(b) * C + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        }
        db[c] += static_cast<float>(acc);
      }
    }
  });
}

Var Graph::dense(Var x, Var weight, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  const Tensor& bv = value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0) ||
      bv.size() != static_cast<std::size_t>(wv.dim(1)))
    throw DimensionError("dense: incompatible shapes " + shape_str(xv.shape()) + " x " +
                         shape_str(wv.shape()) + " + " + shape_str(bv.shape()));
  const int N = xv.dim(0), D = xv.dim(1), K = wv.dim(1);
  Tensor out({N, K});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) out[static_cast<std::size_t>(n) * K + k] = bv[k];
  kernels::gemm_nn(N, K, D, xv.data(), wv.data(), out.data());
  return push(std::move(out), {x.id, weight.id, bias.id}, [N, D, K](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    const int xi = n.inputs[0], wi = n.inputs[1], bi = n.inputs[2];
    if (g.nodes_[xi].requires_grad)  // dx = dy * W^T
      kernels::gemm_nt(N, D, K, n.grad.data(), g.nodes_[wi].value.data(), g.grad_slot(xi).data());
    if (g.nodes_[wi].requires_grad)  // dW = x^T * dy
      kernels::gemm_tn(D, K, N, g.nodes_[xi].value.data(), n.grad.data(), g.grad_slot(wi).data());
    if (g.nodes_[bi].requires_grad) {
      Tensor& db = g.grad_slot(bi);
      for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int r = 0; r < N; ++r) acc += n.grad[static_cast<std::size_t>(r) * K + k];
        db[k] += static_cast<float>(acc);
      }
    }
  });
}

#define MCBLOCK_UNARY(NAME, FWD, DERIV)                                           \
  Var Graph::NAME(Var x) {                                                        \
    const Tensor& xv = value(x);                                                  \
    Tensor out(xv.shape());                                                       \
    for (std::size_t i = 0; i < xv.size(); ++i) {                                 \
      const float v = xv[i];                                                      \
      out[i] = (FWD);                                                             \
    }                                                                             \
    return push(std::move(out), {x.id}, [](Graph& g, int self) {                  \
      const Node& n = g.nodes_[self];                                             \
      const Tensor& in = g.nodes_[n.inputs[0]].value;                             \
      Tensor& dx = g.grad_slot(n.inputs[0]);                                      \
      for (std::size_t i = 0; i < dx.size(); ++i) {                               \
        const float v = in[i];                                                    \
        const float y = n.value[i];                                               \
        (void)v;                                                                  \
        (void)y;                                                                  \
        dx[i] += n.grad[i] * (DERIV);                                             \
      }                                                                           \
    });                                                                           \
  }

MCBLOCK_UNARY(relu, v > 0.0f ? v : 0.0f, v > 0.0f ? 1.0f : 0.0f)
MCBLOCK_UNARY(sigmoid, 1.0f / (1.0f + std::exp(-v)), y * (1.0f - y))
MCBLOCK_UNARY(exp, std::exp(v), y)

#undef MCBLOCK_UNARY

Var Graph::leaky_relu(Var x, float alpha) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : alpha * xv[i];
  return push(std::move(out), {x.id}, [alpha](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    const Tensor& in = g.nodes_[n.inputs[0]].value;
    Tensor& dx = g.grad_slot(n.inputs[0]);
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] += n.grad[i] * (in[i] > 0.0f ? 1.0f : alpha);
  });
}

Var Graph::mul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != bv.rank())
    throw DimensionError("mul: rank mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  for (int d = 0; d < av.rank(); ++d)
    if (bv.dim(d) != av.dim(d) && bv.dim(d) != 1)
      throw DimensionError("mul: " + shape_str(bv.shape()) + " not broadcastable to " +
                           shape_str(av.shape()));
  // Index map from each element of a to its element of b.
  const Shape& as = av.shape();
  const Shape& bs = bv.shape();
  std::vector<std::size_t> bstride(as.size(), 0);
  {
    std::size_t s = 1;
    for (int d = static_cast<int>(as.size()) - 1; d >= 0; --d) {
      bstride[d] = bs[d] == 1 ? 0 : s;
      s *= static_cast<std::size_t>(bs[d]);
    }
  }
  std::vector<std::size_t> bidx(av.size());
  {
    std::vector<int> coord(as.size(), 0);
    for (std::size_t i = 0; i < av.size(); ++i) {
      std::size_t j = 0;
      for (std::size_t d = 0; d < as.size(); ++d) j += coord[d] * bstride[d];
      bidx[i] = j;
      for (int d = static_cast<int>(as.size()) - 1; d >= 0; --d) {
        if (++coord[d] < as[d]) break;
        coord[d] = 0;
      }
    }
  }
  Tensor out(as);
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[bidx[i]];
  return push(std::move(out), {a.id, b.id}, [bidx = std::move(bidx)](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    const int ai = n.inputs[0], bi = n.inputs[1];
    const Tensor& aval = g.nodes_[ai].value;
    const Tensor& bval = g.nodes_[bi].value;
    if (g.nodes_[ai].requires_grad) {
      Tensor& da = g.grad_slot(ai);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += n.grad[i] * bval[bidx[i]];
    }
    if (g.nodes_[bi].requires_grad) {
      std::vector<double> acc(bval.size(), 0.0);
      for (std::size_t i = 0; i < aval.size(); ++i)
        acc[bidx[i]] += static_cast<double>(n.grad[i]) * aval[i];
      Tensor& db = g.grad_slot(bi);
      for (std::size_t j = 0; j < db.size(); ++j) db[j] += static_cast<float>(acc[j]);
    }
  });
}

Var Graph::scale(Var x, float s) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * s;
  return push(std::move(out), {x.id}, [s](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    Tensor& dx = g.grad_slot(n.inputs[0]);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i] * s;
  });
}

Var Graph::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.shape() != bv.shape())
    throw DimensionError("add: shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return push(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    for (int in : n.inputs) {
      if (!g.nodes_[in].requires_grad) continue;
      Tensor& d = g.grad_slot(in);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += n.grad[i];
    }
  });
}

Var Graph::sum(Var x) {
  const Tensor& xv = value(x);
  double acc = 0.0;
  for (float v : xv.values()) acc += v;
  return push(Tensor::scalar(static_cast<float>(acc)), {x.id}, [](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    Tensor& dx = g.grad_slot(n.inputs[0]);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[0];
  });
}

Var Graph::mean(Var x) {
  const Tensor& xv = value(x);
  double acc = 0.0;
  for (float v : xv.values()) acc += v;
  const double count = static_cast<double>(xv.size());
  return push(Tensor::scalar(static_cast<float>(acc / count)), {x.id},
              [count](Graph& g, int self) {
                const Node& n = g.nodes_[self];
                Tensor& dx = g.grad_slot(n.inputs[0]);
                const float s = static_cast<float>(n.grad[0] / count);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s;
              });
}

Var Graph::max_pool2d(Var x, int kernel, int stride) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) throw DimensionError("max_pool2d expects [N,C,H,W]");
  if (kernel < 1 || stride < 1) throw DimensionError("max_pool2d: kernel and stride must be >= 1");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (kernel > H || kernel > W)
    throw DimensionError("max_pool2d: window " + std::to_string(kernel) + " larger than map " +
                         shape_str(xv.shape()));
  const int Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  Tensor out({N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.size());
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          std::size_t best = base + static_cast<std::size_t>(oy * stride) * W + ox * stride;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const std::size_t idx =
                  base + static_cast<std::size_t>(oy * stride + ky) * W + (ox * stride + kx);
              if (xv[idx] > xv[best]) best = idx;
            }
          argmax[o] = best;
          out[o] = xv[best];
        }
    }
  return push(std::move(out), {x.id}, [argmax = std::move(argmax)](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    Tensor& dx = g.grad_slot(n.inputs[0]);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += n.grad[i];
  });
}

Var Graph::softmax(Var x) {
  const Tensor& xv = value(x);
  if (xv.rank() < 1 || xv.dim(xv.rank() - 1) < 1) throw DimensionError("softmax needs C >= 1");
  const int C = xv.dim(xv.rank() - 1);
  return push(kernels::softmax_lastdim(xv), {x.id}, [C](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    Tensor& dx = g.grad_slot(n.inputs[0]);
    const std::size_t rows = n.value.size() / static_cast<std::size_t>(C);
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = n.value.data() + r * C;
      const float* dy = n.grad.data() + r * C;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += static_cast<double>(dy[c]) * y[c];
      for (int c = 0; c < C; ++c)
        dx[r * C + c] += static_cast<float>(y[c] * (dy[c] - dot));
    }
  });
}

Var Graph::reshape(Var x, Shape shape) {
  Tensor out = value(x).reshaped(std::move(shape));
  return push(std::move(out), {x.id}, [](Graph& g, int self) {
    const Node& n = g.nodes_[self];
    Tensor& dx = g.grad_slot(n.inputs[0]);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += n.grad[i];
  });
}

Var Graph::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2 || static_cast<std::size_t>(lv.dim(0)) != labels.size())
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const int N = lv.dim(0), C = lv.dim(1);
  Tensor probs = kernels::softmax_lastdim(lv);
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    if (lab[n] < 0 || lab[n] >= C) throw ContractError("class label out of range");
    // log-softmax computed directly to stay finite for confident rows.
    const float* x = lv.data() + static_cast<std::size_t>(n) * C;
    const float mx = *std::max_element(x, x + C);
    double se = 0.0;
    for (int c = 0; c < C; ++c) se += std::exp(static_cast<double>(x[c]) - mx);
    loss += std::log(se) + mx - x[lab[n]];
  }
  return push(Tensor::scalar(static_cast<float>(loss / N)), {logits.id},
              [N, C, probs = std::move(probs), lab = std::move(lab)](Graph& g, int self) {
                const Node& n = g.nodes_[self];
                Tensor& dx = g.grad_slot(n.inputs[0]);
                const float s = n.grad[0] / static_cast<float>(N);
                for (int r = 0; r < N; ++r)
                  for (int c = 0; c < C; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * C + c;
                    dx[i] += s * (probs[i] - (c == lab[r] ? 1.0f : 0.0f));
                  }
              });
}

Var Graph::custom(std::span<const Var> inputs, Tensor value, CustomBackward backward) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (Var v : inputs) {
    node(v);
    ids.push_back(v.id);
  }
  return push(std::move(value), std::move(ids),
              [fn = std::move(backward)](Graph& g, int self) {
                const Node& n = g.nodes_[self];
                std::vector<Tensor*> slots;
                slots.reserve(n.inputs.size());
                for (int in : n.inputs)
                  slots.push_back(g.nodes_[in].requires_grad ? &g.grad_slot(in) : nullptr);
                fn(n.grad, slots);
              });
}

void Graph::backward(Var loss) {
  if (consumed_) throw ContractError("backward called twice on the same graph");
  const Node& root = node(loss);
  if (root.value.size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(root.value.shape()));
  consumed_ = true;
  if (!root.requires_grad) return;
  grad_slot(loss.id)[0] = 1.0f;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Graph::reset() {
  nodes_.clear();
  consumed_ = false;
}

}  // namespace mcblock
