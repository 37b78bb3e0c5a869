#include "svil/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace svil::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void expect_rank(const char* op, const char* name, Var v, std::size_t rank) {
  if (v.shape().size() != rank) {
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_string(v.shape()));
  }
}

void expect_same_graph(const char* op, Var a, Var b) {
  if (!a.valid() || !b.valid()) shape_error(op, "invalid (unbound) input");
  if (&a.graph() != &b.graph()) shape_error(op, "inputs belong to different graphs");
}

void expect_labels(const char* op, std::span<const int> labels, std::size_t rows,
                   std::size_t classes) {
  if (labels.size() != rows) {
    shape_error(op, std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      shape_error(op, "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace

Graph& Var::graph() const {
  if (!graph_) throw std::logic_error("Var: unbound handle");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(*this); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || &v.graph() != this || v.id() >= nodes_.size()) {
    throw std::invalid_argument("Graph: variable does not belong to this graph");
  }
  return nodes_[v.id()];
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw std::domain_error("constant: non-finite value");
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::parameter(Tensor value) {
  if (!value.all_finite()) throw std::domain_error("parameter: non-finite value");
  Node n;
  n.op = "parameter";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw std::domain_error(std::string(op) + ": non-finite output");
  bool needs = false;
  for (const auto& in : inputs) needs = needs || node(in).requires_grad;
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.requires_grad = needs && static_cast<bool>(backward);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Graph::grad(Var v) const {
  const auto& n = node(v);
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor* Graph::grad_buffer(Var v) {
  node(v);
  auto& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return &n.grad;
}

void Graph::accumulate(Var v, const Tensor& delta) {
  Tensor* g = grad_buffer(v);
  if (!g) return;
  if (g->shape() != delta.shape()) {
    throw std::logic_error(std::string("accumulate: gradient shape ") + shape_string(delta.shape()) +
                           " does not match " + shape_string(g->shape()));
  }
  auto dst = g->values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::backward(Var loss) {
  const auto& root = node(loss);
  if (root.value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = Tensor(root.value.shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // The callback only touches lower-indexed nodes, so this reference stays put.
    const Tensor& out_grad = n.grad;
    n.backward(*this, out_grad);
  }
  for (const auto& n : nodes_) {
    if (!n.grad.empty() && !n.grad.all_finite()) {
      throw std::domain_error(std::string("backward: non-finite gradient at ") + n.op);
    }
  }
}

Var channel_mix(Var x, Var weight, Var bias) {
  constexpr const char* op = "channel_mix";
  expect_same_graph(op, x, weight);
  expect_same_graph(op, x, bias);
  expect_rank(op, "input", x, 3);
  expect_rank(op, "weight", weight, 2);
  expect_rank(op, "bias", bias, 1);
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  const std::size_t n_batch = xs[0], in_c = xs[1], pix = xs[2], out_c = ws[0];
  if (ws[1] != in_c || bias.shape()[0] != out_c) {
    shape_error(op, "input " + shape_string(xs) + ", weight " + shape_string(ws) + ", bias " +
                        shape_string(bias.shape()));
  }
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  const double* bv = bias.value().data();
  Tensor out(Shape{n_batch, out_c, pix});
  double* ov = out.data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < out_c; ++o) {
      double* dst = ov + (n * out_c + o) * pix;
      std::fill(dst, dst + pix, bv[o]);
      for (std::size_t c = 0; c < in_c; ++c) {
        const double w = wv[o * in_c + c];
        const double* src = xv + (n * in_c + c) * pix;
        for (std::size_t p = 0; p < pix; ++p) dst[p] += w * src[p];
      }
    }
  }
  const Var inputs[] = {x, weight, bias};
  return x.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    const double* gv = go.data();
    const double* xv = g.value(x).data();
    const double* wv = g.value(weight).data();
    if (Tensor* gx = g.grad_buffer(x)) {
      double* d = gx->data();
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_c; ++o) {
          const double* src = gv + (n * out_c + o) * pix;
          for (std::size_t c = 0; c < in_c; ++c) {
            const double w = wv[o * in_c + c];
            double* dst = d + (n * in_c + c) * pix;
            for (std::size_t p = 0; p < pix; ++p) dst[p] += w * src[p];
          }
        }
    }
    if (Tensor* gw = g.grad_buffer(weight)) {
      double* d = gw->data();
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_c; ++o) {
          const double* gsrc = gv + (n * out_c + o) * pix;
          for (std::size_t c = 0; c < in_c; ++c) {
            const double* xsrc = xv + (n * in_c + c) * pix;
            double acc = 0.0;
            for (std::size_t p = 0; p < pix; ++p) acc += gsrc[p] * xsrc[p];
            d[o * in_c + c] += acc;
          }
        }
    }
    if (Tensor* gb = g.grad_buffer(bias)) {
      double* d = gb->data();
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_c; ++o) {
          const double* gsrc = gv + (n * out_c + o) * pix;
          double acc = 0.0;
          for (std::size_t p = 0; p < pix; ++p) acc += gsrc[p];
          d[o] += acc;
        }
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  const Var inputs[] = {x};
  return x.graph().record("relu", std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    Tensor* gx = g.grad_buffer(x);
    if (!gx) return;
    const auto xv = g.value(x).values();
    auto d = gx->values();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (xv[i] > 0.0) d[i] += go[i];
    }
  });
}

Var spatial_mean(Var x) {
  constexpr const char* op = "spatial_mean";
  expect_rank(op, "input", x, 3);
  const auto& xs = x.shape();
  const std::size_t rows = xs[0] * xs[1], pix = xs[2];
  Tensor out(Shape{xs[0], xs[1]});
  const double* xv = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t p = 0; p < pix; ++p) acc += xv[r * pix + p];
    out[r] = acc / static_cast<double>(pix);
  }
  const Var inputs[] = {x};
  return x.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    Tensor* gx = g.grad_buffer(x);
    if (!gx) return;
    double* d = gx->data();
    const double inv = 1.0 / static_cast<double>(pix);
    for (std::size_t r = 0; r < rows; ++r) {
      const double gr = go[r] * inv;
      for (std::size_t p = 0; p < pix; ++p) d[r * pix + p] += gr;
    }
  });
}

Var dense(Var x, Var weight, Var bias) {
  constexpr const char* op = "dense";
  expect_same_graph(op, x, weight);
  expect_same_graph(op, x, bias);
  expect_rank(op, "input", x, 2);
  expect_rank(op, "weight", weight, 2);
  expect_rank(op, "bias", bias, 1);
  const std::size_t n_batch = x.shape()[0], in_d = x.shape()[1], out_d = weight.shape()[0];
  if (weight.shape()[1] != in_d || bias.shape()[0] != out_d) {
    shape_error(op, "input " + shape_string(x.shape()) + ", weight " + shape_string(weight.shape()) +
                        ", bias " + shape_string(bias.shape()));
  }
  const double* xv = x.value().data();
  const double* wv = weight.value().data();
  const double* bv = bias.value().data();
  Tensor out(Shape{n_batch, out_d});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < out_d; ++o) {
      double acc = bv[o];
      for (std::size_t i = 0; i < in_d; ++i) acc += wv[o * in_d + i] * xv[n * in_d + i];
      out[n * out_d + o] = acc;
    }
  const Var inputs[] = {x, weight, bias};
  return x.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    const double* xv = g.value(x).data();
    const double* wv = g.value(weight).data();
    if (Tensor* gx = g.grad_buffer(x)) {
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_d; ++o) {
          const double gr = go[n * out_d + o];
          for (std::size_t i = 0; i < in_d; ++i) (*gx)[n * in_d + i] += gr * wv[o * in_d + i];
        }
    }
    if (Tensor* gw = g.grad_buffer(weight)) {
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_d; ++o) {
          const double gr = go[n * out_d + o];
          for (std::size_t i = 0; i < in_d; ++i) (*gw)[o * in_d + i] += gr * xv[n * in_d + i];
        }
    }
    if (Tensor* gb = g.grad_buffer(bias)) {
      for (std::size_t n = 0; n < n_batch; ++n)
        for (std::size_t o = 0; o < out_d; ++o) (*gb)[o] += go[n * out_d + o];
    }
  });
}

Var l2_normalize_rows(Var x) {
  constexpr const char* op = "l2_normalize_rows";
  const auto& xs = x.shape();
  if (xs.size() != 1 && xs.size() != 2) shape_error(op, "expected rank 1 or 2, got " + shape_string(xs));
  const std::size_t rows = xs.size() == 1 ? 1 : xs[0];
  const std::size_t cols = x.value().size() / rows;
  Tensor out = x.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += out[r * cols + c] * out[r * cols + c];
    if (!(ss > 0.0)) shape_error(op, "row " + std::to_string(r) + " has zero norm");
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= norms[r];
  }
  Tensor normalized = out;
  const Var inputs[] = {x};
  return x.graph().record(
      op, std::move(out), inputs,
      [=, norms = std::move(norms), normalized = std::move(normalized)](Graph& g, const Tensor& go) {
        Tensor* gx = g.grad_buffer(x);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * normalized[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            (*gx)[r * cols + c] += (go[r * cols + c] - dot * normalized[r * cols + c]) / norms[r];
          }
        }
      });
}

Var matmul_nt(Var a, Var b) {
  constexpr const char* op = "matmul_nt";
  expect_same_graph(op, a, b);
  expect_rank(op, "lhs", a, 2);
  expect_rank(op, "rhs", b, 2);
  const std::size_t n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
  if (b.shape()[1] != d) shape_error(op, "lhs " + shape_string(a.shape()) + ", rhs " + shape_string(b.shape()));
  const double* av = a.value().data();
  const double* bv = b.value().data();
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += av[i * d + k] * bv[j * d + k];
      out[i * m + j] = acc;
    }
  const Var inputs[] = {a, b};
  return a.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    const double* av = g.value(a).data();
    const double* bv = g.value(b).data();
    if (Tensor* ga = g.grad_buffer(a)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gr = go[i * m + j];
          for (std::size_t k = 0; k < d; ++k) (*ga)[i * d + k] += gr * bv[j * d + k];
        }
    }
    if (Tensor* gb = g.grad_buffer(b)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gr = go[i * m + j];
          for (std::size_t k = 0; k < d; ++k) (*gb)[j * d + k] += gr * av[i * d + k];
        }
    }
  });
}

Var div_scalar(Var x, Var s) {
  constexpr const char* op = "div_scalar";
  expect_same_graph(op, x, s);
  if (s.value().size() != 1) shape_error(op, "divisor must be single-element, got " + shape_string(s.shape()));
  const double sv = s.value()[0];
  if (sv == 0.0) throw std::domain_error("div_scalar: division by zero");
  Tensor out = x.value();
  for (auto& v : out.values()) v /= sv;
  const Var inputs[] = {x, s};
  return x.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    const auto xv = g.value(x).values();
    if (Tensor* gx = g.grad_buffer(x)) {
      for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += go[i] / sv;
    }
    if (Tensor* gs = g.grad_buffer(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += go[i] * xv[i];
      (*gs)[0] += -acc / (sv * sv);
    }
  });
}

Var softmax_rows(Var x) {
  constexpr const char* op = "softmax_rows";
  expect_rank(op, "input", x, 2);
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) z += (v = std::exp(v - mx));
    for (auto& v : row) v /= z;
  }
  Tensor probs = out;
  const Var inputs[] = {x};
  return x.graph().record(op, std::move(out), inputs,
                          [=, probs = std::move(probs)](Graph& g, const Tensor& go) {
                            Tensor* gx = g.grad_buffer(x);
                            if (!gx) return;
                            for (std::size_t r = 0; r < rows; ++r) {
                              double dot = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * probs[r * cols + c];
                              for (std::size_t c = 0; c < cols; ++c)
                                (*gx)[r * cols + c] += probs[r * cols + c] * (go[r * cols + c] - dot);
                            }
                          });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  constexpr const char* op = "cross_entropy";
  expect_rank(op, "logits", logits, 2);
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  expect_labels(op, labels, rows, cols);
  Tensor probs = logits.value();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = probs.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[labels[r]];
    for (auto& v : row) v = std::exp(v - log_z);
  }
  std::vector<int> y(labels.begin(), labels.end());
  const Var inputs[] = {logits};
  return logits.graph().record(
      op, Tensor::scalar(total / static_cast<double>(rows)), inputs,
      [=, probs = std::move(probs), y = std::move(y)](Graph& g, const Tensor& go) {
        Tensor* gx = g.grad_buffer(logits);
        if (!gx) return;
        const double s = go[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const double target = static_cast<int>(c) == y[r] ? 1.0 : 0.0;
            (*gx)[r * cols + c] += s * (probs[r * cols + c] - target);
          }
        }
      });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().values()) acc += v;
  const Var inputs[] = {x};
  return x.graph().record("sum", Tensor::scalar(acc), inputs, [=](Graph& g, const Tensor& go) {
    Tensor* gx = g.grad_buffer(x);
    if (!gx) return;
    for (auto& v : gx->values()) v += go[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var add(Var a, Var b) {
  constexpr const char* op = "add";
  expect_same_graph(op, a, b);
  if (a.shape() != b.shape()) shape_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const Var inputs[] = {a, b};
  return a.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var mul(Var a, Var b) {
  constexpr const char* op = "mul";
  expect_same_graph(op, a, b);
  if (a.shape() != b.shape()) shape_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const Var inputs[] = {a, b};
  return a.graph().record(op, std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    const auto av = g.value(a).values();
    const auto bv = g.value(b).values();
    if (Tensor* ga = g.grad_buffer(a))
      for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += go[i] * bv[i];
    if (Tensor* gb = g.grad_buffer(b))
      for (std::size_t i = 0; i < av.size(); ++i) (*gb)[i] += go[i] * av[i];
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= factor;
  const Var inputs[] = {x};
  return x.graph().record("scale", std::move(out), inputs, [=](Graph& g, const Tensor& go) {
    Tensor* gx = g.grad_buffer(x);
    if (!gx) return;
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += factor * go[i];
  });
}

Var pairwise_distance(Var x) {
  constexpr const char* op = "pairwise_distance";
  expect_rank(op, "input", x, 2);
  // Keeps sqrt differentiable for coincident rows.
  constexpr double kFloor = 1e-12;
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  const double* xv = x.value().data();
  Tensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xv[i * d + k] - xv[j * d + k];
        ss += diff * diff;
      }
      out[i * n + j] = out[j * n + i] = std::sqrt(ss + kFloor);
    }
  Tensor dist = out;
  const Var inputs[] = {x};
  return x.graph().record(op, std::move(out), inputs,
                          [=, dist = std::move(dist)](Graph& g, const Tensor& go) {
                            Tensor* gx = g.grad_buffer(x);
                            if (!gx) return;
                            const double* xv = g.value(x).data();
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < n; ++j) {
                                if (i == j) continue;
                                const double gr = go[i * n + j];
                                if (gr == 0.0) continue;
                                const double s = gr / dist[i * n + j];
                                for (std::size_t k = 0; k < d; ++k) {
                                  const double diff = xv[i * d + k] - xv[j * d + k];
                                  (*gx)[i * d + k] += s * diff;
                                  (*gx)[j * d + k] -= s * diff;
                                }
                              }
                          });
}

Var batch_hard_triplet(Var dist, std::span<const int> labels, double margin) {
  constexpr const char* op = "batch_hard_triplet";
  expect_rank(op, "distances", dist, 2);
  const std::size_t n = dist.shape()[0];
  if (dist.shape()[1] != n) shape_error(op, "distance matrix must be square, got " + shape_string(dist.shape()));
  if (labels.size() != n) shape_error(op, std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  const auto dv = dist.value().values();
  struct Pick {
    std::size_t anchor, pos, neg;
  };
  std::vector<Pick> active;
  std::size_t anchors = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pos = n, neg = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (pos == n || dv[i * n + j] > dv[i * n + pos]) pos = j;
      } else if (neg == n || dv[i * n + j] < dv[i * n + neg]) {
        neg = j;
      }
    }
    if (pos == n || neg == n) continue;
    ++anchors;
    const double v = dv[i * n + pos] - dv[i * n + neg] + margin;
    if (v > 0.0) {
      total += v;
      active.push_back({i, pos, neg});
    }
  }
  if (anchors == 0) {
    throw std::invalid_argument(std::string(op) + ": no anchor has both a positive and a negative");
  }
  const Var inputs[] = {dist};
  return dist.graph().record(op, Tensor::scalar(total / static_cast<double>(anchors)), inputs,
                             [=, active = std::move(active)](Graph& g, const Tensor& go) {
                               Tensor* gd = g.grad_buffer(dist);
                               if (!gd) return;
                               const double s = go[0] / static_cast<double>(anchors);
                               for (const auto& p : active) {
                                 (*gd)[p.anchor * n + p.pos] += s;
                                 (*gd)[p.anchor * n + p.neg] -= s;
                               }
                             });
}

Var restyle(Var x, std::span<const RestyleTarget> targets, double eps) {
  constexpr const char* op = "restyle";
  expect_rank(op, "input", x, 3);
  const std::size_t n_batch = x.shape()[0], channels = x.shape()[1], pix = x.shape()[2];
  std::vector<char> seen(n_batch, 0);
  for (const auto& t : targets) {
    if (t.sample >= n_batch) {
      shape_error(op, "target sample " + std::to_string(t.sample) + " outside batch of " + std::to_string(n_batch));
    }
    if (seen[t.sample]) shape_error(op, "sample " + std::to_string(t.sample) + " targeted twice");
    seen[t.sample] = 1;
    if (t.mu.size() != channels || t.sigma.size() != channels) {
      shape_error(op, "target statistics length " + std::to_string(t.mu.size()) + "/" +
                          std::to_string(t.sigma.size()) + " for " + std::to_string(channels) + " channels");
    }
  }
  Tensor out = x.value();
  // Per targeted (sample, channel): normalized content and inverse std.
  struct Cache {
    std::size_t offset;
    double target_sigma;
    double inv_sigma;
  };
  std::vector<Cache> cache;
  std::vector<double> xhat(targets.size() * channels * pix);
  const double inv_pix = 1.0 / static_cast<double>(pix);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& tgt = targets[t];
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (tgt.sample * channels + c) * pix;
      double m = 0.0;
      for (std::size_t p = 0; p < pix; ++p) m += out[off + p];
      m *= inv_pix;
      double var = 0.0;
      for (std::size_t p = 0; p < pix; ++p) var += (out[off + p] - m) * (out[off + p] - m);
      var *= inv_pix;
      const double inv_sigma = 1.0 / std::sqrt(var + eps);
      double* xh = xhat.data() + (t * channels + c) * pix;
      for (std::size_t p = 0; p < pix; ++p) {
        xh[p] = (out[off + p] - m) * inv_sigma;
        out[off + p] = tgt.sigma[c] * xh[p] + tgt.mu[c];
      }
      cache.push_back({off, tgt.sigma[c], inv_sigma});
    }
  }
  const Var inputs[] = {x};
  return x.graph().record(
      op, std::move(out), inputs,
      [=, cache = std::move(cache), xhat = std::move(xhat), seen = std::move(seen)](Graph& g, const Tensor& go) {
        Tensor* gx = g.grad_buffer(x);
        if (!gx) return;
        for (std::size_t s = 0; s < n_batch; ++s) {
          if (seen[s]) continue;
          const std::size_t off = s * channels * pix;
          for (std::size_t i = 0; i < channels * pix; ++i) (*gx)[off + i] += go[off + i];
        }
        // dL/dx = sigma_t/sigma * (g - mean(g) - xhat * mean(g * xhat))
        for (std::size_t k = 0; k < cache.size(); ++k) {
          const auto& cc = cache[k];
          const double* xh = xhat.data() + k * pix;
          double g_mean = 0.0, gx_mean = 0.0;
          for (std::size_t p = 0; p < pix; ++p) {
            g_mean += go[cc.offset + p];
            gx_mean += go[cc.offset + p] * xh[p];
          }
          g_mean *= inv_pix;
          gx_mean *= inv_pix;
          const double s = cc.target_sigma * cc.inv_sigma;
          for (std::size_t p = 0; p < pix; ++p) {
            (*gx)[cc.offset + p] += s * (go[cc.offset + p] - g_mean - xh[p] * gx_mean);
          }
        }
      });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
  constexpr const char* op = "select_rows";
  const auto& xs = x.shape();
  if (xs.empty()) shape_error(op, "input must have rank >= 1");
  if (rows.empty()) shape_error(op, "empty row selection");
  const std::size_t stride = x.value().row_size();
  Shape out_shape = xs;
  out_shape[0] = rows.size();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xs[0]) shape_error(op, "row " + std::to_string(rows[i]) + " outside " + shape_string(xs));
    const auto src = x.value().row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const Var inputs[] = {x};
  return x.graph().record(op, std::move(out), inputs, [=, idx = std::move(idx)](Graph& g, const Tensor& go) {
    Tensor* gx = g.grad_buffer(x);
    if (!gx) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t k = 0; k < stride; ++k) (*gx)[idx[i] * stride + k] += go[i * stride + k];
  });
}

}  // namespace svil::ad
