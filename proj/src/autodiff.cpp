#include "diffml/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "diffml/error.hpp"

namespace diffml::autodiff {

namespace {

[[noreturn]] void shape_error(OpKind op, const Matrix& a, const Matrix& b, std::string_view rule) {
  throw Error(ErrorCode::shape_mismatch, std::string(op_name(op)) + ": " + a.shape_string() +
                                             " vs " + b.shape_string() + " (" +
                                             std::string(rule) + ")");
}

void accumulate(Node& parent, const Matrix& delta) {
  auto dst = parent.grad.values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// out(n x m) = a(n x k) * b(k x m), ikj order for contiguous inner loops.
void matmul_into(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax_rowwise: return "softmax_rowwise";
    case OpKind::mean: return "mean";
    case OpKind::mse_loss: return "mse_loss";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::concat_cols: return "concat_cols";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

Value Value::constant(Matrix data) {
  auto node = std::make_shared<Node>();
  node->data = std::move(data);
  return Value(std::move(node));
}

Value Value::parameter(Matrix data, std::string label) {
  auto node = std::make_shared<Node>();
  node->grad = Matrix(data.rows(), data.cols());
  node->data = std::move(data);
  node->requires_grad = true;
  node->label = std::move(label);
  return Value(std::move(node));
}

double Value::item() const {
  if (node_->data.rows() != 1 || node_->data.cols() != 1) {
    throw Error(ErrorCode::shape_mismatch, "item() on non-scalar " + node_->data.shape_string());
  }
  return node_->data(0, 0);
}

void Value::zero_grad() {
  if (node_->requires_grad) node_->grad.fill(0.0);
}

Value make_node(Matrix data, OpKind op, std::vector<Value> parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->requires_grad = std::any_of(parents.begin(), parents.end(),
                                    [](const Value& p) { return p.requires_grad(); });
  if (node->requires_grad) {
    node->grad = Matrix(data.rows(), data.cols());
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  node->data = std::move(data);
  return Value(std::move(node));
}

Value add(const Value& a, const Value& b) {
  const Matrix& x = a.data();
  const Matrix& y = b.data();
  const bool broadcast = y.rows() == 1 && x.rows() != 1 && y.cols() == x.cols();
  if (!x.same_shape(y) && !broadcast) shape_error(OpKind::add, x, y, "equal shapes or row bias");
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto orow = out.row(i);
    auto yrow = y.row(broadcast ? 0 : i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] += yrow[j];
  }
  return make_node(std::move(out), OpKind::add, {a, b}, [broadcast](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) accumulate(pa, n.grad);
    if (pb.requires_grad) {
      if (!broadcast) {
        accumulate(pb, n.grad);
      } else {
        for (std::size_t i = 0; i < n.grad.rows(); ++i)
          for (std::size_t j = 0; j < n.grad.cols(); ++j) pb.grad(0, j) += n.grad(i, j);
      }
    }
  });
}

Value sub(const Value& a, const Value& b) {
  const Matrix& x = a.data();
  const Matrix& y = b.data();
  if (!x.same_shape(y)) shape_error(OpKind::sub, x, y, "equal shapes");
  Matrix out = x;
  auto ov = out.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= yv[i];
  return make_node(std::move(out), OpKind::sub, {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) accumulate(pa, n.grad);
    if (pb.requires_grad) {
      auto g = n.grad.values();
      auto dst = pb.grad.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
    }
  });
}

Value elementwise_mul(const Value& a, const Value& b) {
  const Matrix& x = a.data();
  const Matrix& y = b.data();
  if (!x.same_shape(y)) shape_error(OpKind::elementwise_mul, x, y, "equal shapes");
  Matrix out = x;
  auto ov = out.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= yv[i];
  return make_node(std::move(out), OpKind::elementwise_mul, {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    auto g = n.grad.values();
    if (pa.requires_grad) {
      auto yv = pb.data.values();
      auto dst = pa.grad.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * yv[i];
    }
    if (pb.requires_grad) {
      auto xv = pa.data.values();
      auto dst = pb.grad.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * xv[i];
    }
  });
}

Value matmul(const Value& a, const Value& b) {
  const Matrix& x = a.data();
  const Matrix& y = b.data();
  if (x.cols() != y.rows()) shape_error(OpKind::matmul, x, y, "inner dimensions");
  Matrix out(x.rows(), y.cols());
  matmul_into(x, y, out);
  return make_node(std::move(out), OpKind::matmul, {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    const Matrix& g = n.grad;
    if (pa.requires_grad) {
      // dA = G * B^T
      const Matrix& bm = pb.data;
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t p = 0; p < bm.rows(); ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j) * bm(p, j);
          pa.grad(i, p) += acc;
        }
      }
    }
    if (pb.requires_grad) {
      // dB = A^T * G
      const Matrix& am = pa.data;
      for (std::size_t i = 0; i < am.rows(); ++i) {
        for (std::size_t p = 0; p < am.cols(); ++p) {
          const double av = am(i, p);
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < g.cols(); ++j) pb.grad(p, j) += av * g(i, j);
        }
      }
    }
  });
}

Value relu(const Value& x) {
  Matrix out = x.data();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), OpKind::relu, {x}, [](Node& n) {
    Node& p = *n.parents[0];
    auto g = n.grad.values();
    auto in = p.data.values();
    auto dst = p.grad.values();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (in[i] > 0.0) dst[i] += g[i];
  });
}

Value sigmoid(const Value& x) {
  Matrix out = x.data();
  for (double& v : out.values()) {
    // Branch on sign so exp never overflows.
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return make_node(std::move(out), OpKind::sigmoid, {x}, [](Node& n) {
    Node& p = *n.parents[0];
    auto g = n.grad.values();
    auto s = n.data.values();
    auto dst = p.grad.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Value softmax_rowwise(const Value& x) {
  const Matrix& in = x.data();
  if (in.cols() == 0) {
    throw Error(ErrorCode::shape_mismatch, "softmax_rowwise: empty row in " + in.shape_string());
  }
  Matrix out(in.rows(), in.cols());
  for (std::size_t i = 0; i < in.rows(); ++i) {
    auto src = in.row(i);
    auto dst = out.row(i);
    const double peak = *std::max_element(src.begin(), src.end());
    double total = 0.0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      dst[j] = std::exp(src[j] - peak);
      total += dst[j];
    }
    for (double& v : dst) v /= total;
  }
  return make_node(std::move(out), OpKind::softmax_rowwise, {x}, [](Node& n) {
    Node& p = *n.parents[0];
    for (std::size_t i = 0; i < n.data.rows(); ++i) {
      auto y = n.data.row(i);
      auto g = n.grad.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) dot += g[j] * y[j];
      auto dst = p.grad.row(i);
      for (std::size_t j = 0; j < y.size(); ++j) dst[j] += y[j] * (g[j] - dot);
    }
  });
}

Value mean(const Value& x) {
  const Matrix& in = x.data();
  if (in.empty()) throw Error(ErrorCode::shape_mismatch, "mean: empty input");
  double total = 0.0;
  for (double v : in.values()) total += v;
  const double count = static_cast<double>(in.size());
  return make_node(Matrix::scalar(total / count), OpKind::mean, {x}, [count](Node& n) {
    Node& p = *n.parents[0];
    const double g = n.grad(0, 0) / count;
    for (double& d : p.grad.values()) d += g;
  });
}

Value mse_loss(const Value& pred, const Matrix& target) {
  const Matrix& p = pred.data();
  if (!p.same_shape(target)) shape_error(OpKind::mse_loss, p, target, "equal shapes");
  if (p.empty()) throw Error(ErrorCode::shape_mismatch, "mse_loss: empty batch");
  double total = 0.0;
  auto pv = p.values();
  auto tv = target.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = pv[i] - tv[i];
    total += d * d;
  }
  const double count = static_cast<double>(p.size());
  return make_node(Matrix::scalar(total / count), OpKind::mse_loss, {pred},
                   [target, count](Node& n) {
                     Node& pn = *n.parents[0];
                     const double scale = 2.0 * n.grad(0, 0) / count;
                     auto pv = pn.data.values();
                     auto tv = target.values();
                     auto dst = pn.grad.values();
                     for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * (pv[i] - tv[i]);
                   });
}

Value scalar_mul(const Value& x, double factor) {
  Matrix out = x.data();
  for (double& v : out.values()) v *= factor;
  return make_node(std::move(out), OpKind::scalar_mul, {x}, [factor](Node& n) {
    Node& p = *n.parents[0];
    auto g = n.grad.values();
    auto dst = p.grad.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
  });
}

Value concat_cols(std::span<const Value> parts) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& part : parts) {
    if (part.rows() != rows) {
      shape_error(OpKind::concat_cols, parts.front().data(), part.data(), "equal row counts");
    }
    cols += part.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const auto& part : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < part.cols(); ++j) out(i, offset + j) = part.data()(i, j);
    offset += part.cols();
  }
  return make_node(std::move(out), OpKind::concat_cols, {parts.begin(), parts.end()},
                   [](Node& n) {
                     std::size_t offset = 0;
                     for (auto& parent : n.parents) {
                       const std::size_t width = parent->data.cols();
                       if (parent->requires_grad) {
                         for (std::size_t i = 0; i < n.grad.rows(); ++i)
                           for (std::size_t j = 0; j < width; ++j)
                             parent->grad(i, j) += n.grad(i, offset + j);
                       }
                       offset += width;
                     }
                   });
}

Value tensor_op_eval(OpKind kind, std::span<const Value> inputs, double scalar) {
  auto need = [&](std::size_t count) {
    if (inputs.size() != count) {
      throw Error(ErrorCode::invalid_argument, std::string(op_name(kind)) + " expects " +
                                                   std::to_string(count) + " inputs, got " +
                                                   std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::elementwise_mul: need(2); return elementwise_mul(inputs[0], inputs[1]);
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::softmax_rowwise: need(1); return softmax_rowwise(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::mse_loss: need(2); return mse_loss(inputs[0], inputs[1].data());
    case OpKind::scalar_mul: need(1); return scalar_mul(inputs[0], scalar);
    case OpKind::concat_cols: return concat_cols(inputs);
    case OpKind::leaf:
    case OpKind::custom: break;
  }
  throw Error(ErrorCode::invalid_argument,
              "tensor_op_eval: unsupported op " + std::string(op_name(kind)));
}

void backward(const Value& loss) {
  if (!loss.valid()) throw Error(ErrorCode::invalid_argument, "backward: empty value");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw Error(ErrorCode::shape_mismatch, "backward: loss must be scalar, got " +
                                               loss.data().shape_string());
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up topologically sorted (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Leaves receive this call's contribution summed on its own and only then
  // added to what they already held, so k calls give exactly k times one call.
  std::vector<std::pair<Node*, Matrix>> held;
  for (Node* node : order) {
    if (!node->backward) held.emplace_back(node, node->grad);
    node->grad.fill(0.0);
  }
  Node& root = *loss.node();
  root.grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (auto& [leaf, previous] : held) {
    auto out = leaf->grad.values();
    auto prev = previous.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = prev[i] + out[i];
  }
}

GradCheckReport finite_diff_check(const std::function<Value()>& f, std::span<Value> params,
                                  double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::invalid_argument, "finite_diff_check: h must be > 0");
  for (auto& p : params) p.zero_grad();
  const Value loss = f();
  if (!std::isfinite(loss.item())) {
    throw Error(ErrorCode::non_finite, "finite_diff_check: f returned a non-finite value");
  }
  backward(loss);

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Value& param = params[k];
    const Matrix analytic = param.grad();
    double worst = 0.0;
    auto values = param.mutable_data().values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error(ErrorCode::non_finite, "finite_diff_check: f returned a non-finite value");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.values()[i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
    std::string name = param.label().empty() ? "param" + std::to_string(k) : param.label();
    report.per_parameter_errors.emplace_back(std::move(name), worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace diffml::autodiff
