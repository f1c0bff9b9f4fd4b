#include "xrec/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace xrec {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

std::string op_msg(OpKind kind, const std::string& detail) {
  return std::string(op_name(kind)) + ": " + detail;
}

std::string two_shapes(const Mat& a, const Mat& b) {
  return shape_str(a) + " and " + shape_str(b);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

Mat softmax_rows(const Mat& a) {
  Mat out(a.rows(), a.cols());
  for (long r = 0; r < a.rows(); ++r) {
    double mx = a.row(r).maxCoeff();
    Eigen::ArrayXd e = (a.row(r).array() - mx).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kScalarScale: return "scalar-scale";
    case OpKind::kRowSoftmax: return "row-softmax";
    case OpKind::kLayerNorm: return "layer-norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kEmbeddingLookup: return "embedding-lookup";
    case OpKind::kConcatRows: return "concat-rows";
    case OpKind::kSliceRows: return "slice-rows";
    case OpKind::kMean: return "mean";
    case OpKind::kCrossEntropyWithLogits: return "cross-entropy-with-logits";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
  }
  return "unknown-op";
}

Tensor Tape::record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs) {
  for (const Tensor& t : inputs)
    require(t.defined(), op_msg(kind, "undefined input tensor"));

  std::vector<Mat> saved;
  Mat out;

  switch (kind) {
    case OpKind::kMatmul: {
      require(inputs.size() == 2, op_msg(kind, "expects 2 inputs"));
      const Mat& a = inputs[0].value();
      const Mat& b = inputs[1].value();
      long inner_a = attrs.trans_a ? a.rows() : a.cols();
      long inner_b = attrs.trans_b ? b.cols() : b.rows();
      require(inner_a == inner_b,
              op_msg(kind, "incompatible shapes " + two_shapes(a, b) +
                               (attrs.trans_a ? " (a transposed)" : "") +
                               (attrs.trans_b ? " (b transposed)" : "")));
      if (!attrs.trans_a && !attrs.trans_b) out = a * b;
      else if (attrs.trans_a && !attrs.trans_b) out = a.transpose() * b;
      else if (!attrs.trans_a && attrs.trans_b) out = a * b.transpose();
      else out = a.transpose() * b.transpose();
      break;
    }
    case OpKind::kAdd: {
      require(inputs.size() == 2, op_msg(kind, "expects 2 inputs"));
      const Mat& a = inputs[0].value();
      const Mat& b = inputs[1].value();
      if (a.rows() == b.rows() && a.cols() == b.cols()) {
        out = a + b;
      } else if (b.rows() == 1 && b.cols() == a.cols()) {
        out = a.array().rowwise() + b.array().row(0);
      } else {
        throw TensorError(op_msg(kind, "incompatible shapes " + two_shapes(a, b)));
      }
      break;
    }
    case OpKind::kMultiply: {
      require(inputs.size() == 2, op_msg(kind, "expects 2 inputs"));
      const Mat& a = inputs[0].value();
      const Mat& b = inputs[1].value();
      require(a.rows() == b.rows() && a.cols() == b.cols(),
              op_msg(kind, "incompatible shapes " + two_shapes(a, b)));
      out = a.cwiseProduct(b);
      break;
    }
    case OpKind::kScalarScale: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      out = attrs.scale * inputs[0].value();
      break;
    }
    case OpKind::kRowSoftmax: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      const Mat& a = inputs[0].value();
      require(a.rows() >= 1 && a.cols() >= 1,
              op_msg(kind, "needs a non-empty input, got " + shape_str(a)));
      out = softmax_rows(a);
      break;
    }
    case OpKind::kLayerNorm: {
      require(inputs.size() == 3, op_msg(kind, "expects inputs {x, gain, bias}"));
      const Mat& x = inputs[0].value();
      const Mat& g = inputs[1].value();
      const Mat& b = inputs[2].value();
      require(g.rows() == 1 && g.cols() == x.cols(),
              op_msg(kind, "gain shape " + shape_str(g) + " does not match x " + shape_str(x)));
      require(b.rows() == 1 && b.cols() == x.cols(),
              op_msg(kind, "bias shape " + shape_str(b) + " does not match x " + shape_str(x)));
      require(x.cols() >= 1, op_msg(kind, "needs at least one column, got " + shape_str(x)));
      Mat xhat(x.rows(), x.cols());
      Mat inv_std(x.rows(), 1);
      double n = static_cast<double>(x.cols());
      for (long r = 0; r < x.rows(); ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().sum() / n;
        double inv = 1.0 / std::sqrt(var + attrs.eps);
        inv_std(r, 0) = inv;
        xhat.row(r) = ((x.row(r).array() - mu) * inv).matrix();
      }
      out = (xhat.array().rowwise() * g.array().row(0)).rowwise() + b.array().row(0);
      saved.push_back(xhat);
      saved.push_back(inv_std);
      break;
    }
    case OpKind::kGelu: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      const Mat& x = inputs[0].value();
      out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
      break;
    }
    case OpKind::kEmbeddingLookup: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input (the table)"));
      const Mat& table = inputs[0].value();
      require(!attrs.ids.empty(), op_msg(kind, "needs at least one id"));
      out.resize(static_cast<long>(attrs.ids.size()), table.cols());
      for (std::size_t j = 0; j < attrs.ids.size(); ++j) {
        int id = attrs.ids[j];
        require(id >= 0 && id < table.rows(),
                op_msg(kind, "id " + std::to_string(id) + " out of range for table " +
                                 shape_str(table)));
        out.row(static_cast<long>(j)) = table.row(id);
      }
      break;
    }
    case OpKind::kConcatRows: {
      require(!inputs.empty(), op_msg(kind, "expects at least 1 input"));
      long cols = inputs[0].value().cols();
      long rows = 0;
      for (const Tensor& t : inputs) {
        require(t.value().cols() == cols,
                op_msg(kind, "column mismatch " + two_shapes(inputs[0].value(), t.value())));
        rows += t.value().rows();
      }
      require(rows >= 1, op_msg(kind, "result would be empty"));
      out.resize(rows, cols);
      long at = 0;
      for (const Tensor& t : inputs) {
        long r = t.value().rows();
        if (r > 0) out.middleRows(at, r) = t.value();
        at += r;
      }
      break;
    }
    case OpKind::kSliceRows: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      const Mat& a = inputs[0].value();
      require(attrs.begin >= 0 && attrs.begin <= attrs.end && attrs.end <= a.rows(),
              op_msg(kind, "range [" + std::to_string(attrs.begin) + ", " +
                               std::to_string(attrs.end) + ") invalid for " + shape_str(a)));
      out = a.middleRows(attrs.begin, attrs.end - attrs.begin);
      break;
    }
    case OpKind::kMean: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      const Mat& a = inputs[0].value();
      require(a.size() >= 1, op_msg(kind, "needs a non-empty input, got " + shape_str(a)));
      out.resize(1, 1);
      out(0, 0) = a.mean();
      break;
    }
    case OpKind::kCrossEntropyWithLogits: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input (the logits)"));
      const Mat& z = inputs[0].value();
      require(static_cast<long>(attrs.ids.size()) == z.rows(),
              op_msg(kind, "got " + std::to_string(attrs.ids.size()) + " targets for logits " +
                               shape_str(z)));
      Mat probs = softmax_rows(z);
      double total = 0.0;
      for (long r = 0; r < z.rows(); ++r) {
        int t = attrs.ids[static_cast<std::size_t>(r)];
        require(t >= 0 && t < z.cols(),
                op_msg(kind, "target " + std::to_string(t) + " out of range for logits " +
                                 shape_str(z)));
        double mx = z.row(r).maxCoeff();
        double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
        total += lse - z(r, t);
      }
      out.resize(1, 1);
      out(0, 0) = total / static_cast<double>(z.rows());
      saved.push_back(std::move(probs));
      break;
    }
    case OpKind::kSigmoid: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      out = inputs[0].value().unaryExpr(&stable_sigmoid);
      break;
    }
    case OpKind::kLog: {
      require(inputs.size() == 1, op_msg(kind, "expects 1 input"));
      out = inputs[0].value().unaryExpr([](double v) { return std::log(v); });
      break;
    }
  }

  require(out.allFinite(), op_msg(kind, "non-finite output"));

  bool req = false;
  for (const Tensor& t : inputs) req = req || t.requires_grad();
  Tensor result = Tensor::leaf(std::move(out), req);

  nodes_.push_back(Node{kind, std::move(inputs), result, std::move(attrs), std::move(saved)});
  return result;
}

void Tape::backward(const Tensor& loss) {
  require(loss.defined(), "backward: loss tensor is undefined");
  require(loss.is_scalar(),
          "backward: loss must be scalar, got " + shape_str(loss.value()));

  long start = -1;
  for (long i = static_cast<long>(nodes_.size()) - 1; i >= 0; --i) {
    if (nodes_[static_cast<std::size_t>(i)].output.same_impl(loss)) {
      start = i;
      break;
    }
  }
  require(start >= 0, "backward: loss tensor was not recorded on this tape");

  loss.grad_ref()(0, 0) += 1.0;

  for (long i = start; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.output.requires_grad()) continue;

    // Inputs that require grad always end up with storage, even when no
    // gradient reaches this node.
    for (Tensor& in : node.inputs)
      if (in.requires_grad()) in.grad_ref();

    if (!node.output.has_grad()) continue;
    const Mat& g = node.output.grad();

    switch (node.kind) {
      case OpKind::kMatmul: {
        Tensor& ta = node.inputs[0];
        Tensor& tb = node.inputs[1];
        const Mat& a = ta.value();
        const Mat& b = tb.value();
        bool fa = node.attrs.trans_a;
        bool fb = node.attrs.trans_b;
        if (ta.requires_grad()) {
          Mat d_op_a = fb ? Mat(g * b) : Mat(g * b.transpose());
          ta.grad_ref() += fa ? Mat(d_op_a.transpose()) : d_op_a;
        }
        if (tb.requires_grad()) {
          Mat d_op_b = node.attrs.trans_a ? Mat(a * g) : Mat(a.transpose() * g);
          tb.grad_ref() += fb ? Mat(d_op_b.transpose()) : d_op_b;
        }
        break;
      }
      case OpKind::kAdd: {
        Tensor& ta = node.inputs[0];
        Tensor& tb = node.inputs[1];
        if (ta.requires_grad()) ta.grad_ref() += g;
        if (tb.requires_grad()) {
          if (tb.value().rows() == g.rows()) {
            tb.grad_ref() += g;
          } else {
            tb.grad_ref() += g.colwise().sum();
          }
        }
        break;
      }
      case OpKind::kMultiply: {
        Tensor& ta = node.inputs[0];
        Tensor& tb = node.inputs[1];
        if (ta.requires_grad()) ta.grad_ref() += g.cwiseProduct(tb.value());
        if (tb.requires_grad()) tb.grad_ref() += g.cwiseProduct(ta.value());
        break;
      }
      case OpKind::kScalarScale: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) ta.grad_ref() += node.attrs.scale * g;
        break;
      }
      case OpKind::kRowSoftmax: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) {
          const Mat& y = node.output.value();
          Mat d(y.rows(), y.cols());
          for (long r = 0; r < y.rows(); ++r) {
            double dot = g.row(r).dot(y.row(r));
            d.row(r) = y.row(r).cwiseProduct(g.row(r) - Mat::Constant(1, y.cols(), dot));
          }
          ta.grad_ref() += d;
        }
        break;
      }
      case OpKind::kLayerNorm: {
        Tensor& tx = node.inputs[0];
        Tensor& tg = node.inputs[1];
        Tensor& tb = node.inputs[2];
        const Mat& xhat = node.saved[0];
        const Mat& inv_std = node.saved[1];
        if (tb.requires_grad()) tb.grad_ref() += g.colwise().sum();
        if (tg.requires_grad()) tg.grad_ref() += g.cwiseProduct(xhat).colwise().sum();
        if (tx.requires_grad()) {
          Mat dxhat = g.array().rowwise() * tg.value().array().row(0);
          Mat dx(g.rows(), g.cols());
          double n = static_cast<double>(g.cols());
          for (long r = 0; r < g.rows(); ++r) {
            double m1 = dxhat.row(r).sum() / n;
            double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / n;
            dx.row(r) = inv_std(r, 0) *
                        (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
          }
          tx.grad_ref() += dx;
        }
        break;
      }
      case OpKind::kGelu: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) {
          Mat d = ta.value().unaryExpr([](double v) {
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
          });
          ta.grad_ref() += g.cwiseProduct(d);
        }
        break;
      }
      case OpKind::kEmbeddingLookup: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) {
          Mat& d = ta.grad_ref();
          for (std::size_t j = 0; j < node.attrs.ids.size(); ++j)
            d.row(node.attrs.ids[j]) += g.row(static_cast<long>(j));
        }
        break;
      }
      case OpKind::kConcatRows: {
        long at = 0;
        for (Tensor& in : node.inputs) {
          long r = in.value().rows();
          if (in.requires_grad() && r > 0) in.grad_ref() += g.middleRows(at, r);
          at += r;
        }
        break;
      }
      case OpKind::kSliceRows: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad() && g.rows() > 0)
          ta.grad_ref().middleRows(node.attrs.begin, node.attrs.end - node.attrs.begin) += g;
        break;
      }
      case OpKind::kMean: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad())
          ta.grad_ref().array() += g(0, 0) / static_cast<double>(ta.value().size());
        break;
      }
      case OpKind::kCrossEntropyWithLogits: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) {
          Mat d = node.saved[0];
          for (long r = 0; r < d.rows(); ++r)
            d(r, node.attrs.ids[static_cast<std::size_t>(r)]) -= 1.0;
          ta.grad_ref() += (g(0, 0) / static_cast<double>(d.rows())) * d;
        }
        break;
      }
      case OpKind::kSigmoid: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) {
          const Mat& y = node.output.value();
          ta.grad_ref() +=
              g.cwiseProduct(y.cwiseProduct(Mat(Mat::Ones(y.rows(), y.cols()) - y)));
        }
        break;
      }
      case OpKind::kLog: {
        Tensor& ta = node.inputs[0];
        if (ta.requires_grad()) ta.grad_ref() += g.cwiseQuotient(ta.value());
        break;
      }
    }
  }
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  OpAttrs attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  return tape.record(OpKind::kMatmul, {a, b}, attrs);
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return tape.record(OpKind::kAdd, {a, b});
}

Tensor multiply(Tape& tape, const Tensor& a, const Tensor& b) {
  return tape.record(OpKind::kMultiply, {a, b});
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  OpAttrs attrs;
  attrs.scale = factor;
  return tape.record(OpKind::kScalarScale, {a}, attrs);
}

Tensor row_softmax(Tape& tape, const Tensor& a) {
  return tape.record(OpKind::kRowSoftmax, {a});
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  OpAttrs attrs;
  attrs.eps = eps;
  return tape.record(OpKind::kLayerNorm, {x, gain, bias}, attrs);
}

Tensor gelu(Tape& tape, const Tensor& a) { return tape.record(OpKind::kGelu, {a}); }

Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  OpAttrs attrs;
  attrs.ids = ids;
  return tape.record(OpKind::kEmbeddingLookup, {table}, attrs);
}

Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  return tape.record(OpKind::kConcatRows, parts);
}

Tensor slice_rows(Tape& tape, const Tensor& a, long begin, long end) {
  OpAttrs attrs;
  attrs.begin = begin;
  attrs.end = end;
  return tape.record(OpKind::kSliceRows, {a}, attrs);
}

Tensor mean(Tape& tape, const Tensor& a) { return tape.record(OpKind::kMean, {a}); }

Tensor cross_entropy_with_logits(Tape& tape, const Tensor& logits,
                                 const std::vector<int>& targets) {
  OpAttrs attrs;
  attrs.ids = targets;
  return tape.record(OpKind::kCrossEntropyWithLogits, {logits}, attrs);
}

Tensor sigmoid(Tape& tape, const Tensor& a) { return tape.record(OpKind::kSigmoid, {a}); }

Tensor log(Tape& tape, const Tensor& a) { return tape.record(OpKind::kLog, {a}); }

Tensor sum(Tape& tape, const Tensor& a) {
  return scale(tape, mean(tape, a), static_cast<double>(a.size()));
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Mat& point,
                  double epsilon) {
  Tensor x = Tensor::leaf(point, true);
  Tape tape;
  Tensor out = f(tape, x);
  if (!out.is_scalar())
    throw TensorError("grad_check: objective must be scalar, got " + shape_str(out.value()));
  tape.backward(out);
  Mat analytic = x.grad();

  auto eval = [&](const Mat& p) {
    Tape t;
    Tensor xx = Tensor::leaf(p, false);
    return f(t, xx).item();
  };

  double worst = 0.0;
  Mat p = point;
  for (long i = 0; i < point.rows(); ++i) {
    for (long j = 0; j < point.cols(); ++j) {
      double keep = p(i, j);
      p(i, j) = keep + epsilon;
      double fp = eval(p);
      p(i, j) = keep - epsilon;
      double fm = eval(p);
      p(i, j) = keep;
      double numeric = (fp - fm) / (2.0 * epsilon);
      double err = std::abs(analytic(i, j) - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace xrec
