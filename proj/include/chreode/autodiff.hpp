#pragma once

// Reverse-mode differentiation over a dynamically recorded graph of f64
// matrices. The backward pass emits recorded operations instead of raw
// numbers, so a gradient produced by `gradients` is itself a graph value and
// can be differentiated a second time (needed because the downhill drift is
// an input-gradient that appears inside the training loss).
//
// Shapes are strict 2-D: scalars are 1x1, vectors are n x 1. The only
// broadcasting rule is that a 1x1 operand of an elementwise binary op is
// applied against every entry of the other side; everything else must match
// exactly. General tensor broadcasting is out of scope.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace chreode::ad {

using Mat = Eigen::MatrixXd;

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,      // x * attr
  kAddConst,   // x + attr
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kTanh,
  kSoftplus,
  kSigmoid,
  kSin,
  kCos,
  kSum,              // n x m -> 1 x 1
  kRowSum,           // n x m -> n x 1
  kBroadcastCol,     // n x 1 -> n x attr_i
  kBroadcastScalar,  // 1 x 1 -> attr_i x attr_j
  kMaxConst,         // max(x, attr) elementwise
  kGtMaskConst,      // (x > attr) ? 1 : 0, treated as locally constant
  kRowMaxDetached,   // rowwise max, treated as locally constant
  kStopGrad,
  kReshape,    // attr_i x attr_j, row-major reinterpretation
  kVStack,     // concat inputs along rows
  kRowSlice,   // rows [attr_i, attr_i + attr_j)
  kTileCols,   // B x d -> B x (d*r): out(i, a*r+b) = x(i, a), attr_i = r
  kFoldBlock,  // B x (d*r) -> B x d: out(i, a) = sum_b x(i, a*r+b), attr_i = r
  kTileBlock,  // B x r -> B x (d*r): out(i, a*r+b) = x(i, b), attr_i = d
  kFoldSum,    // B x (d*r) -> B x r: out(i, b) = sum_a x(i, a*r+b), attr_i = d
  kCustomScalarVJP,  // scalar with a precomputed d(out)/d(input) payload
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kScale: return "scale";
    case Op::kAddConst: return "add_const";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kSum: return "sum";
    case Op::kRowSum: return "row_sum";
    case Op::kBroadcastCol: return "broadcast_col";
    case Op::kBroadcastScalar: return "broadcast_scalar";
    case Op::kMaxConst: return "max_const";
    case Op::kGtMaskConst: return "gt_mask_const";
    case Op::kRowMaxDetached: return "row_max_detached";
    case Op::kStopGrad: return "stop_gradient";
    case Op::kReshape: return "reshape";
    case Op::kVStack: return "vstack";
    case Op::kRowSlice: return "row_slice";
    case Op::kTileCols: return "tile_cols";
    case Op::kFoldBlock: return "fold_block";
    case Op::kTileBlock: return "tile_block";
    case Op::kFoldSum: return "fold_sum";
    case Op::kCustomScalarVJP: return "custom_scalar_vjp";
  }
  return "?";
}

class EngineError : public std::runtime_error {
 public:
  explicit EngineError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Node : std::enable_shared_from_this<Node> {
  Mat value;
  Op op = Op::kLeaf;
  std::vector<std::shared_ptr<Node>> inputs;
  double attr = 0.0;
  Eigen::Index attr_i = 0;
  Eigen::Index attr_j = 0;
  bool requires_grad = false;
  std::string label;
  // payload for kCustomScalarVJP: d(value)/d(inputs[0]), entrywise
  std::shared_ptr<Mat> custom_vjp;
};

using NodePtr = std::shared_ptr<Node>;

struct Var {
  NodePtr n;
  Var() = default;
  explicit Var(NodePtr p) : n(std::move(p)) {}
  const Mat& value() const { return n->value; }
  Eigen::Index rows() const { return n->value.rows(); }
  Eigen::Index cols() const { return n->value.cols(); }
  double scalar() const {
    if (n->value.size() != 1) throw EngineError("scalar() on non-scalar node");
    return n->value(0, 0);
  }
  bool defined() const { return static_cast<bool>(n); }
};

inline Var constant(Mat v, std::string label = "") {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op = Op::kLeaf;
  n->requires_grad = false;
  n->label = std::move(label);
  return Var(n);
}

inline Var constant(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

inline Var param(Mat v, std::string label = "") {
  Var x = constant(std::move(v), std::move(label));
  x.n->requires_grad = true;
  return x;
}

namespace detail {

inline Var make(Op op, Mat value, std::vector<NodePtr> inputs, double attr = 0.0,
                Eigen::Index attr_i = 0, Eigen::Index attr_j = 0) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->inputs = std::move(inputs);
  n->attr = attr;
  n->attr_i = attr_i;
  n->attr_j = attr_j;
  if (op != Op::kStopGrad && op != Op::kGtMaskConst && op != Op::kRowMaxDetached) {
    for (const auto& in : n->inputs)
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
  }
  return Var(n);
}

inline void check_same_shape(const Var& a, const Var& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw EngineError(std::string(who) + ": shape mismatch (" +
                      std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}

inline bool is_scalar(const Var& a) { return a.rows() == 1 && a.cols() == 1; }

// elementwise binary with 1x1 broadcast on either side
template <typename F>
Mat ew_binary(const Var& a, const Var& b, const char* who, F&& f) {
  if (is_scalar(a) && !is_scalar(b)) {
    const double s = a.value()(0, 0);
    return b.value().unaryExpr([&](double y) { return f(s, y); });
  }
  if (!is_scalar(a) && is_scalar(b)) {
    const double s = b.value()(0, 0);
    return a.value().unaryExpr([&](double x) { return f(x, s); });
  }
  check_same_shape(a, b, who);
  Mat out(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      out(i, j) = f(a.value()(i, j), b.value()(i, j));
  return out;
}

inline double softplus_stable(double x) {
  // max(x,0) + log1p(exp(-|x|)): finite value and finite second derivative
  // for |x| up to the full double range
  return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double sigmoid_stable(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::make(Op::kAdd, detail::ew_binary(a, b, "add", [](double x, double y) { return x + y; }),
                      {a.n, b.n});
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::make(Op::kSub, detail::ew_binary(a, b, "sub", [](double x, double y) { return x - y; }),
                      {a.n, b.n});
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::make(Op::kMul, detail::ew_binary(a, b, "mul", [](double x, double y) { return x * y; }),
                      {a.n, b.n});
}
inline Var operator/(const Var& a, const Var& b) {
  return detail::make(Op::kDiv, detail::ew_binary(a, b, "div", [](double x, double y) { return x / y; }),
                      {a.n, b.n});
}
inline Var operator-(const Var& a) { return detail::make(Op::kNeg, -a.value(), {a.n}); }

inline Var scale(const Var& a, double c) { return detail::make(Op::kScale, (a.value().array() * c).matrix(), {a.n}, c); }
inline Var add_const(const Var& a, double c) {
  return detail::make(Op::kAddConst, (a.value().array() + c).matrix(), {a.n}, c);
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw EngineError("matmul: inner dimensions disagree (" + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.rows()) + ")");
  return detail::make(Op::kMatMul, a.value() * b.value(), {a.n, b.n});
}

inline Var transpose(const Var& a) { return detail::make(Op::kTranspose, a.value().transpose(), {a.n}); }

inline Var exp(const Var& a) { return detail::make(Op::kExp, a.value().array().exp().matrix(), {a.n}); }
inline Var log(const Var& a) { return detail::make(Op::kLog, a.value().array().log().matrix(), {a.n}); }
inline Var tanh(const Var& a) { return detail::make(Op::kTanh, a.value().array().tanh().matrix(), {a.n}); }
inline Var softplus(const Var& a) {
  return detail::make(Op::kSoftplus, a.value().unaryExpr([](double x) { return detail::softplus_stable(x); }),
                      {a.n});
}
inline Var sigmoid(const Var& a) {
  return detail::make(Op::kSigmoid, a.value().unaryExpr([](double x) { return detail::sigmoid_stable(x); }),
                      {a.n});
}
inline Var sin(const Var& a) { return detail::make(Op::kSin, a.value().array().sin().matrix(), {a.n}); }
inline Var cos(const Var& a) { return detail::make(Op::kCos, a.value().array().cos().matrix(), {a.n}); }

inline Var sum(const Var& a) {
  Mat m(1, 1);
  m(0, 0) = a.value().sum();
  return detail::make(Op::kSum, std::move(m), {a.n});
}
inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var row_sum(const Var& a) { return detail::make(Op::kRowSum, a.value().rowwise().sum(), {a.n}); }

inline Var broadcast_col(const Var& a, Eigen::Index m) {
  if (a.cols() != 1) throw EngineError("broadcast_col expects an n x 1 operand");
  return detail::make(Op::kBroadcastCol, a.value().replicate(1, m), {a.n}, 0.0, m);
}

inline Var broadcast_scalar(const Var& a, Eigen::Index r, Eigen::Index c) {
  if (a.value().size() != 1) throw EngineError("broadcast_scalar expects a 1 x 1 operand");
  return detail::make(Op::kBroadcastScalar, Mat::Constant(r, c, a.value()(0, 0)), {a.n}, 0.0, r, c);
}

inline Var max_const(const Var& a, double c) {
  return detail::make(Op::kMaxConst, a.value().unaryExpr([c](double x) { return std::fmax(x, c); }), {a.n},
                      c);
}

inline Var gt_mask_const(const Var& a, double c) {
  return detail::make(Op::kGtMaskConst, a.value().unaryExpr([c](double x) { return x > c ? 1.0 : 0.0; }),
                      {a.n}, c);
}

inline Var row_max_detached(const Var& a) {
  return detail::make(Op::kRowMaxDetached, a.value().rowwise().maxCoeff(), {a.n});
}

inline Var stop_gradient(const Var& a) { return detail::make(Op::kStopGrad, a.value(), {a.n}); }

inline Var reshape(const Var& a, Eigen::Index r, Eigen::Index c) {
  if (a.rows() * a.cols() != r * c) throw EngineError("reshape: element count changed");
  // row-major reinterpretation of the logical entries
  Mat out(r, c);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out(k / c, k % c) = a.value()(i, j);
      ++k;
    }
  return detail::make(Op::kReshape, std::move(out), {a.n}, 0.0, a.rows(), a.cols());
}

inline Var vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw EngineError("vstack of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw EngineError("vstack: column counts disagree");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<NodePtr> ins;
  ins.reserve(parts.size());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    ins.push_back(p.n);
  }
  return detail::make(Op::kVStack, std::move(out), std::move(ins));
}

inline Var row_slice(const Var& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw EngineError("row_slice out of range");
  return detail::make(Op::kRowSlice, a.value().middleRows(start, n), {a.n}, 0.0, start, n);
}

inline Var tile_cols(const Var& a, Eigen::Index r) {
  const Eigen::Index B = a.rows(), d = a.cols();
  Mat out(B, d * r);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index k = 0; k < r; ++k) out.col(c * r + k) = a.value().col(c);
  return detail::make(Op::kTileCols, std::move(out), {a.n}, 0.0, r);
}

inline Var fold_block(const Var& a, Eigen::Index r) {
  const Eigen::Index B = a.rows(), dr = a.cols();
  if (dr % r != 0) throw EngineError("fold_block: column count not divisible by block size");
  const Eigen::Index d = dr / r;
  Mat out = Mat::Zero(B, d);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index k = 0; k < r; ++k) out.col(c) += a.value().col(c * r + k);
  return detail::make(Op::kFoldBlock, std::move(out), {a.n}, 0.0, r);
}

inline Var tile_block(const Var& a, Eigen::Index d) {
  const Eigen::Index B = a.rows(), r = a.cols();
  Mat out(B, d * r);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index k = 0; k < r; ++k) out.col(c * r + k) = a.value().col(k);
  return detail::make(Op::kTileBlock, std::move(out), {a.n}, 0.0, d);
}

inline Var fold_sum(const Var& a, Eigen::Index d) {
  const Eigen::Index B = a.rows(), dr = a.cols();
  if (dr % d != 0) throw EngineError("fold_sum: column count not divisible by group count");
  const Eigen::Index r = dr / d;
  Mat out = Mat::Zero(B, r);
  for (Eigen::Index c = 0; c < d; ++c)
    for (Eigen::Index k = 0; k < r; ++k) out.col(k) += a.value().col(c * r + k);
  return detail::make(Op::kFoldSum, std::move(out), {a.n}, 0.0, d);
}

// Scalar output whose gradient with respect to `input` was computed outside
// the graph (entrywise d(out)/d(input)). The payload is treated as locally
// constant: exact for first-order differentiation through this node.
inline Var custom_scalar_vjp(const Var& input, double value, Mat vjp, std::string label) {
  if (vjp.rows() != input.rows() || vjp.cols() != input.cols())
    throw EngineError("custom_scalar_vjp: payload shape mismatch");
  Mat m(1, 1);
  m(0, 0) = value;
  Var out = detail::make(Op::kCustomScalarVJP, std::move(m), {input.n});
  out.n->custom_vjp = std::make_shared<Mat>(std::move(vjp));
  out.n->label = std::move(label);
  return out;
}

// convenience
inline Var dot(const Var& a, const Var& b) { return sum(a * b); }
inline Var sqnorm(const Var& a) { return sum(a * a); }
inline Var square(const Var& a) { return a * a; }
// add a row vector (stored as w x 1) to every row of an n x w matrix
inline Var bias_rows(const Var& m, const Var& v) {
  return m + transpose(broadcast_col(v, m.rows()));
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

// Reverse-mode gradients of a scalar `loss` with respect to `wrt`. The
// returned values are graph nodes built from recorded operations, so they can
// be fed back into further graph construction and differentiated again.
// Leaves outside the graph of `loss` get explicit zero gradients.
inline std::vector<Var> gradients(const Var& loss, const std::vector<Var>& wrt,
                                  bool check_finite = true) {
  if (loss.value().size() != 1) throw EngineError("gradients: loss must be scalar");

  // deterministic topological order by iterative post-order walk
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  {
    std::vector<std::pair<Node*, size_t>> stack;
    if (loss.n->requires_grad) stack.emplace_back(loss.n.get(), 0);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx == 0 && seen.count(node)) {
        stack.pop_back();
        continue;
      }
      if (idx < node->inputs.size()) {
        Node* child = node->inputs[idx].get();
        ++idx;
        const bool child_reachable =
            child->requires_grad && node->op != Op::kStopGrad &&
            node->op != Op::kGtMaskConst && node->op != Op::kRowMaxDetached;
        if (child_reachable && !seen.count(child)) stack.emplace_back(child, 0);
      } else {
        seen.insert(node);
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Var> adjoint;
  adjoint[loss.n.get()] = constant(Mat::Ones(1, 1));

  auto accumulate = [&adjoint](const NodePtr& target, const Var& contrib) {
    if (!target->requires_grad) return;
    auto it = adjoint.find(target.get());
    if (it == adjoint.end())
      adjoint.emplace(target.get(), contrib);
    else
      it->second = it->second + contrib;
  };

  // reduce an adjoint to the shape of a (possibly 1x1-broadcast) operand
  auto fit = [](const Var& g, const Node& like) -> Var {
    if (g.rows() == like.value.rows() && g.cols() == like.value.cols()) return g;
    if (like.value.size() == 1) return sum(g);
    throw EngineError("internal: adjoint shape mismatch");
  };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = adjoint.find(node);
    if (found == adjoint.end()) continue;  // no path from the loss
    Var g = found->second;
    if (check_finite && !all_finite(g.value()))
      throw EngineError(std::string("non-finite adjoint at node '") + op_name(node->op) +
                        (node->label.empty() ? "'" : "' (" + node->label + ")"));

    const auto& in = node->inputs;
    auto var_of = [](const NodePtr& p) { return Var(p); };

    switch (node->op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        accumulate(in[0], fit(g, *in[0]));
        accumulate(in[1], fit(g, *in[1]));
        break;
      case Op::kSub:
        accumulate(in[0], fit(g, *in[0]));
        accumulate(in[1], fit(-g, *in[1]));
        break;
      case Op::kMul:
        accumulate(in[0], fit(g * var_of(in[1]), *in[0]));
        accumulate(in[1], fit(g * var_of(in[0]), *in[1]));
        break;
      case Op::kDiv: {
        Var a = var_of(in[0]), b = var_of(in[1]);
        accumulate(in[0], fit(g / b, *in[0]));
        accumulate(in[1], fit(-(g * a / (b * b)), *in[1]));
        break;
      }
      case Op::kNeg:
        accumulate(in[0], -g);
        break;
      case Op::kScale:
        accumulate(in[0], scale(g, node->attr));
        break;
      case Op::kAddConst:
        accumulate(in[0], g);
        break;
      case Op::kMatMul:
        accumulate(in[0], matmul(g, transpose(var_of(in[1]))));
        accumulate(in[1], matmul(transpose(var_of(in[0])), g));
        break;
      case Op::kTranspose:
        accumulate(in[0], transpose(g));
        break;
      case Op::kExp: {
        Var y(node->shared_from_this());
        accumulate(in[0], g * y);
        break;
      }
      case Op::kLog:
        accumulate(in[0], g / var_of(in[0]));
        break;
      case Op::kTanh: {
        Var y(node->shared_from_this());
        accumulate(in[0], g * add_const(-(y * y), 1.0));
        break;
      }
      case Op::kSoftplus:
        accumulate(in[0], g * sigmoid(var_of(in[0])));
        break;
      case Op::kSigmoid: {
        Var y(node->shared_from_this());
        accumulate(in[0], g * (y * add_const(-y, 1.0)));
        break;
      }
      case Op::kSin:
        accumulate(in[0], g * cos(var_of(in[0])));
        break;
      case Op::kCos:
        accumulate(in[0], -(g * sin(var_of(in[0]))));
        break;
      case Op::kSum:
        accumulate(in[0], broadcast_scalar(g, in[0]->value.rows(), in[0]->value.cols()));
        break;
      case Op::kRowSum:
        accumulate(in[0], broadcast_col(g, in[0]->value.cols()));
        break;
      case Op::kBroadcastCol:
        accumulate(in[0], row_sum(g));
        break;
      case Op::kBroadcastScalar:
        accumulate(in[0], sum(g));
        break;
      case Op::kMaxConst:
        accumulate(in[0], g * gt_mask_const(var_of(in[0]), node->attr));
        break;
      case Op::kGtMaskConst:
      case Op::kRowMaxDetached:
      case Op::kStopGrad:
        break;
      case Op::kReshape:
        accumulate(in[0], reshape(g, node->attr_i, node->attr_j));
        break;
      case Op::kVStack: {
        Eigen::Index at = 0;
        for (const auto& part : in) {
          accumulate(part, row_slice(g, at, part->value.rows()));
          at += part->value.rows();
        }
        break;
      }
      case Op::kRowSlice: {
        const Eigen::Index total = in[0]->value.rows();
        const Eigen::Index start = node->attr_i, len = node->attr_j;
        std::vector<Var> parts;
        if (start > 0) parts.push_back(constant(Mat::Zero(start, g.cols())));
        parts.push_back(g);
        if (start + len < total) parts.push_back(constant(Mat::Zero(total - start - len, g.cols())));
        accumulate(in[0], parts.size() == 1 ? g : vstack(parts));
        break;
      }
      case Op::kTileCols:
        accumulate(in[0], fold_block(g, node->attr_i));
        break;
      case Op::kFoldBlock:
        accumulate(in[0], tile_cols(g, node->attr_i));
        break;
      case Op::kTileBlock:
        accumulate(in[0], fold_sum(g, node->attr_i));
        break;
      case Op::kFoldSum:
        accumulate(in[0], tile_block(g, node->attr_i));
        break;
      case Op::kCustomScalarVJP:
        accumulate(in[0], g * constant(*node->custom_vjp, node->label + ".vjp"));
        break;
      default:
        throw EngineError(std::string("unsupported operation in backward: ") + op_name(node->op));
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it2 = adjoint.find(w.n.get());
    if (it2 == adjoint.end())
      out.push_back(constant(Mat::Zero(w.rows(), w.cols())));
    else
      out.push_back(it2->second);
  }
  return out;
}

inline Var grad(const Var& loss, const Var& wrt, bool check_finite = true) {
  return gradients(loss, {wrt}, check_finite)[0];
}

}  // namespace chreode::ad
