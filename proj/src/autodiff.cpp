#include "podom/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace podom::ad {

// ---- Tensor -----------------------------------------------------------------

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  require(data_.size() == shape_product(shape_), "tensor value count does not match shape " +
                                                      shape_string(shape_));
}

Tensor Tensor::from_matrix(const RowMat& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  t.mat() = m;
  return t;
}

int Tensor::rows() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return 1;
  return static_cast<int>(data_.size() / static_cast<std::size_t>(shape_.back() == 0 ? 1 : shape_.back()));
}

int Tensor::cols() const {
  if (shape_.empty()) return 1;
  return shape_.back();
}

double Tensor::item() const {
  require(data_.size() == 1, "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  require(shape_product(shape) == data_.size(),
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---- ParameterStore ----------------------------------------------------------

Parameter& ParameterStore::add(const std::string& name, Tensor init, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor(init.shape(), 0.0);
  p->value = std::move(init);
  p->trainable = trainable;
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

std::vector<Parameter*> ParameterStore::trainable() {
  std::vector<Parameter*> out;
  for (auto& p : params_) {
    if (p->trainable) out.push_back(p.get());
  }
  return out;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p->trainable) n += p->value.size();
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& p : params_) out.add(p->name, p->value, p->trainable);
  return out;
}

void ParameterStore::assign_values(const ParameterStore& other) {
  if (other.size() != size()) throw ConfigError("parameter store size mismatch");
  for (auto& p : params_) {
    const Parameter& o = other.get(p->name);
    if (!o.value.same_shape(p->value)) throw ConfigError("shape mismatch for parameter " + p->name);
    p->value = o.value;
  }
}

// ---- Graph ---------------------------------------------------------------------

const Tensor& Var::value() const { return graph->value(id); }
const Tensor& Var::grad() const { return graph->grad(id); }

Var Graph::constant(Tensor t) {
  Node& n = nodes_.emplace_back();
  n.owned = std::move(t);
  n.value = &n.owned;
  n.op = "constant";
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::input(Tensor t) {
  Var v = constant(std::move(t));
  nodes_.back().requires_grad = true;
  nodes_.back().op = "input";
  return v;
}

Var Graph::param(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.value = &p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  n.op = "param";
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(int id) const { return *nodes_.at(static_cast<std::size_t>(id)).value; }

const Tensor& Graph::grad(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.param != nullptr) return n.param->grad;
  return n.grad;
}

Tensor& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.param != nullptr) {
    if (!n.param->grad.same_shape(n.param->value)) n.param->grad = Tensor(n.param->value.shape(), 0.0);
    return n.param->grad;
  }
  if (n.grad.empty() && !n.value->empty()) n.grad = Tensor(n.value->shape(), 0.0);
  return n.grad;
}

Var Graph::record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op) {
  bool needs = false;
  for (int i : inputs) needs = needs || nodes_[static_cast<std::size_t>(i)].requires_grad;
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  n.value = &n.owned;
  n.requires_grad = needs;
  n.inputs = std::move(inputs);
  if (needs) n.backward = std::move(backward);
  n.op = op;
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Graph::backward(Var out) {
  require(out.graph == this, "backward: variable belongs to another graph");
  require(value(out.id).size() == 1, "backward: output must be a single value");
  if (!requires_grad(out.id)) return;
  grad_buffer(out.id)[0] += 1.0;
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.empty()) continue;  // nothing flowed into this node
    n.backward(*this, id);
  }
}

// ---- ops -------------------------------------------------------------------------

namespace {

Graph& graph_of(std::initializer_list<Var> vs) {
  Graph* g = nullptr;
  for (const Var& v : vs) {
    require(v.valid(), "op on an invalid variable");
    if (g == nullptr) g = v.graph;
    require(v.graph == g, "op mixes variables from different graphs");
  }
  return *g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                               shape_string(b.shape()));
}

/// Accumulates grad * elementwise-derivative into input `in`.
template <typename F>
Var unary(Var x, const char* op, F&& fwd, Graph::BackwardFn bwd) {
  Graph& g = graph_of({x});
  Tensor out(x.value().shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return g.record(std::move(out), {x.id}, std::move(bwd), op);
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.cols() == bv.rows(), "matmul: inner dimensions differ " + shape_string(av.shape()) + " * " +
                                      shape_string(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  out.mat().noalias() = av.mat() * bv.mat();
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, int self) {
    const auto& go = gr.grad(self).mat();
    if (gr.requires_grad(ia)) gr.grad_buffer(ia).mat().noalias() += go * gr.value(ib).mat().transpose();
    if (gr.requires_grad(ib)) gr.grad_buffer(ib).mat().noalias() += gr.value(ia).mat().transpose() * go;
  }, "matmul");
}

Var add_bias(Var x, Var b) {
  Graph& g = graph_of({x, b});
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  require(bv.size() == static_cast<std::size_t>(xv.cols()), "add_bias: bias length does not match columns");
  Tensor out = xv;
  const Eigen::Map<const Eigen::RowVectorXd> brow(bv.data(), xv.cols());
  out.mat().rowwise() += brow;
  const int ix = x.id, ib = b.id;
  return g.record(std::move(out), {ix, ib}, [ix, ib](Graph& gr, int self) {
    const auto& go = gr.grad(self).mat();
    if (gr.requires_grad(ix)) gr.grad_buffer(ix).mat() += go;
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad_buffer(ib);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), go.cols()) += go.colwise().sum();
    }
  }, "add_bias");
}

Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

Var add(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.mat() += b.value().mat();
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, int self) {
    const auto& go = gr.grad(self).mat();
    if (gr.requires_grad(ia)) gr.grad_buffer(ia).mat() += go;
    if (gr.requires_grad(ib)) gr.grad_buffer(ib).mat() += go;
  }, "add");
}

Var sub(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.mat() -= b.value().mat();
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, int self) {
    const auto& go = gr.grad(self).mat();
    if (gr.requires_grad(ia)) gr.grad_buffer(ia).mat() += go;
    if (gr.requires_grad(ib)) gr.grad_buffer(ib).mat() -= go;
  }, "sub");
}

Var mul(Var a, Var b) {
  Graph& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  out.mat().array() *= b.value().mat().array();
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, int self) {
    const auto& go = gr.grad(self).mat();
    if (gr.requires_grad(ia)) gr.grad_buffer(ia).mat().array() += go.array() * gr.value(ib).mat().array();
    if (gr.requires_grad(ib)) gr.grad_buffer(ib).mat().array() += go.array() * gr.value(ia).mat().array();
  }, "mul");
}

Var scale(Var a, double s) {
  Graph& g = graph_of({a});
  Tensor out = a.value();
  out.mat() *= s;
  const int ia = a.id;
  return g.record(std::move(out), {ia}, [ia, s](Graph& gr, int self) {
    gr.grad_buffer(ia).mat() += s * gr.grad(self).mat();
  }, "scale");
}

Var add_scalar(Var a, double s) {
  Graph& g = graph_of({a});
  Tensor out = a.value();
  out.mat().array() += s;
  const int ia = a.id;
  return g.record(std::move(out), {ia}, [ia](Graph& gr, int self) {
    gr.grad_buffer(ia).mat() += gr.grad(self).mat();
  }, "add_scalar");
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var x) {
  const int ix = x.id;
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [ix](Graph& gr, int self) {
    const Tensor& xv = gr.value(ix);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gi[i] += go[i];
    }
  });
}

Var softsign(Var x) {
  const int ix = x.id;
  return unary(x, "softsign", [](double v) { return v / (1.0 + std::abs(v)); }, [ix](Graph& gr, int self) {
    const Tensor& xv = gr.value(ix);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = 1.0 + std::abs(xv[i]);
      gi[i] += go[i] / (d * d);
    }
  });
}

Var sigmoid(Var x) {
  Graph& g = graph_of({x});
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.value()[i]));
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix](Graph& gr, int self) {
    const Tensor& y = gr.value(self);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < y.size(); ++i) gi[i] += go[i] * y[i] * (1.0 - y[i]);
  }, "sigmoid");
}

Var tanh(Var x) {
  Graph& g = graph_of({x});
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix](Graph& gr, int self) {
    const Tensor& y = gr.value(self);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < y.size(); ++i) gi[i] += go[i] * (1.0 - y[i] * y[i]);
  }, "tanh");
}

Var exp(Var x) {
  Graph& g = graph_of({x});
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix](Graph& gr, int self) {
    const Tensor& y = gr.value(self);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < y.size(); ++i) gi[i] += go[i] * y[i];
  }, "exp");
}

Var abs(Var x) {
  const int ix = x.id;
  return unary(x, "abs", [](double v) { return std::abs(v); }, [ix](Graph& gr, int self) {
    const Tensor& xv = gr.value(ix);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gi[i] += go[i];
      else if (xv[i] < 0.0) gi[i] -= go[i];
    }
  });
}

Var sum(Var x) {
  Graph& g = graph_of({x});
  const double s = x.value().mat().sum();
  const int ix = x.id;
  return g.record(Tensor::scalar(s), {ix}, [ix](Graph& gr, int self) {
    gr.grad_buffer(ix).mat().array() += gr.grad(self)[0];
  }, "sum");
}

Var mean(Var x) {
  require(x.value().size() > 0, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var row_norm(Var x) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  Tensor out({xv.rows(), 1});
  for (int r = 0; r < xv.rows(); ++r) out[static_cast<std::size_t>(r)] = xv.mat().row(r).norm();
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix](Graph& gr, int self) {
    const Tensor& xv2 = gr.value(ix);
    const Tensor& y = gr.value(self);
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (int r = 0; r < xv2.rows(); ++r) {
      const double n = y[static_cast<std::size_t>(r)];
      if (n <= 0.0) continue;
      gi.mat().row(r) += (go[static_cast<std::size_t>(r)] / n) * xv2.mat().row(r);
    }
  }, "row_norm");
}

Var row_cosine(Var a, Var b, double eps) {
  Graph& g = graph_of({a, b});
  require_same_shape(a.value(), b.value(), "row_cosine");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const int n = av.rows();
  Tensor out({n, 1});
  // saved per row: |a|, |b|, denominator
  auto saved = std::make_shared<std::vector<double>>(static_cast<std::size_t>(3 * n));
  for (int r = 0; r < n; ++r) {
    const double na = av.mat().row(r).norm();
    const double nb = bv.mat().row(r).norm();
    const double den = std::max(na * nb, eps);
    (*saved)[static_cast<std::size_t>(3 * r)] = na;
    (*saved)[static_cast<std::size_t>(3 * r + 1)] = nb;
    (*saved)[static_cast<std::size_t>(3 * r + 2)] = den;
    out[static_cast<std::size_t>(r)] = av.mat().row(r).dot(bv.mat().row(r)) / den;
  }
  const int ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib, saved, eps](Graph& gr, int self) {
    const auto am = gr.value(ia).mat();
    const auto bm = gr.value(ib).mat();
    const Tensor& y = gr.value(self);
    const Tensor& go = gr.grad(self);
    const bool ga = gr.requires_grad(ia), gb = gr.requires_grad(ib);
    for (int r = 0; r < am.rows(); ++r) {
      const double na = (*saved)[static_cast<std::size_t>(3 * r)];
      const double nb = (*saved)[static_cast<std::size_t>(3 * r + 1)];
      const double den = (*saved)[static_cast<std::size_t>(3 * r + 2)];
      const double gy = go[static_cast<std::size_t>(r)];
      const double c = y[static_cast<std::size_t>(r)];
      const bool clamped = na * nb < eps;
      if (ga) {
        auto row = gr.grad_buffer(ia).mat().row(r);
        row += (gy / den) * bm.row(r);
        if (!clamped && na > 0) row -= (gy * c / (na * na)) * am.row(r);
      }
      if (gb) {
        auto row = gr.grad_buffer(ib).mat().row(r);
        row += (gy / den) * am.row(r);
        if (!clamped && nb > 0) row -= (gy * c / (nb * nb)) * bm.row(r);
      }
    }
  }, "row_cosine");
}

Var gather_rows(Var x, std::vector<int> index) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  const int c = xv.cols();
  Tensor out({static_cast<int>(index.size()), c});
  for (std::size_t r = 0; r < index.size(); ++r) {
    const int src = index[r];
    require(src >= 0 && src < xv.rows(), "gather_rows: index out of range");
    std::copy_n(xv.data() + static_cast<std::size_t>(src) * c, c, out.data() + r * c);
  }
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix, idx = std::move(index), c](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double* dst = gi.data() + static_cast<std::size_t>(idx[r]) * c;
      const double* src = go.data() + r * c;
      for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
  }, "gather_rows");
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Graph& g = *parts.front().graph;
  const int c = parts.front().cols();
  int rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    require(p.graph == &g, "concat_rows: mixed graphs");
    require(p.cols() == c, "concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor out({rows, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().size();
  }
  return g.record(std::move(out), ids, [ids](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    std::size_t o = 0;
    for (int id : ids) {
      const std::size_t n = gr.value(id).size();
      if (gr.requires_grad(id)) {
        Tensor& gi = gr.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += go[o + i];
      }
      o += n;
    }
  }, "concat_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Graph& g = *parts.front().graph;
  const int r = parts.front().rows();
  int cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    require(p.graph == &g, "concat_cols: mixed graphs");
    require(p.rows() == r, "concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor out({r, cols});
  int c0 = 0;
  for (const Var& p : parts) {
    out.mat().middleCols(c0, p.cols()) = p.value().mat();
    c0 += p.cols();
  }
  return g.record(std::move(out), ids, [ids](Graph& gr, int self) {
    const auto go = gr.grad(self).mat();
    int c = 0;
    for (int id : ids) {
      const int w = gr.value(id).cols();
      if (gr.requires_grad(id)) gr.grad_buffer(id).mat() += go.middleCols(c, w);
      c += w;
    }
  }, "concat_cols");
}

Var slice_rows(Var x, int begin, int end) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  require(0 <= begin && begin <= end && end <= xv.rows(), "slice_rows: bad range");
  Tensor out({end - begin, xv.cols()});
  out.mat() = xv.mat().middleRows(begin, end - begin);
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix, begin, end](Graph& gr, int self) {
    gr.grad_buffer(ix).mat().middleRows(begin, end - begin) += gr.grad(self).mat();
  }, "slice_rows");
}

Var slice_cols(Var x, int begin, int end) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  require(0 <= begin && begin <= end && end <= xv.cols(), "slice_cols: bad range");
  Tensor out({xv.rows(), end - begin});
  out.mat() = xv.mat().middleCols(begin, end - begin);
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix, begin, end](Graph& gr, int self) {
    gr.grad_buffer(ix).mat().middleCols(begin, end - begin) += gr.grad(self).mat();
  }, "slice_cols");
}

Var reshape(Var x, std::vector<int> shape) {
  Graph& g = graph_of({x});
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
  }, "reshape");
}

Var max_pool_groups(Var x, std::vector<int> offsets) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == xv.rows(),
          "max_pool_groups: offsets must start at 0 and end at the row count");
  const int groups = static_cast<int>(offsets.size()) - 1;
  const int c = xv.cols();
  Tensor out({groups, c});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(groups) * c);
  for (int gi = 0; gi < groups; ++gi) {
    const int b = offsets[static_cast<std::size_t>(gi)], e = offsets[static_cast<std::size_t>(gi) + 1];
    if (e <= b) throw ShapeError("max_pool_groups: empty group " + std::to_string(gi));
    double* o = out.data() + static_cast<std::size_t>(gi) * c;
    int* am = argmax->data() + static_cast<std::size_t>(gi) * c;
    const double* first = xv.data() + static_cast<std::size_t>(b) * c;
    std::copy_n(first, c, o);
    std::fill_n(am, c, b);
    for (int r = b + 1; r < e; ++r) {
      const double* row = xv.data() + static_cast<std::size_t>(r) * c;
      for (int j = 0; j < c; ++j) {
        if (row[j] > o[j]) {
          o[j] = row[j];
          am[j] = r;
        }
      }
    }
  }
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix, argmax, c](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& gin = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < argmax->size(); ++i) {
      const std::size_t j = i % static_cast<std::size_t>(c);
      gin[static_cast<std::size_t>((*argmax)[i]) * c + j] += go[i];
    }
  }, "max_pool_groups");
}

Var topk_mean(Var x, int k) {
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  const int n = static_cast<int>(xv.size());
  if (n == 0) throw ShapeError("topk_mean: empty batch");
  require(k >= 1 && k <= n, "topk_mean: k must lie in [1, batch size]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return xv[static_cast<std::size_t>(a)] > xv[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(k));
  double s = 0.0;
  for (int i : order) s += xv[static_cast<std::size_t>(i)];
  const int ix = x.id;
  return g.record(Tensor::scalar(s / k), {ix}, [ix, order, k](Graph& gr, int self) {
    const double go = gr.grad(self)[0] / k;
    Tensor& gi = gr.grad_buffer(ix);
    for (int i : order) gi[static_cast<std::size_t>(i)] += go;
  }, "topk_mean");
}

Var batch_norm(Var x, const BatchNormParams& bn, Mode mode) {
  require(bn.gamma && bn.beta && bn.running_mean && bn.running_var, "batch_norm: missing parameters");
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  const int n = xv.rows(), c = xv.cols();
  require(bn.gamma->value.size() == static_cast<std::size_t>(c), "batch_norm: channel count mismatch");
  Var gamma = g.param(*bn.gamma);
  Var beta = g.param(*bn.beta);
  const Eigen::Map<const Eigen::RowVectorXd> gm(bn.gamma->value.data(), c);
  const Eigen::Map<const Eigen::RowVectorXd> bt(bn.beta->value.data(), c);

  if (mode == Mode::kInfer) {
    const Eigen::Map<const Eigen::RowVectorXd> rm(bn.running_mean->value.data(), c);
    const Eigen::Map<const Eigen::RowVectorXd> rv(bn.running_var->value.data(), c);
    const Eigen::RowVectorXd inv = (rv.array() + bn.eps).rsqrt().matrix();
    auto xhat = std::make_shared<RowMat>((xv.mat().rowwise() - rm).array().rowwise() * inv.array());
    Tensor out({n, c});
    out.mat() = (xhat->array().rowwise() * gm.array()).rowwise() + bt.array();
    const int ix = x.id, ig = gamma.id, ib = beta.id;
    return g.record(std::move(out), {ix, ig, ib}, [ix, ig, ib, xhat, inv](Graph& gr, int self) {
      const auto go = gr.grad(self).mat();
      const Tensor& gmv = gr.value(ig);
      const Eigen::Map<const Eigen::RowVectorXd> gmm(gmv.data(), go.cols());
      if (gr.requires_grad(ix)) {
        gr.grad_buffer(ix).mat().array() += go.array().rowwise() * (gmm.array() * inv.array());
      }
      if (gr.requires_grad(ig)) {
        Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ig).data(), go.cols()) +=
            (go.array() * xhat->array()).colwise().sum().matrix();
      }
      if (gr.requires_grad(ib)) {
        Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ib).data(), go.cols()) += go.colwise().sum();
      }
    }, "batch_norm_infer");
  }

  if (n < 2) throw ShapeError("batch_norm: training mode needs at least 2 rows");
  const Eigen::RowVectorXd mu = xv.mat().colwise().mean();
  RowMat centered = xv.mat().rowwise() - mu;
  const Eigen::RowVectorXd var = centered.array().square().colwise().mean().matrix();
  const Eigen::RowVectorXd inv = (var.array() + bn.eps).rsqrt().matrix();
  auto xhat = std::make_shared<RowMat>(centered.array().rowwise() * inv.array());
  Tensor out({n, c});
  out.mat() = (xhat->array().rowwise() * gm.array()).rowwise() + bt.array();

  Eigen::Map<Eigen::RowVectorXd> rm(bn.running_mean->value.data(), c);
  Eigen::Map<Eigen::RowVectorXd> rv(bn.running_var->value.data(), c);
  rm = bn.momentum * rm + (1.0 - bn.momentum) * mu;
  rv = bn.momentum * rv + (1.0 - bn.momentum) * var;

  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return g.record(std::move(out), {ix, ig, ib}, [ix, ig, ib, xhat, inv, n](Graph& gr, int self) {
    const auto go = gr.grad(self).mat();
    const int cc = static_cast<int>(go.cols());
    const Eigen::RowVectorXd dbeta = go.colwise().sum();
    const Eigen::RowVectorXd dgamma = (go.array() * xhat->array()).colwise().sum().matrix();
    if (gr.requires_grad(ix)) {
      const Eigen::Map<const Eigen::RowVectorXd> gmm(gr.value(ig).data(), cc);
      // dx = gamma * inv / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
      const Eigen::RowVectorXd k = (gmm.array() * inv.array() / n).matrix();
      RowMat dx = (go * static_cast<double>(n)).rowwise() - dbeta;
      dx.array() -= xhat->array().rowwise() * dgamma.array();
      gr.grad_buffer(ix).mat().array() += dx.array().rowwise() * k.array();
    }
    if (gr.requires_grad(ig)) Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ig).data(), cc) += dgamma;
    if (gr.requires_grad(ib)) Eigen::Map<Eigen::RowVectorXd>(gr.grad_buffer(ib).data(), cc) += dbeta;
  }, "batch_norm_train");
}

Var dropout(Var x, double keep_prob, Mode mode, std::mt19937_64& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) throw ConfigError("dropout: keep_prob must lie in (0, 1]");
  if (mode == Mode::kInfer || keep_prob == 1.0) return x;
  Graph& g = graph_of({x});
  const Tensor& xv = x.value();
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::bernoulli_distribution keep(keep_prob);
  const double s = 1.0 / keep_prob;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  const int ix = x.id;
  return g.record(std::move(out), {ix}, [ix, mask](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& gi = gr.grad_buffer(ix);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * (*mask)[i];
  }, "dropout");
}

// ---- Adam ----------------------------------------------------------------------------

AdamStepReport Adam::step(std::span<Parameter* const> params) {
  AdamStepReport report;
  for (const Parameter* p : params) {
    if (p->trainable && !p->grad.all_finite()) report.nonfinite.push_back(p->name);
  }
  if (!report.nonfinite.empty()) {
    report.applied = false;
    return report;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Slot& s = slots_[p];
    if (s.m.empty()) {
      s.m = Tensor(p->value.shape(), 0.0);
      s.v = Tensor(p->value.shape(), 0.0);
    }
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = p->grad[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
  return report;
}

// ---- init ----------------------------------------------------------------------------

Tensor he_normal(int fan_in, int fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
  Tensor t({fan_in, fan_out});
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

Tensor glorot_uniform(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double lim = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> ud(-lim, lim);
  Tensor t({fan_in, fan_out});
  for (auto& v : t.values()) v = ud(rng);
  return t;
}

}  // namespace podom::ad
