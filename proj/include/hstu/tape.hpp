#pragma once

// Reverse-mode tape. Forward ops append nodes; backward replays them in exact
// reverse push order, accumulating gradients additively at fan-out. A tape
// constructed with record=false evaluates values only (inference).

#include <functional>
#include <map>
#include <memory>
#include <unordered_map>
#include <utility>

#include "hstu/embedding.hpp"
#include "hstu/matrix.hpp"

namespace hstu {

using Var = int;

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  // Constant or externally produced value; no gradient flows out of it.
  Var input(Matrix v) {
    nodes_.push_back(Node{std::move(v), nullptr, Matrix(), nullptr});
    return static_cast<Var>(nodes_.size()) - 1;
  }

  // Dense parameter leaf. Deduplicated by address so parameter tying (the same
  // Matrix used twice) accumulates into one gradient.
  Var param(const Matrix& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    nodes_.push_back(Node{Matrix(), &p, Matrix(), nullptr});
    Var v = static_cast<Var>(nodes_.size()) - 1;
    param_vars_.emplace(&p, v);
    return v;
  }

  // Embedding gather; backward scatters row gradients into the table's sparse
  // accumulator keyed by hashed row.
  Var lookup(const EmbeddingTable& table, std::vector<std::uint64_t> ids) {
    Matrix rows = table.lookup(ids);
    if (!record_) return input(std::move(rows));
    const EmbeddingTable* tp = &table;
    return push(std::move(rows), [tp, ids = std::move(ids)](Tape& t, const Matrix& g) {
      SparseGrad& sg = t.sparse_[tp];
      for (std::size_t i = 0; i < ids.size(); ++i) sg.add(tp->row_of(ids[i]), g.row(i), g.cols());
    });
  }

  Var push(Matrix value, std::function<void(Tape&, const Matrix&)> back) {
    nodes_.push_back(Node{std::move(value), nullptr, Matrix(), record_ ? std::move(back) : nullptr});
    return static_cast<Var>(nodes_.size()) - 1;
  }

  const Matrix& val(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v)];
    return n.ext ? *n.ext : n.value;
  }

  void add_grad(Var v, const Matrix& g) { accumulate(nodes_[static_cast<std::size_t>(v)].grad, g); }

  void add_sparse_grad(const EmbeddingTable* t, std::size_t row, const real* g, std::size_t d) {
    sparse_[t].add(row, g, d);
  }

  void backward(Var loss) {
    require(record_, "backward: tape is not recording");
    const Matrix& lv = val(loss);
    require(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be a 1x1 scalar");
    if (!std::isfinite(lv(0, 0))) throw NumericError("backward: non-finite loss");
    add_grad(loss, Matrix(1, 1, real(1)));
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this, n.grad);
    }
  }

  // Gradient of a dense parameter after backward; nullptr means zero.
  const Matrix* grad_of(const Matrix* p) const {
    auto it = param_vars_.find(p);
    if (it == param_vars_.end()) return nullptr;
    const Matrix& g = nodes_[static_cast<std::size_t>(it->second)].grad;
    return g.empty() ? nullptr : &g;
  }

  const Matrix* grad_of_var(Var v) const {
    const Matrix& g = nodes_[static_cast<std::size_t>(v)].grad;
    return g.empty() ? nullptr : &g;
  }

  const SparseGrad* sparse_grad_of(const EmbeddingTable* t) const {
    auto it = sparse_.find(t);
    return it == sparse_.end() ? nullptr : &it->second;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* ext;  // set for dense parameter leaves
    Matrix grad;
    std::function<void(Tape&, const Matrix&)> back;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Matrix*, Var> param_vars_;
  std::map<const EmbeddingTable*, SparseGrad> sparse_;
};

// ----- parameter set and gradient check ------------------------------------------

struct ParamSet {
  std::vector<std::pair<std::string, Matrix*>> dense;
  std::vector<std::pair<std::string, EmbeddingTable*>> tables;

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : dense) n += m->size();
    for (const auto& [_, t] : tables) n += t->weights().size();
    return n;
  }

  real* scalar_at(std::size_t idx, std::string* name_out = nullptr) {
    for (auto& [name, m] : dense) {
      if (idx < m->size()) {
        if (name_out) *name_out = name;
        return m->data() + idx;
      }
      idx -= m->size();
    }
    for (auto& [name, t] : tables) {
      Matrix& w = t->weights();
      if (idx < w.size()) {
        if (name_out) *name_out = name;
        return w.data() + idx;
      }
      idx -= w.size();
    }
    throw ConfigError("ParamSet: scalar index out of range");
  }
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// f(tape) must build the loss from current parameter values and return the
// scalar loss Var. Analytic gradients come from one recorded backward pass;
// they are compared against central differences scalar by scalar with
// rel_err = |analytic - numeric| / max(1, |analytic|).
template <class LossFn>
GradCheckReport grad_check(LossFn&& f, ParamSet& params, double step) {
  require(step > 0, "grad_check: step must be positive");

  Tape tape(true);
  Var loss = f(tape);
  tape.backward(loss);

  // Flatten analytic gradients in ParamSet order.
  std::vector<double> analytic;
  analytic.reserve(params.scalar_count());
  for (auto& [name, m] : params.dense) {
    const Matrix* g = tape.grad_of(m);
    for (std::size_t i = 0; i < m->size(); ++i)
      analytic.push_back(g ? double(g->data()[i]) : 0.0);
  }
  for (auto& [name, t] : params.tables) {
    const SparseGrad* sg = tape.sparse_grad_of(t);
    Matrix dense_g(t->weights().rows(), t->weights().cols());
    if (sg)
      for (const auto& [row, gr] : sg->rows)
        for (std::size_t j = 0; j < gr.cols(); ++j) dense_g(row, j) += gr(0, j);
    for (std::size_t i = 0; i < dense_g.size(); ++i) analytic.push_back(double(dense_g.data()[i]));
  }

  auto eval_loss = [&]() -> double {
    Tape t(false);
    Var l = f(t);
    double v = double(t.val(l)(0, 0));
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return v;
  };

  GradCheckReport report;
  const std::size_t total = params.scalar_count();
  for (std::size_t i = 0; i < total; ++i) {
    std::string name;
    real* slot = params.scalar_at(i, &name);
    const real saved = *slot;
    *slot = saved + real(step);
    double lp = eval_loss();
    *slot = saved - real(step);
    double lm = eval_loss();
    *slot = saved;
    double numeric = (lp - lm) / (2.0 * step);
    double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = name;
    }
  }
  return report;
}

}  // namespace hstu
