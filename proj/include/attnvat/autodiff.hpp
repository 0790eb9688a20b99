#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <utility>

#include "attnvat/tensor.hpp"

namespace attnvat::autodiff {

enum class Activation { Tanh, Sigmoid };

// Probabilities are clamped into [kProbFloor, 1 - kProbFloor] before any log
// is taken. Gradients are zero where the clamp is active.
inline constexpr double kProbFloor = 1e-7;

inline double clamp_prob(double v) {
    if (v < kProbFloor) return kProbFloor;
    if (v > 1.0 - kProbFloor) return 1.0 - kProbFloor;
    return v;
}

class Tape;

// node id -> gradient tensor of matching shape. Only nodes with
// requires_grad that are ancestors of the loss receive entries.
class GradientMap {
public:
    bool contains(NodeId id) const { return grads_.find(id) != grads_.end(); }

    const Tensor& at(NodeId id) const {
        auto it = grads_.find(id);
        if (it == grads_.end()) throw std::out_of_range("GradientMap: no gradient for node " + std::to_string(id));
        return it->second;
    }

    // Gradient for a node, or a zero tensor of the given shape when the node
    // never received one (a requires_grad leaf the loss does not depend on).
    Tensor at_or_zero(NodeId id, const std::vector<int>& shape) const {
        auto it = grads_.find(id);
        if (it == grads_.end()) return Tensor::zeros(shape);
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }

private:
    friend class Tape;

    std::vector<double>& accumulator(NodeId id, const std::vector<int>& shape) {
        auto it = grads_.find(id);
        if (it == grads_.end()) it = grads_.emplace(id, Tensor::zeros(shape)).first;
        return it->second.mutable_values();
    }

    std::unordered_map<NodeId, Tensor> grads_;
};

// Record of one computation, rebuilt per forward pass. Nodes are stored in
// creation order, so every node's parents precede it and backward() is a
// single reverse sweep that touches each node once.
class Tape {
public:
    Tape() : id_(next_tape_id()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    // --- node registration -------------------------------------------------

    Tensor leaf(const Tensor& t) { return record(t, {}, nullptr); }

    Tensor constant(Tensor t) {
        t.set_requires_grad(false);
        return record(t, {}, nullptr);
    }

    Tensor constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // --- elementwise -------------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", std::plus<double>{}, 1.0, 1.0); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", std::minus<double>{}, 1.0, -1.0); }

    Tensor mul(const Tensor& a, const Tensor& b) {
        Tensor ta = ensure(a), tb = ensure(b);
        check_same_shape(ta, tb, "mul");
        std::vector<double> out(ta.values().size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta.values()[i] * tb.values()[i];
        NodeId ia = ta.node_id(), ib = tb.node_id();
        return record(Tensor(ta.shape(), std::move(out), grad_any(ta, tb)), {ia, ib},
                      [ia, ib](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          const auto& va = tape.values_of(ia);
                          const auto& vb = tape.values_of(ib);
                          if (auto* ga = tape.grad_slot(g, ia))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * vb[i];
                          if (auto* gb = tape.grad_slot(g, ib))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * va[i];
                      });
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor ta = ensure(a);
        std::vector<double> out(ta.values().size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta.values()[i];
        NodeId ia = ta.node_id();
        return record(Tensor(ta.shape(), std::move(out), ta.requires_grad()), {ia},
                      [ia, c](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* ga = tape.grad_slot(g, ia))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += c * dy[i];
                      });
    }

    Tensor activation(const Tensor& x, Activation kind) {
        Tensor tx = ensure(x);
        std::vector<double> out(tx.values().size());
        switch (kind) {
            case Activation::Tanh:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(tx.values()[i]);
                break;
            case Activation::Sigmoid:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-tx.values()[i]));
                break;
            default:
                throw std::domain_error("activation: unrecognized kind");
        }
        NodeId ix = tx.node_id();
        Tensor result = record(Tensor(tx.shape(), std::move(out), tx.requires_grad()), {ix}, nullptr);
        NodeId iy = result.node_id();
        nodes_[iy].pull = [ix, iy, kind](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
            auto* gx = tape.grad_slot(g, ix);
            if (!gx) return;
            const auto& y = tape.values_of(iy);
            if (kind == Activation::Tanh) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * (1.0 - y[i] * y[i]);
            } else {
                for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i] * y[i] * (1.0 - y[i]);
            }
        };
        return result;
    }

    Tensor tanh_of(const Tensor& x) { return activation(x, Activation::Tanh); }
    Tensor sigmoid_of(const Tensor& x) { return activation(x, Activation::Sigmoid); }

    // --- linear algebra ----------------------------------------------------

    // W x + b with W [n x m], x [m], b [n].
    Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b) {
        Tensor tx = ensure(x), tw = ensure(W), tb = ensure(b);
        if (tw.shape().size() != 2)
            throw std::invalid_argument("affine: weight must be 2-D, got " + shape_string(tw.shape()));
        int n = tw.shape()[0], m = tw.shape()[1];
        if (tx.numel() != m)
            throw std::invalid_argument("affine: weight " + shape_string(tw.shape()) + " incompatible with input " +
                                        shape_string(tx.shape()));
        if (tb.numel() != n)
            throw std::invalid_argument("affine: weight " + shape_string(tw.shape()) + " incompatible with bias " +
                                        shape_string(tb.shape()));
        std::vector<double> out(static_cast<std::size_t>(n));
        for (int r = 0; r < n; ++r) {
            double s = tb.values()[static_cast<std::size_t>(r)];
            const double* wrow = tw.values().data() + static_cast<std::size_t>(r) * m;
            for (int c = 0; c < m; ++c) s += wrow[c] * tx.values()[static_cast<std::size_t>(c)];
            out[static_cast<std::size_t>(r)] = s;
        }
        NodeId ix = tx.node_id(), iw = tw.node_id(), ib = tb.node_id();
        return record(Tensor({n}, std::move(out), grad_any(tx, tw, tb)), {ix, iw, ib},
                      [ix, iw, ib, n, m](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          const auto& xv = tape.values_of(ix);
                          const auto& wv = tape.values_of(iw);
                          if (auto* gx = tape.grad_slot(g, ix)) {
                              for (int r = 0; r < n; ++r) {
                                  const double* wrow = wv.data() + static_cast<std::size_t>(r) * m;
                                  for (int c = 0; c < m; ++c) (*gx)[c] += dy[static_cast<std::size_t>(r)] * wrow[c];
                              }
                          }
                          if (auto* gw = tape.grad_slot(g, iw)) {
                              for (int r = 0; r < n; ++r) {
                                  double* grow = gw->data() + static_cast<std::size_t>(r) * m;
                                  for (int c = 0; c < m; ++c) grow[c] += dy[static_cast<std::size_t>(r)] * xv[c];
                              }
                          }
                          if (auto* gb = tape.grad_slot(g, ib))
                              for (int r = 0; r < n; ++r) (*gb)[r] += dy[static_cast<std::size_t>(r)];
                      });
    }

    Tensor matvec(const Tensor& W, const Tensor& x) {
        if (W.shape().size() != 2)
            throw std::invalid_argument("matvec: weight must be 2-D, got " + shape_string(W.shape()));
        return affine(x, W, constant(Tensor::zeros({W.shape()[0]})));
    }

    Tensor dot(const Tensor& a, const Tensor& b) {
        Tensor ta = ensure(a), tb = ensure(b);
        check_same_shape(ta, tb, "dot");
        double s = 0.0;
        for (std::size_t i = 0; i < ta.values().size(); ++i) s += ta.values()[i] * tb.values()[i];
        NodeId ia = ta.node_id(), ib = tb.node_id();
        return record(Tensor::scalar(s, grad_any(ta, tb)), {ia, ib},
                      [ia, ib](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          const auto& va = tape.values_of(ia);
                          const auto& vb = tape.values_of(ib);
                          if (auto* ga = tape.grad_slot(g, ia))
                              for (std::size_t i = 0; i < va.size(); ++i) (*ga)[i] += dy[0] * vb[i];
                          if (auto* gb = tape.grad_slot(g, ib))
                              for (std::size_t i = 0; i < vb.size(); ++i) (*gb)[i] += dy[0] * va[i];
                      });
    }

    // --- shape ops ----------------------------------------------------------

    Tensor concat(const Tensor& a, const Tensor& b) {
        Tensor ta = ensure(a), tb = ensure(b);
        std::vector<double> out;
        out.reserve(ta.values().size() + tb.values().size());
        out.insert(out.end(), ta.values().begin(), ta.values().end());
        out.insert(out.end(), tb.values().begin(), tb.values().end());
        NodeId ia = ta.node_id(), ib = tb.node_id();
        std::size_t na = ta.values().size();
        int total = static_cast<int>(out.size());
        return record(Tensor({total}, std::move(out), grad_any(ta, tb)), {ia, ib},
                      [ia, ib, na](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* ga = tape.grad_slot(g, ia))
                              for (std::size_t i = 0; i < na; ++i) (*ga)[i] += dy[i];
                          if (auto* gb = tape.grad_slot(g, ib))
                              for (std::size_t i = na; i < dy.size(); ++i) (*gb)[i - na] += dy[i];
                      });
    }

    Tensor slice(const Tensor& x, int offset, int len) {
        Tensor tx = ensure(x);
        if (offset < 0 || len <= 0 || offset + len > tx.numel())
            throw std::invalid_argument("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                                        ") out of bounds for " + shape_string(tx.shape()));
        std::vector<double> out(tx.values().begin() + offset, tx.values().begin() + offset + len);
        NodeId ix = tx.node_id();
        return record(Tensor({len}, std::move(out), tx.requires_grad()), {ix},
                      [ix, offset, len](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gx = tape.grad_slot(g, ix))
                              for (int i = 0; i < len; ++i) (*gx)[static_cast<std::size_t>(offset + i)] += dy[static_cast<std::size_t>(i)];
                      });
    }

    // Same values under a new shape; gradients pass through untouched.
    Tensor reshape(const Tensor& x, std::vector<int> shape) {
        Tensor tx = ensure(x);
        std::size_t n = 1;
        for (int d : shape) n *= static_cast<std::size_t>(d > 0 ? d : 0);
        if (n != tx.values().size())
            throw std::invalid_argument("reshape: " + shape_string(tx.shape()) + " cannot become " + shape_string(shape));
        NodeId ix = tx.node_id();
        return record(Tensor(std::move(shape), tx.values(), tx.requires_grad()), {ix},
                      [ix](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gx = tape.grad_slot(g, ix))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*gx)[i] += dy[i];
                      });
    }

    // Row r of a [R x C] tensor as a [C] vector.
    Tensor row(const Tensor& m, int r) {
        Tensor tm = ensure(m);
        if (tm.shape().size() != 2)
            throw std::invalid_argument("row: expected 2-D tensor, got " + shape_string(tm.shape()));
        int rows = tm.shape()[0], cols = tm.shape()[1];
        if (r < 0 || r >= rows)
            throw std::invalid_argument("row: index " + std::to_string(r) + " out of range for " + shape_string(tm.shape()));
        std::vector<double> out(tm.values().begin() + static_cast<std::size_t>(r) * cols,
                                tm.values().begin() + static_cast<std::size_t>(r + 1) * cols);
        NodeId im = tm.node_id();
        return record(Tensor({cols}, std::move(out), tm.requires_grad()), {im},
                      [im, r, cols](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gm = tape.grad_slot(g, im))
                              for (int c = 0; c < cols; ++c) (*gm)[static_cast<std::size_t>(r) * cols + c] += dy[static_cast<std::size_t>(c)];
                      });
    }

    // Embedding lookup: row `r` of the table, with a sparse scatter on backward.
    Tensor gather_row(const Tensor& table, int r) { return row(table, r); }

    Tensor stack(std::span<const Tensor> scalars) {
        if (scalars.empty()) throw std::domain_error("stack: empty input");
        std::vector<NodeId> parents;
        std::vector<double> out;
        bool rg = false;
        parents.reserve(scalars.size());
        out.reserve(scalars.size());
        for (const Tensor& s : scalars) {
            Tensor ts = ensure(s);
            if (ts.numel() != 1) throw std::invalid_argument("stack: inputs must be scalars, got " + shape_string(ts.shape()));
            parents.push_back(ts.node_id());
            out.push_back(ts.value());
            rg = rg || ts.requires_grad();
        }
        std::vector<NodeId> captured = parents;
        int total = static_cast<int>(out.size());
        return record(Tensor({total}, std::move(out), rg), std::move(parents),
                      [captured](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          for (std::size_t i = 0; i < captured.size(); ++i)
                              if (auto* gi = tape.grad_slot(g, captured[i])) (*gi)[0] += dy[i];
                      });
    }

    // Rows of equal length stacked into a [K x C] tensor.
    Tensor stack_rows(std::span<const Tensor> rows) {
        if (rows.empty()) throw std::domain_error("stack_rows: empty input");
        std::vector<NodeId> parents;
        std::vector<double> out;
        bool rg = false;
        int cols = -1;
        for (const Tensor& r : rows) {
            Tensor tr = ensure(r);
            if (cols < 0) cols = tr.numel();
            if (tr.numel() != cols) throw std::invalid_argument("stack_rows: mixed row lengths");
            parents.push_back(tr.node_id());
            out.insert(out.end(), tr.values().begin(), tr.values().end());
            rg = rg || tr.requires_grad();
        }
        std::vector<NodeId> captured = parents;
        int k = static_cast<int>(rows.size());
        return record(Tensor({k, cols}, std::move(out), rg), std::move(parents),
                      [captured, cols](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          for (std::size_t r = 0; r < captured.size(); ++r) {
                              if (auto* gr = tape.grad_slot(g, captured[r]))
                                  for (int c = 0; c < cols; ++c)
                                      (*gr)[static_cast<std::size_t>(c)] += dy[r * static_cast<std::size_t>(cols) + c];
                          }
                      });
    }

    // --- reductions ----------------------------------------------------------

    Tensor sum(const Tensor& x) {
        Tensor tx = ensure(x);
        double s = 0.0;
        for (double v : tx.values()) s += v;
        NodeId ix = tx.node_id();
        return record(Tensor::scalar(s, tx.requires_grad()), {ix},
                      [ix](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gx = tape.grad_slot(g, ix))
                              for (auto& v : *gx) v += dy[0];
                      });
    }

    Tensor sumsq(const Tensor& x) {
        Tensor tx = ensure(x);
        double s = 0.0;
        for (double v : tx.values()) s += v * v;
        NodeId ix = tx.node_id();
        return record(Tensor::scalar(s, tx.requires_grad()), {ix},
                      [ix](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gx = tape.grad_slot(g, ix)) {
                              const auto& xv = tape.values_of(ix);
                              for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += 2.0 * xv[i] * dy[0];
                          }
                      });
    }

    Tensor mean_of(std::span<const Tensor> scalars) {
        Tensor stacked = stack(scalars);
        return scale(sum(stacked), 1.0 / static_cast<double>(scalars.size()));
    }

    // --- probability ops -----------------------------------------------------

    // Numerically stable softmax over a vector; backward uses the
    // Jacobian-vector form dx_i = y_i (dy_i - sum_j dy_j y_j).
    Tensor softmax(const Tensor& x) {
        Tensor tx = ensure(x);
        if (tx.numel() < 1) throw std::domain_error("softmax: empty input");
        double mx = tx.values()[0];
        for (double v : tx.values()) mx = std::max(mx, v);
        std::vector<double> out(tx.values().size());
        double z = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std::exp(tx.values()[i] - mx);
            z += out[i];
        }
        for (auto& v : out) v /= z;
        NodeId ix = tx.node_id();
        Tensor result = record(Tensor(tx.shape(), std::move(out), tx.requires_grad()), {ix}, nullptr);
        NodeId iy = result.node_id();
        nodes_[iy].pull = [ix, iy](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
            auto* gx = tape.grad_slot(g, ix);
            if (!gx) return;
            const auto& y = tape.values_of(iy);
            double dot = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
            for (std::size_t i = 0; i < y.size(); ++i) (*gx)[i] += y[i] * (dy[i] - dot);
        };
        return result;
    }

    // KL divergence between two Bernoulli distributions given by their
    // success probabilities: p log(p/q) + (1-p) log((1-p)/(1-q)).
    Tensor kl_bernoulli(const Tensor& p, const Tensor& q) {
        Tensor tp = ensure(p), tq = ensure(q);
        if (tp.numel() != 1 || tq.numel() != 1)
            throw std::invalid_argument("kl_bernoulli: expected scalars, got " + shape_string(tp.shape()) + " and " +
                                        shape_string(tq.shape()));
        check_unit_interval(tp.value(), "kl_bernoulli: p");
        check_unit_interval(tq.value(), "kl_bernoulli: q");
        double pc = clamp_prob(tp.value());
        double qc = clamp_prob(tq.value());
        double kl = pc * std::log(pc / qc) + (1.0 - pc) * std::log((1.0 - pc) / (1.0 - qc));
        NodeId ip = tp.node_id(), iq = tq.node_id();
        bool p_clamped = pc != tp.value();
        bool q_clamped = qc != tq.value();
        return record(Tensor::scalar(kl, grad_any(tp, tq)), {ip, iq},
                      [ip, iq, pc, qc, p_clamped, q_clamped](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gp = tape.grad_slot(g, ip)) {
                              if (!p_clamped)
                                  (*gp)[0] += dy[0] * (std::log(pc / qc) - std::log((1.0 - pc) / (1.0 - qc)));
                          }
                          if (auto* gq = tape.grad_slot(g, iq)) {
                              if (!q_clamped) (*gq)[0] += dy[0] * ((1.0 - pc) / (1.0 - qc) - pc / qc);
                          }
                      });
    }

    // -[y log q + (1-y) log(1-q)] for a binary label y.
    Tensor nll_bernoulli(const Tensor& prob, int label) {
        Tensor tq = ensure(prob);
        if (tq.numel() != 1)
            throw std::invalid_argument("nll_bernoulli: expected scalar probability, got " + shape_string(tq.shape()));
        if (label != 0 && label != 1)
            throw std::domain_error("nll_bernoulli: label must be 0 or 1, got " + std::to_string(label));
        check_unit_interval(tq.value(), "nll_bernoulli: prob");
        double qc = clamp_prob(tq.value());
        double loss = label == 1 ? -std::log(qc) : -std::log(1.0 - qc);
        NodeId iq = tq.node_id();
        bool clamped = qc != tq.value();
        return record(Tensor::scalar(loss, tq.requires_grad()), {iq},
                      [iq, qc, label, clamped](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gq = tape.grad_slot(g, iq)) {
                              if (!clamped) (*gq)[0] += dy[0] * (label == 1 ? -1.0 / qc : 1.0 / (1.0 - qc));
                          }
                      });
    }

    // sum_k coeffs_k * dirs[k], where dirs are fixed direction vectors that
    // take no gradient.
    Tensor lincomb_const(const Tensor& coeffs, const std::vector<std::vector<double>>& dirs) {
        Tensor tc = ensure(coeffs);
        if (static_cast<std::size_t>(tc.numel()) != dirs.size())
            throw std::invalid_argument("lincomb_const: " + std::to_string(tc.numel()) + " coefficients for " +
                                        std::to_string(dirs.size()) + " directions");
        if (dirs.empty()) throw std::domain_error("lincomb_const: empty direction set");
        std::size_t d = dirs[0].size();
        std::vector<double> out(d, 0.0);
        for (std::size_t k = 0; k < dirs.size(); ++k)
            for (std::size_t j = 0; j < d; ++j) out[j] += tc.values()[k] * dirs[k][j];
        NodeId ic = tc.node_id();
        auto captured = dirs;
        return record(Tensor({static_cast<int>(d)}, std::move(out), tc.requires_grad()), {ic},
                      [ic, captured](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* gc = tape.grad_slot(g, ic)) {
                              for (std::size_t k = 0; k < captured.size(); ++k) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < dy.size(); ++j) s += dy[j] * captured[k][j];
                                  (*gc)[k] += s;
                              }
                          }
                      });
    }

    // sum_t weights_t * vecs[t]; weights is a [T] node, vecs are [m] nodes.
    Tensor weighted_sum(const Tensor& weights, std::span<const Tensor> vecs) {
        Tensor tw = ensure(weights);
        if (static_cast<std::size_t>(tw.numel()) != vecs.size())
            throw std::invalid_argument("weighted_sum: " + std::to_string(tw.numel()) + " weights for " +
                                        std::to_string(vecs.size()) + " vectors");
        std::vector<NodeId> parents{tw.node_id()};
        bool rg = tw.requires_grad();
        std::vector<NodeId> vec_ids;
        std::size_t m = 0;
        for (const Tensor& v : vecs) {
            Tensor tv = ensure(v);
            if (m == 0) m = tv.values().size();
            if (tv.values().size() != m) throw std::invalid_argument("weighted_sum: mixed vector lengths");
            vec_ids.push_back(tv.node_id());
            parents.push_back(tv.node_id());
            rg = rg || tv.requires_grad();
        }
        std::vector<double> out(m, 0.0);
        for (std::size_t t = 0; t < vec_ids.size(); ++t) {
            const auto& vv = values_of(vec_ids[t]);
            double w = tw.values()[t];
            for (std::size_t j = 0; j < m; ++j) out[j] += w * vv[j];
        }
        NodeId iw = tw.node_id();
        return record(Tensor({static_cast<int>(m)}, std::move(out), rg), std::move(parents),
                      [iw, vec_ids](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          const auto& wv = tape.values_of(iw);
                          auto* gw = tape.grad_slot(g, iw);
                          for (std::size_t t = 0; t < vec_ids.size(); ++t) {
                              const auto& vv = tape.values_of(vec_ids[t]);
                              if (gw) {
                                  double s = 0.0;
                                  for (std::size_t j = 0; j < dy.size(); ++j) s += dy[j] * vv[j];
                                  (*gw)[t] += s;
                              }
                              if (auto* gv = tape.grad_slot(g, vec_ids[t]))
                                  for (std::size_t j = 0; j < dy.size(); ++j) (*gv)[j] += wv[t] * dy[j];
                          }
                      });
    }

    // --- backward ------------------------------------------------------------

    GradientMap backward(const Tensor& loss) {
        if (!loss.on_tape() || loss.tape_id() != id_)
            throw std::invalid_argument("backward: loss tensor is not on this tape");
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_string(loss.shape()));
        GradientMap g;
        if (!nodes_[loss.node_id()].self.requires_grad()) return g;
        g.accumulator(loss.node_id(), loss.shape())[0] = 1.0;
        for (NodeId id = loss.node_id(); id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.self.requires_grad() || !n.pull) continue;
            auto it = g.grads_.find(id);
            if (it == g.grads_.end()) continue;
            n.pull(*this, it->second.values(), g);
        }
        return g;
    }

    const std::vector<double>& values_of(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].self.values(); }
    const Tensor& tensor_of(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].self; }

private:
    struct Node {
        Tensor self;
        std::vector<NodeId> parents;
        std::function<void(Tape&, const std::vector<double>&, GradientMap&)> pull;
    };

    static std::uint64_t next_tape_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    Tensor ensure(const Tensor& t) {
        if (!t.defined()) throw std::invalid_argument("op input tensor is default-constructed");
        if (t.on_tape()) {
            if (t.tape_id() != id_) throw std::invalid_argument("op input tensor belongs to a different tape");
            return t;
        }
        return record(t, {}, nullptr);
    }

    Tensor record(Tensor t, std::vector<NodeId> parents,
                  std::function<void(Tape&, const std::vector<double>&, GradientMap&)> pull) {
        NodeId id = static_cast<NodeId>(nodes_.size());
        t.bind(id, id_);
        nodes_.push_back(Node{t, std::move(parents), std::move(pull)});
        return t;
    }

    std::vector<double>* grad_slot(GradientMap& g, NodeId id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.self.requires_grad()) return nullptr;
        return &g.accumulator(id, n.self.shape());
    }

    static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
        if (a.shape() != b.shape())
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                        shape_string(b.shape()));
    }

    static void check_unit_interval(double v, const std::string& what) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error(what + " = " + std::to_string(v) + " outside [0, 1]");
    }

    static bool grad_any(const Tensor& a, const Tensor& b) { return a.requires_grad() || b.requires_grad(); }
    static bool grad_any(const Tensor& a, const Tensor& b, const Tensor& c) {
        return a.requires_grad() || b.requires_grad() || c.requires_grad();
    }

    template <class Fwd>
    Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, double ca, double cb) {
        Tensor ta = ensure(a), tb = ensure(b);
        check_same_shape(ta, tb, op);
        std::vector<double> out(ta.values().size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ta.values()[i], tb.values()[i]);
        NodeId ia = ta.node_id(), ib = tb.node_id();
        return record(Tensor(ta.shape(), std::move(out), grad_any(ta, tb)), {ia, ib},
                      [ia, ib, ca, cb](Tape& tape, const std::vector<double>& dy, GradientMap& g) {
                          if (auto* ga = tape.grad_slot(g, ia))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += ca * dy[i];
                          if (auto* gb = tape.grad_slot(g, ib))
                              for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += cb * dy[i];
                      });
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
};

// Max relative error between the analytic gradient of f at x and a central
// finite difference with step h. f builds its value on the tape it is given;
// the leaf it receives is the point of differentiation.
inline double fd_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor probe = x;
    probe.set_requires_grad(true);

    Tape tape;
    Tensor xl = tape.leaf(probe);
    Tensor loss = f(tape, xl);
    GradientMap grads = tape.backward(loss);
    Tensor analytic = grads.at_or_zero(xl.node_id(), x.shape());

    auto eval_at = [&](const std::vector<double>& vals) {
        Tape t;
        Tensor xi = t.leaf(Tensor(x.shape(), vals, true));
        return f(t, xi).value();
    };

    double worst = 0.0;
    std::vector<double> base = x.values();
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        double numeric = (eval_at(plus) - eval_at(minus)) / (2.0 * h);
        double a = analytic.at(static_cast<int>(i));
        double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace attnvat::autodiff
