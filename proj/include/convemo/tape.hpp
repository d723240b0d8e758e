#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "convemo/matrix.hpp"

namespace convemo {

// Reverse-mode tape. Every op records its output value plus a closure that
// scatters the output gradient back to the parents. Nodes are created in
// topological order, so backward is a single reverse sweep.
class Tape;

struct Node {
    Matrix value;
    Matrix grad;  // lazily sized
    bool requires_grad = false;
    std::function<void()> backward_fn;

    Matrix& ensure_grad() {
        if (grad.rows() == 0 && value.rows() != 0)
            grad = Matrix(value.rows(), value.cols());
        return grad;
    }
};

using Var = Node*;

// Accumulated gradients keyed by parameter name. Shapes always match the
// parameter; accumulation is additive across backward passes.
class GradStore {
public:
    void accumulate(const std::string& name, const Matrix& g) {
        auto it = grads_.find(name);
        if (it == grads_.end()) {
            grads_.emplace(name, g);
        } else {
            check_same_shape(it->second, g, "GradStore::accumulate");
            for (size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
        }
    }
    const Matrix* find(const std::string& name) const {
        auto it = grads_.find(name);
        return it == grads_.end() ? nullptr : &it->second;
    }
    Matrix& get_or_zero(const std::string& name, int rows, int cols) {
        auto it = grads_.find(name);
        if (it == grads_.end())
            it = grads_.emplace(name, Matrix(rows, cols)).first;
        return it->second;
    }
    void reset() { grads_.clear(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::map<std::string, Matrix> grads_;
};

class Tape {
public:
    Var leaf(const Matrix& value, bool requires_grad = true) {
        Var n = alloc();
        n->value = value;
        n->requires_grad = requires_grad;
        return n;
    }
    Var constant(const Matrix& value) { return leaf(value, false); }

    Var matmul(Var a, Var b) {
        Var c = alloc();
        c->value = convemo::matmul(a->value, b->value);
        c->requires_grad = a->requires_grad || b->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, b, c] {
                if (a->requires_grad) {
                    Matrix da = convemo::matmul(c->grad, convemo::transpose(b->value));
                    accumulate(a, da);
                }
                if (b->requires_grad) {
                    Matrix db = convemo::matmul(convemo::transpose(a->value), c->grad);
                    accumulate(b, db);
                }
            };
        return c;
    }

    Var add(Var a, Var b) {
        Var c = alloc();
        c->value = convemo::add(a->value, b->value);
        c->requires_grad = a->requires_grad || b->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, b, c] {
                if (a->requires_grad) accumulate(a, c->grad);
                if (b->requires_grad) accumulate(b, c->grad);
            };
        return c;
    }

    Var hadamard(Var a, Var b) {
        Var c = alloc();
        c->value = convemo::hadamard(a->value, b->value);
        c->requires_grad = a->requires_grad || b->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, b, c] {
                if (a->requires_grad) accumulate(a, convemo::hadamard(c->grad, b->value));
                if (b->requires_grad) accumulate(b, convemo::hadamard(c->grad, a->value));
            };
        return c;
    }

    Var scale(Var a, double k) {
        Var c = alloc();
        c->value = convemo::scale(a->value, k);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c, k] { accumulate(a, convemo::scale(c->grad, k)); };
        return c;
    }

    Var tanh_ew(Var a) {
        Var c = alloc();
        c->value = convemo::tanh_ew(a->value);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] {
                Matrix da = c->grad;
                for (size_t i = 0; i < da.size(); ++i)
                    da[i] *= 1.0 - c->value[i] * c->value[i];
                accumulate(a, da);
            };
        return c;
    }

    Var sigmoid_ew(Var a) {
        Var c = alloc();
        c->value = convemo::sigmoid_ew(a->value);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] {
                Matrix da = c->grad;
                for (size_t i = 0; i < da.size(); ++i)
                    da[i] *= c->value[i] * (1.0 - c->value[i]);
                accumulate(a, da);
            };
        return c;
    }

    // 1 - x elementwise.
    Var one_minus(Var a) {
        Var c = alloc();
        c->value = a->value;
        for (size_t i = 0; i < c->value.size(); ++i) c->value[i] = 1.0 - c->value[i];
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] { accumulate(a, convemo::scale(c->grad, -1.0)); };
        return c;
    }

    Var softmax_rows(Var a) {
        Var c = alloc();
        c->value = convemo::softmax_rows(a->value);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] {
                // dx_row = (dy_row - <dy_row, y_row>) * y_row
                Matrix da(c->value.rows(), c->value.cols());
                for (int i = 0; i < da.rows(); ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < da.cols(); ++j)
                        dot += c->grad.at(i, j) * c->value.at(i, j);
                    for (int j = 0; j < da.cols(); ++j)
                        da.at(i, j) = (c->grad.at(i, j) - dot) * c->value.at(i, j);
                }
                accumulate(a, da);
            };
        return c;
    }

    Var transpose(Var a) {
        Var c = alloc();
        c->value = convemo::transpose(a->value);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] { accumulate(a, convemo::transpose(c->grad)); };
        return c;
    }

    Var concat_cols(const std::vector<Var>& parts) {
        Var c = alloc();
        std::vector<Matrix> vals;
        vals.reserve(parts.size());
        bool rq = false;
        for (Var p : parts) {
            vals.push_back(p->value);
            rq = rq || p->requires_grad;
        }
        c->value = convemo::concat_cols(vals);
        c->requires_grad = rq;
        if (rq)
            c->backward_fn = [parts, c] {
                int off = 0;
                for (Var p : parts) {
                    if (p->requires_grad)
                        accumulate(p, convemo::slice_cols(c->grad, off, off + p->value.cols()));
                    off += p->value.cols();
                }
            };
        return c;
    }

    Var concat_rows(const std::vector<Var>& parts) {
        Var c = alloc();
        std::vector<Matrix> vals;
        vals.reserve(parts.size());
        bool rq = false;
        for (Var p : parts) {
            vals.push_back(p->value);
            rq = rq || p->requires_grad;
        }
        c->value = convemo::concat_rows(vals);
        c->requires_grad = rq;
        if (rq)
            c->backward_fn = [parts, c] {
                int off = 0;
                for (Var p : parts) {
                    if (p->requires_grad)
                        accumulate(p, convemo::slice_rows(c->grad, off, off + p->value.rows()));
                    off += p->value.rows();
                }
            };
        return c;
    }

    // m (L x C) + column bias (C x 1) broadcast over rows.
    Var add_bias_rows(Var m, Var bias) {
        if (bias->value.cols() != 1 || bias->value.rows() != m->value.cols())
            throw ShapeError("add_bias_rows: bias " + bias->value.shape_str() +
                             " vs matrix " + m->value.shape_str());
        Var c = alloc();
        c->value = m->value;
        for (int i = 0; i < c->value.rows(); ++i)
            for (int j = 0; j < c->value.cols(); ++j)
                c->value.at(i, j) += bias->value.at(j, 0);
        c->requires_grad = m->requires_grad || bias->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [m, bias, c] {
                if (m->requires_grad) accumulate(m, c->grad);
                if (bias->requires_grad) {
                    Matrix db(bias->value.rows(), 1);
                    for (int i = 0; i < c->grad.rows(); ++i)
                        for (int j = 0; j < c->grad.cols(); ++j)
                            db.at(j, 0) += c->grad.at(i, j);
                    accumulate(bias, db);
                }
            };
        return c;
    }

    // Elementwise multiply by a constant mask (inverted-dropout mask).
    Var apply_mask(Var a, const Matrix& mask) {
        check_same_shape(a->value, mask, "apply_mask");
        Var c = alloc();
        c->value = convemo::hadamard(a->value, mask);
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c, mask] { accumulate(a, convemo::hadamard(c->grad, mask)); };
        return c;
    }

    Var sum_all(Var a) {
        Var c = alloc();
        double s = 0.0;
        for (size_t i = 0; i < a->value.size(); ++i) s += a->value[i];
        c->value = Matrix(1, 1, {s});
        c->requires_grad = a->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [a, c] {
                Matrix da(a->value.rows(), a->value.cols(), c->grad.at(0, 0));
                accumulate(a, da);
            };
        return c;
    }

    // Sum over utterances of -log softmax(logits)[t, labels[t]], fused so the
    // logit gradient is (softmax - onehot) regardless of probability magnitude.
    // clamp_hits counts probabilities clipped at 1e-12 before the log.
    Var cross_entropy_sum(Var logits, const std::vector<int>& labels, long* clamp_hits = nullptr) {
        const Matrix& z = logits->value;
        if (static_cast<int>(labels.size()) != z.rows())
            throw ShapeError("cross_entropy_sum: " + std::to_string(labels.size()) +
                             " labels for " + z.shape_str() + " logits");
        Matrix probs = convemo::softmax_rows(z);
        double loss = 0.0;
        for (int t = 0; t < z.rows(); ++t) {
            double p = probs.at(t, labels[t]);
            if (p < 1e-12) {
                p = 1e-12;
                if (clamp_hits) ++*clamp_hits;
            }
            loss -= std::log(p);
        }
        Var c = alloc();
        c->value = Matrix(1, 1, {loss});
        c->requires_grad = logits->requires_grad;
        if (c->requires_grad)
            c->backward_fn = [logits, c, probs, labels] {
                const double g = c->grad.at(0, 0);
                Matrix dz = probs;
                for (int t = 0; t < dz.rows(); ++t) dz.at(t, labels[t]) -= 1.0;
                accumulate(logits, convemo::scale(dz, g));
            };
        return c;
    }

    // root must be 1x1. Seeds its gradient and sweeps the tape in reverse.
    void backward(Var root, double seed = 1.0) {
        if (root->value.rows() != 1 || root->value.cols() != 1)
            throw ShapeError("backward: root is " + root->value.shape_str() + ", want 1x1");
        root->ensure_grad().at(0, 0) = seed;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = **it;
            if (n.backward_fn && n.grad.rows() != 0) n.backward_fn();
        }
    }

    size_t node_count() const { return nodes_.size(); }

private:
    Var alloc() {
        nodes_.push_back(std::make_unique<Node>());
        return nodes_.back().get();
    }

    static void accumulate(Var p, const Matrix& g) {
        Matrix& pg = p->ensure_grad();
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += g[i];
    }

    std::deque<std::unique_ptr<Node>> nodes_;
};

}  // namespace convemo
