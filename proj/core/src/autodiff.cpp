#include "fedcspc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "fedcspc/error.hpp"

namespace fedcspc::ad {

namespace {

Var make_op(Tensor value, std::vector<NodePtr> parents, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

void add_into(Tensor* dst, std::size_t i, double v) {
    if (dst) (*dst)[i] += v;
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(t.shape()));
}

// Index of the broadcast operand element for output position i.
inline std::size_t bidx(const Tensor& t, std::size_t i) { return t.size() == 1 ? 0 : i; }

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (b.size() == 1) return a.shape();
    if (a.size() == 1) return b.shape();
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
}

}  // namespace

Tensor Var::grad() const {
    if (node_->grad.shape() != node_->value.shape()) return Tensor::zeros(node_->value.shape());
    return node_->grad;
}

void Var::zero_grad() { node_->grad = Tensor::zeros(node_->value.shape()); }

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

const Tensor& Gradients::of(const Var& leaf) const {
    auto it = map_.find(leaf.node().get());
    if (it == map_.end()) throw ContractError("no gradient recorded for this leaf");
    return it->second;
}

Gradients backward(const Var& root) {
    if (!root) throw ContractError("backward on an empty Var");
    if (!root.value().is_scalar()) {
        throw ContractError("backward needs a scalar root, got shape " + shape_string(root.shape()));
    }
    Gradients out;
    if (!root.requires_grad()) return out;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, Tensor> adjoint;
    adjoint.emplace(root.node().get(), Tensor::filled(root.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        auto found = adjoint.find(node);
        if (found == adjoint.end()) continue;
        const Tensor& g = found->second;
        if (node->parents.empty()) {
            if (node->grad.shape() != node->value.shape()) node->grad = Tensor::zeros(node->value.shape());
            for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
            out.map_.emplace(node, g);
            continue;
        }
        std::vector<Tensor*> slots(node->parents.size(), nullptr);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            Node* p = node->parents[i].get();
            if (!p->requires_grad) continue;
            auto [pos, inserted] = adjoint.try_emplace(p);
            if (inserted) pos->second = Tensor::zeros(p->value.shape());
            slots[i] = &pos->second;
        }
        node->backward(g, slots);
    }
    return out;
}

Var elementwise(BinaryKind kind, const Var& a, const Var& b) {
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    Shape shape = broadcast_shape(x, y, names[static_cast<int>(kind)]);
    std::size_t n = std::max(x.size(), y.size());
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        double p = x[bidx(x, i)], q = y[bidx(y, i)];
        switch (kind) {
            case BinaryKind::add: v[i] = p + q; break;
            case BinaryKind::sub: v[i] = p - q; break;
            case BinaryKind::mul: v[i] = p * q; break;
            case BinaryKind::div:
                if (q == 0.0) throw DomainError("division by zero");
                v[i] = p / q;
                break;
        }
    }
    return make_op(Tensor(std::move(shape), std::move(v)), {a.node(), b.node()},
                   [kind, x, y, n](const Tensor& g, std::span<Tensor*> out) {
                       for (std::size_t i = 0; i < n; ++i) {
                           std::size_t ia = bidx(x, i), ib = bidx(y, i);
                           switch (kind) {
                               case BinaryKind::add:
                                   add_into(out[0], ia, g[i]);
                                   add_into(out[1], ib, g[i]);
                                   break;
                               case BinaryKind::sub:
                                   add_into(out[0], ia, g[i]);
                                   add_into(out[1], ib, -g[i]);
                                   break;
                               case BinaryKind::mul:
                                   add_into(out[0], ia, g[i] * y[ib]);
                                   add_into(out[1], ib, g[i] * x[ia]);
                                   break;
                               case BinaryKind::div:
                                   add_into(out[0], ia, g[i] / y[ib]);
                                   add_into(out[1], ib, -g[i] * x[ia] / (y[ib] * y[ib]));
                                   break;
                           }
                       }
                   });
}

Var elementwise(UnaryKind kind, const Var& a) {
    const Tensor& x = a.value();
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double p = x[i];
        switch (kind) {
            case UnaryKind::exp: v[i] = std::exp(p); break;
            case UnaryKind::log:
                if (!(p > 0.0)) throw DomainError("log of non-positive value " + std::to_string(p));
                v[i] = std::log(p);
                break;
            case UnaryKind::relu: v[i] = p > 0.0 ? p : 0.0; break;
            case UnaryKind::negate: v[i] = -p; break;
            case UnaryKind::abs: v[i] = std::fabs(p); break;
            case UnaryKind::square: v[i] = p * p; break;
        }
    }
    Tensor out(x.shape(), std::move(v));
    Tensor y = kind == UnaryKind::exp ? out : Tensor{};
    return make_op(std::move(out), {a.node()}, [kind, x, y](const Tensor& g, std::span<Tensor*> o) {
        Tensor& d = *o[0];
        for (std::size_t i = 0; i < x.size(); ++i) {
            double p = x[i];
            switch (kind) {
                case UnaryKind::exp: d[i] += g[i] * y[i]; break;
                case UnaryKind::log: d[i] += g[i] / p; break;
                // subgradient 0 at the kink
                case UnaryKind::relu: d[i] += p > 0.0 ? g[i] : 0.0; break;
                case UnaryKind::negate: d[i] -= g[i]; break;
                case UnaryKind::abs: d[i] += p > 0.0 ? g[i] : (p < 0.0 ? -g[i] : 0.0); break;
                case UnaryKind::square: d[i] += 2.0 * p * g[i]; break;
            }
        }
    });
}

Var add(const Var& a, const Var& b) { return elementwise(BinaryKind::add, a, b); }
Var sub(const Var& a, const Var& b) { return elementwise(BinaryKind::sub, a, b); }
Var mul(const Var& a, const Var& b) { return elementwise(BinaryKind::mul, a, b); }
Var div(const Var& a, const Var& b) { return elementwise(BinaryKind::div, a, b); }
Var neg(const Var& a) { return elementwise(UnaryKind::negate, a); }
Var exp(const Var& a) { return elementwise(UnaryKind::exp, a); }
Var log(const Var& a) { return elementwise(UnaryKind::log, a); }
Var relu(const Var& a) { return elementwise(UnaryKind::relu, a); }
Var abs(const Var& a) { return elementwise(UnaryKind::abs, a); }
Var square(const Var& a) { return elementwise(UnaryKind::square, a); }

Var scale(const Var& a, double factor) {
    const Tensor& x = a.value();
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) v[i] = x[i] * factor;
    return make_op(Tensor(x.shape(), std::move(v)), {a.node()}, [factor](const Tensor& g, std::span<Tensor*> o) {
        for (std::size_t i = 0; i < g.size(); ++i) (*o[0])[i] += g[i] * factor;
    });
}

Var shift(const Var& a, double offset) {
    const Tensor& x = a.value();
    std::vector<double> v(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) v[i] = x[i] + offset;
    return make_op(Tensor(x.shape(), std::move(v)), {a.node()}, [](const Tensor& g, std::span<Tensor*> o) {
        for (std::size_t i = 0; i < g.size(); ++i) (*o[0])[i] += g[i];
    });
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_matrix(x, "matmul");
    require_matrix(y, "matmul");
    std::size_t n = x.rows(), k = x.cols(), m = y.cols();
    if (y.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(x.shape()) + " x " +
                             shape_string(y.shape()));
    }
    std::vector<double> v(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double xi = x[i * k + p];
            if (xi == 0.0) continue;
            const double* yr = &y.data()[p * m];
            double* out = &v[i * m];
            for (std::size_t j = 0; j < m; ++j) out[j] += xi * yr[j];
        }
    }
    return make_op(Tensor::matrix(n, m, std::move(v)), {a.node(), b.node()},
                   [x, y, n, k, m](const Tensor& g, std::span<Tensor*> o) {
                       if (o[0]) {  // dX = G Y^T
                           Tensor& dx = *o[0];
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
                                   dx[i * k + p] += s;
                               }
                       }
                       if (o[1]) {  // dY = X^T G
                           Tensor& dy = *o[1];
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                   double xi = x[i * k + p];
                                   if (xi == 0.0) continue;
                                   for (std::size_t j = 0; j < m; ++j) dy[p * m + j] += xi * g[i * m + j];
                               }
                       }
                   });
}

Var transpose(const Var& a) {
    const Tensor& x = a.value();
    require_matrix(x, "transpose");
    std::size_t n = x.rows(), m = x.cols();
    std::vector<double> v(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) v[j * n + i] = x[i * m + j];
    return make_op(Tensor::matrix(m, n, std::move(v)), {a.node()}, [n, m](const Tensor& g, std::span<Tensor*> o) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*o[0])[i * m + j] += g[j * n + i];
    });
}

Var add_row(const Var& a, const Var& row) {
    const Tensor& x = a.value();
    const Tensor& r = row.value();
    require_matrix(x, "add_row");
    if (r.rows() != 1 || r.cols() != x.cols()) {
        throw DimensionError("add_row: row of shape " + shape_string(r.shape()) + " does not fit " +
                             shape_string(x.shape()));
    }
    std::size_t n = x.rows(), m = x.cols();
    std::vector<double> v(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x[i * m + j] + r[j];
    return make_op(Tensor::matrix(n, m, std::move(v)), {a.node(), row.node()},
                   [n, m](const Tensor& g, std::span<Tensor*> o) {
                       for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < m; ++j) {
                               add_into(o[0], i * m + j, g[i * m + j]);
                               add_into(o[1], j, g[i * m + j]);
                           }
                   });
}

Var gather_rows(const Var& a, std::span<const std::size_t> indices) {
    const Tensor& x = a.value();
    require_matrix(x, "gather_rows");
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Tensor out = fedcspc::gather_rows(x, idx);
    std::size_t m = x.cols();
    return make_op(std::move(out), {a.node()}, [idx, m](const Tensor& g, std::span<Tensor*> o) {
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < m; ++j) (*o[0])[idx[r] * m + j] += g[r * m + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows of nothing");
    std::size_t m = parts.front().value().cols();
    std::vector<double> v;
    std::vector<NodePtr> parents;
    std::vector<std::size_t> offsets;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_matrix(p.value(), "concat_rows");
        if (p.value().cols() != m) {
            throw DimensionError("concat_rows: column mismatch " + shape_string(p.shape()) + " vs " +
                                 std::to_string(m) + " columns");
        }
        offsets.push_back(v.size());
        v.insert(v.end(), p.value().data().begin(), p.value().data().end());
        rows += p.value().rows();
        parents.push_back(p.node());
    }
    return make_op(Tensor::matrix(rows, m, std::move(v)), std::move(parents),
                   [offsets](const Tensor& g, std::span<Tensor*> o) {
                       for (std::size_t k = 0; k < o.size(); ++k) {
                           if (!o[k]) continue;
                           for (std::size_t i = 0; i < o[k]->size(); ++i) (*o[k])[i] += g[offsets[k] + i];
                       }
                   });
}

Var reduce(ReduceKind kind, const Var& a, std::optional<std::size_t> axis) {
    const Tensor& x = a.value();
    if (!axis) {
        double r = 0.0;
        std::size_t arg = 0;
        switch (kind) {
            case ReduceKind::sum:
            case ReduceKind::mean:
                for (double v : x.data()) r += v;
                if (kind == ReduceKind::mean) r /= static_cast<double>(x.size());
                break;
            case ReduceKind::l2_norm:
                for (double v : x.data()) r += v * v;
                r = std::sqrt(r);
                break;
            case ReduceKind::max:
                r = x[0];
                for (std::size_t i = 1; i < x.size(); ++i)
                    if (x[i] > r) r = x[i], arg = i;
                break;
        }
        return make_op(Tensor::scalar(r), {a.node()}, [kind, x, r, arg](const Tensor& g, std::span<Tensor*> o) {
            Tensor& d = *o[0];
            double gv = g[0];
            switch (kind) {
                case ReduceKind::sum:
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv;
                    break;
                case ReduceKind::mean:
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv / static_cast<double>(d.size());
                    break;
                case ReduceKind::l2_norm:
                    if (r == 0.0) break;  // zero subgradient at the origin
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv * x[i] / r;
                    break;
                case ReduceKind::max: d[arg] += gv; break;
            }
        });
    }

    if (x.rank() != 2 || *axis > 1) {
        throw DimensionError("reduce: axis " + std::to_string(*axis) + " invalid for shape " + shape_string(x.shape()));
    }
    std::size_t n = x.rows(), m = x.cols();
    bool over_rows = *axis == 0;
    std::size_t groups = over_rows ? m : n, len = over_rows ? n : m;
    auto at = [&](std::size_t g, std::size_t t) { return over_rows ? t * m + g : g * m + t; };
    std::vector<double> r(groups, 0.0);
    std::vector<std::size_t> arg(groups, 0);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        double acc = kind == ReduceKind::max ? x[at(gi, 0)] : 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            double v = x[at(gi, t)];
            switch (kind) {
                case ReduceKind::sum:
                case ReduceKind::mean: acc += v; break;
                case ReduceKind::l2_norm: acc += v * v; break;
                case ReduceKind::max:
                    if (v > acc) acc = v, arg[gi] = t;
                    break;
            }
        }
        if (kind == ReduceKind::mean) acc /= static_cast<double>(len);
        if (kind == ReduceKind::l2_norm) acc = std::sqrt(acc);
        r[gi] = acc;
    }
    Shape shape = over_rows ? Shape{1, m} : Shape{n, 1};
    Tensor out(shape, r);
    return make_op(std::move(out), {a.node()},
                   [kind, x, r, arg, over_rows, groups, len, m](const Tensor& g, std::span<Tensor*> o) {
                       Tensor& d = *o[0];
                       auto flat = [&](std::size_t gi, std::size_t t) { return over_rows ? t * m + gi : gi * m + t; };
                       for (std::size_t gi = 0; gi < groups; ++gi) {
                           double gv = g[gi];
                           switch (kind) {
                               case ReduceKind::sum:
                                   for (std::size_t t = 0; t < len; ++t) d[flat(gi, t)] += gv;
                                   break;
                               case ReduceKind::mean:
                                   for (std::size_t t = 0; t < len; ++t) d[flat(gi, t)] += gv / static_cast<double>(len);
                                   break;
                               case ReduceKind::l2_norm:
                                   if (r[gi] == 0.0) break;
                                   for (std::size_t t = 0; t < len; ++t) d[flat(gi, t)] += gv * x[flat(gi, t)] / r[gi];
                                   break;
                               case ReduceKind::max: d[flat(gi, arg[gi])] += gv; break;
                           }
                       }
                   });
}

Var normalize_rows(const Var& a, double eps) {
    const Tensor& x = a.value();
    require_matrix(x, "normalize_rows");
    std::size_t n = x.rows(), m = x.cols();
    std::vector<double> norms(n), v(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += x[i * m + j] * x[i * m + j];
        norms[i] = std::max(std::sqrt(s), eps);
        for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x[i * m + j] / norms[i];
    }
    Tensor out = Tensor::matrix(n, m, std::move(v));
    Tensor y = out;
    return make_op(std::move(out), {a.node()}, [y, norms, n, m, eps](const Tensor& g, std::span<Tensor*> o) {
        Tensor& d = *o[0];
        for (std::size_t i = 0; i < n; ++i) {
            if (norms[i] <= eps) {  // clamped: plain scaling
                for (std::size_t j = 0; j < m; ++j) d[i * m + j] += g[i * m + j] / eps;
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
            for (std::size_t j = 0; j < m; ++j) d[i * m + j] += (g[i * m + j] - dot * y[i * m + j]) / norms[i];
        }
    });
}

Var log_softmax_rows(const Var& a) {
    const Tensor& x = a.value();
    require_matrix(x, "log_softmax_rows");
    std::size_t n = x.rows(), m = x.cols();
    std::vector<double> v(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = x[i * m];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[i * m + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += std::exp(x[i * m + j] - mx);
        double lse = mx + std::log(s);
        for (std::size_t j = 0; j < m; ++j) v[i * m + j] = x[i * m + j] - lse;
    }
    Tensor out = Tensor::matrix(n, m, std::move(v));
    Tensor y = out;
    return make_op(std::move(out), {a.node()}, [y, n, m](const Tensor& g, std::span<Tensor*> o) {
        Tensor& d = *o[0];
        for (std::size_t i = 0; i < n; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
            for (std::size_t j = 0; j < m; ++j) d[i * m + j] += g[i * m + j] - std::exp(y[i * m + j]) * gs;
        }
    });
}

}  // namespace fedcspc::ad
