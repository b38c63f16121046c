#include "mdgd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "mdgd/errors.hpp"

namespace mdgd {

std::vector<std::string> trainable_names(const ParamSet& params) {
  std::vector<std::string> names;
  for (const auto& [name, p] : params)
    if (p.trainable) names.push_back(name);
  return names;
}

// ---------------------------------------------------------------------------
// GradientVector

GradientVector GradientVector::zeros_like(const ParamSet& params) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, p] : params)
    if (p.trainable) out.emplace(name, Tensor(p.value.shape()));
  return GradientVector(std::move(out));
}

GradientVector GradientVector::zeros_like(const GradientVector& other) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : other.entries_) out.emplace(name, Tensor(t.shape()));
  return GradientVector(std::move(out));
}

const Tensor& GradientVector::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("gradient vector has no entry '" + name + "'");
  return it->second;
}

Tensor& GradientVector::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("gradient vector has no entry '" + name + "'");
  return it->second;
}

std::size_t GradientVector::numel() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

std::vector<std::string> GradientVector::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<double> GradientVector::flatten() const {
  std::vector<double> flat;
  flat.reserve(numel());
  for (const auto& [_, t] : entries_) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

GradientVector GradientVector::unflatten(std::span<const double> flat,
                                         const GradientVector& layout) {
  if (flat.size() != layout.numel()) {
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for layout of " +
                         std::to_string(layout.numel()));
  }
  std::map<std::string, Tensor> out;
  std::size_t offset = 0;
  for (const auto& [name, t] : layout.entries_) {
    std::vector<double> data(flat.begin() + offset, flat.begin() + offset + t.size());
    offset += t.size();
    out.emplace(name, Tensor(t.shape(), std::move(data)));
  }
  return GradientVector(std::move(out));
}

void require_same_keys(const GradientVector& a, const GradientVector& b, const char* what) {
  bool same = a.size() == b.size();
  if (same) {
    auto ia = a.entries().begin();
    for (auto ib = b.entries().begin(); ib != b.entries().end(); ++ia, ++ib) {
      if (ia->first != ib->first) {
        same = false;
        break;
      }
    }
  }
  if (same) {
    for (const auto& [name, t] : a.entries()) {
      if (t.shape() != b.at(name).shape()) {
        throw DimensionError(std::string(what) + ": entry '" + name + "' has shapes " +
                             shape_string(t.shape()) + " and " +
                             shape_string(b.at(name).shape()));
      }
    }
    return;
  }
  std::ostringstream os;
  os << what << ": key sets differ; symmetric difference {";
  bool first = true;
  for (const auto& [name, _] : a.entries()) {
    if (!b.contains(name)) {
      os << (first ? "" : ", ") << name;
      first = false;
    }
  }
  for (const auto& [name, _] : b.entries()) {
    if (!a.contains(name)) {
      os << (first ? "" : ", ") << name;
      first = false;
    }
  }
  os << '}';
  throw ContractError(os.str());
}

double gv_dot(const GradientVector& a, const GradientVector& b) {
  require_same_keys(a, b, "gv_dot");
  double s = 0.0;
  for (const auto& [name, t] : a.entries()) s += dot(t.data(), b.at(name).data());
  return s;
}

double gv_norm(const GradientVector& a) {
  double s = 0.0;
  for (const auto& [_, t] : a.entries()) s += dot(t.data(), t.data());
  return std::sqrt(s);
}

GradientVector gv_axpy(const GradientVector& a, double c, const GradientVector& b) {
  require_same_keys(a, b, "gv_axpy");
  GradientVector out = a;
  for (auto& [name, t] : out.entries()) {
    const auto& bv = b.at(name).values();
    auto& ov = t.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += c * bv[i];
  }
  return out;
}

GradientVector gv_scale(const GradientVector& a, double c) {
  GradientVector out = a;
  for (auto& [_, t] : out.entries())
    for (auto& v : t.values()) v *= c;
  return out;
}

double gv_cosine(const GradientVector& a, const GradientVector& b) {
  const double na = gv_norm(a), nb = gv_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return gv_dot(a, b) / (na * nb);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->node(id_).value; }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = params_.find(p.name); it != params_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.param_name = p.name;
  nodes_.push_back(std::move(n));
  params_.emplace(p.name, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

void Tape::bind_all(const ParamSet& params) {
  for (const auto& [_, p] : params) parameter(p);
}

Var Tape::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("parameter '" + name + "' not bound on tape");
  return Var(const_cast<Tape*>(this), it->second);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs,
                 std::function<void(Tape&, std::size_t)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad =
      std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
    n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  auto& bv = buf.values();
  const auto& gv = g.values();
  for (std::size_t i = 0; i < bv.size(); ++i) bv[i] += gv[i];
}

GradientVector Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: loss belongs to a different tape");
  if (used_) throw UsageError("backward: tape already consumed by a previous backward pass");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_string(loss.value().shape()));
  }
  used_ = true;
  const std::size_t root = loss.id();
  if (nodes_[root].requires_grad) {
    grad_buffer(root)[0] = 1.0;
    for (std::size_t id = root + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, id);
    }
  }
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : params_) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    out.emplace(name, n.grad.size() == n.value.size() && n.grad.shape() == n.value.shape()
                          ? n.grad
                          : Tensor(n.value.shape()));
  }
  return GradientVector(std::move(out));
}

// ---------------------------------------------------------------------------
// Differentiable operations

namespace ag {

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw UsageError("operands recorded on different tapes");
  return *a.tape();
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(mdgd::matmul(a.value(), b.value()), {a.id(), b.id()},
                  [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    if (tp.needs_grad(ia)) tp.accumulate(ia, matmul_nt(g, tp.node(ib).value));
                    if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(tp.node(ia).value, g));
                  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(mdgd::add(a.value(), b.value()), {a.id(), b.id()},
                  [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, g);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(mdgd::sub(a.value(), b.value()), {a.id(), b.id()},
                  [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    tp.accumulate(ia, g);
                    tp.accumulate(ib, mdgd::scale(g, -1.0));
                  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(mdgd::mul(a.value(), b.value()), {a.id(), b.id()},
                  [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    if (tp.needs_grad(ia)) tp.accumulate(ia, mdgd::mul(g, tp.node(ib).value));
                    if (tp.needs_grad(ib)) tp.accumulate(ib, mdgd::mul(g, tp.node(ia).value));
                  });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape();
  return t.record(mdgd::scale(a.value(), c), {a.id()}, [ia = a.id(), c](Tape& tp, std::size_t self) {
    tp.accumulate(ia, mdgd::scale(tp.node(self).grad, c));
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.size() != xv.dim(1)) {
    throw DimensionError("add_bias: " + shape_string(xv.shape()) + " + " +
                         shape_string(bv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) += bv[j];
  return t.record(std::move(out), {x.id(), bias.id()},
                  [ix = x.id(), ib = bias.id(), n, d](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    tp.accumulate(ix, g);
                    if (tp.needs_grad(ib)) {
                      Tensor& gb = tp.grad_buffer(ib);
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < d; ++j) gb[j] += g.at(i, j);
                    }
                  });
}

Var gelu(Var x) {
  Tape& t = *x.tape();
  Tensor out = x.value();
  for (auto& v : out.values()) {
    const double u = kGeluC * (v + 0.044715 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return t.record(std::move(out), {x.id()}, [ix = x.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& xv = tp.node(ix).value;
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double u = kGeluC * (v + 0.044715 * v * v * v);
      const double th = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      dx[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
    tp.accumulate(ix, dx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || gain.value().size() != xv.dim(1) || bias.value().size() != xv.dim(1)) {
    throw DimensionError("layer_norm: input " + shape_string(xv.shape()) + ", gain " +
                         shape_string(gain.value().shape()));
  }
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor xhat({n, d});
  std::vector<double> rstd(n);
  Tensor out({n, d});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv.at(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv.at(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(i, j) = (xv.at(i, j) - mu) * rstd[i];
      out.at(i, j) = xhat.at(i, j) * gv[j] + bv[j];
    }
  }
  return t.record(
      std::move(out), {x.id(), gain.id(), bias.id()},
      [ix = x.id(), ig = gain.id(), ib = bias.id(), xhat = std::move(xhat), rstd = std::move(rstd),
       n, d](Tape& tp, std::size_t self) {
        const Tensor& g = tp.node(self).grad;
        const Tensor& gv = tp.node(ig).value;
        if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
          Tensor dg({d}), db({d});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += g.at(i, j) * xhat.at(i, j);
              db[j] += g.at(i, j);
            }
          tp.accumulate(ig, dg.reshaped(gv.shape()));
          tp.accumulate(ib, db.reshaped(tp.node(ib).value.shape()));
        }
        if (tp.needs_grad(ix)) {
          Tensor dx({n, d});
          std::vector<double> dxhat(d);
          for (std::size_t i = 0; i < n; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = g.at(i, j) * gv[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat.at(i, j);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
              dx.at(i, j) = rstd[i] * (dxhat[j] - m1 - xhat.at(i, j) * m2);
          }
          tp.accumulate(ix, dx);
        }
      });
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("gather_rows: expected matrix, got " + shape_string(xv.shape()));
  const std::size_t d = xv.dim(1);
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.dim(0)) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy_n(xv.data().data() + rows[i] * d, d, out.data().data() + i * d);
  }
  return t.record(std::move(out), {x.id()},
                  [ix = x.id(), rows = std::move(rows), d](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(ix)) return;
                    const Tensor& g = tp.node(self).grad;
                    Tensor& gx = tp.grad_buffer(ix);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t j = 0; j < d; ++j) gx.at(rows[i], j) += g.at(i, j);
                  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& t = *parts.front().tape();
  const std::size_t d = parts.front().value().dim(1);
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw UsageError("concat_rows: operands on different tapes");
    if (p.value().rank() != 2 || p.value().dim(1) != d) {
      throw DimensionError("concat_rows: column mismatch at " + shape_string(p.value().shape()));
    }
    ids.push_back(p.id());
    offsets.push_back(n);
    n += p.value().dim(0);
  }
  Tensor out({n, d});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().values();
    std::copy(src.begin(), src.end(), out.values().begin() + offsets[k] * d);
  }
  return t.record(std::move(out), ids, [ids, offsets, d](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.needs_grad(ids[k])) continue;
      Tensor& gk = tp.grad_buffer(ids[k]);
      const double* src = g.data().data() + offsets[k] * d;
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += src[i];
    }
  });
}

Var sum(Var x) {
  Tape& t = *x.tape();
  return t.record(Tensor::scalar(mdgd::sum(x.value())), {x.id()}, [ix = x.id()](Tape& tp, std::size_t self) {
    tp.accumulate(ix, Tensor(tp.node(ix).value.shape(), tp.node(self).grad[0]));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var sum_squares(Var x) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  return t.record(Tensor::scalar(dot(xv.data(), xv.data())), {x.id()},
                  [ix = x.id()](Tape& tp, std::size_t self) {
                    tp.accumulate(ix, mdgd::scale(tp.node(ix).value, 2.0 * tp.node(self).grad[0]));
                  });
}

Var causal_attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = q.value();
  const std::size_t B = layout.batch, S = layout.seq, H = layout.heads;
  if (qv.rank() != 2 || qv.dim(0) != B * S || k.value().shape() != qv.shape() ||
      v.value().shape() != qv.shape() || layout.key_valid.size() != B * S || H == 0 ||
      qv.dim(1) % H != 0) {
    throw DimensionError("causal_attention: q " + shape_string(qv.shape()) + " for batch " +
                         std::to_string(B) + ", seq " + std::to_string(S) + ", heads " +
                         std::to_string(H));
  }
  const std::size_t D = qv.dim(1), dh = D / H;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  // probs[b][h][i][j], zero where masked.
  std::vector<double> probs(B * H * S * S, 0.0);
  Tensor out({B * S, D});
  std::vector<double> scores(S);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        const double* qi = qv.data().data() + (b * S + i) * D + c0;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (!layout.key_valid[b * S + j]) continue;
          const double* kj = kv.data().data() + (b * S + j) * D + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_scale;
          mx = std::max(mx, scores[j]);
        }
        double* p = probs.data() + ((b * H + h) * S + i) * S;
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // nothing visible
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!layout.key_valid[b * S + j]) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        double* oi = out.data().data() + (b * S + i) * D + c0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (p[j] == 0.0) continue;
          p[j] /= total;
          const double* vj = vv.data().data() + (b * S + j) * D + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return t.record(
      std::move(out), {q.id(), k.id(), v.id()},
      [iq = q.id(), ik = k.id(), iv = v.id(), probs = std::move(probs), B, S, H, D, dh,
       inv_scale](Tape& tp, std::size_t self) {
        const Tensor& g = tp.node(self).grad;
        const Tensor& qv = tp.node(iq).value;
        const Tensor& kv = tp.node(ik).value;
        const Tensor& vv = tp.node(iv).value;
        Tensor dq({B * S, D}), dk({B * S, D}), dv({B * S, D});
        std::vector<double> dp(S);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < S; ++i) {
              const double* p = probs.data() + ((b * H + h) * S + i) * S;
              const double* gi = g.data().data() + (b * S + i) * D + c0;
              double weighted = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = vv.data().data() + (b * S + j) * D + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                weighted += p[j] * s;
                double* dvj = dv.data().data() + (b * S + j) * D + c0;
                for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
              }
              const double* qi = qv.data().data() + (b * S + i) * D + c0;
              double* dqi = dq.data().data() + (b * S + i) * D + c0;
              for (std::size_t j = 0; j <= i; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - weighted) * inv_scale;
                const double* kj = kv.data().data() + (b * S + j) * D + c0;
                double* dkj = dk.data().data() + (b * S + j) * D + c0;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += ds * kj[c];
                  dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        tp.accumulate(iq, dq);
        tp.accumulate(ik, dk);
        tp.accumulate(iv, dv);
      });
}

Var cross_entropy(Var logits, const std::vector<std::size_t>& targets,
                  const std::vector<double>& weights) {
  Tape& t = *logits.tape();
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || targets.size() != lv.dim(0) || weights.size() != lv.dim(0)) {
    throw DimensionError("cross_entropy: logits " + shape_string(lv.shape()) + " with " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t V = lv.dim(1);
  Tensor probs = softmax_rows(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (weights[r] == 0.0) continue;
    if (targets[r] >= V) throw DimensionError("cross_entropy: target id out of vocabulary");
    // log-softmax evaluated directly for accuracy at small probabilities.
    const double* row = lv.data().data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double total = 0.0;
    for (std::size_t j = 0; j < V; ++j) total += std::exp(row[j] - mx);
    loss += weights[r] * (std::log(total) - (row[targets[r]] - mx));
  }
  return t.record(Tensor::scalar(loss), {logits.id()},
                  [il = logits.id(), probs = std::move(probs), targets, weights, V](Tape& tp,
                                                                                    std::size_t self) {
                    const double g = tp.node(self).grad[0];
                    Tensor dl(probs.shape());
                    for (std::size_t r = 0; r < targets.size(); ++r) {
                      if (weights[r] == 0.0) continue;
                      const double w = g * weights[r];
                      for (std::size_t j = 0; j < V; ++j) dl.at(r, j) = w * probs.at(r, j);
                      dl.at(r, targets[r]) -= w;
                    }
                    tp.accumulate(il, dl);
                  });
}

Var l1_distance(Var x, const Tensor& c, L1Norm norm) {
  Tape& t = *x.tape();
  require_same_shape(x.value(), c, "l1_distance");
  const double factor = norm == L1Norm::kMean ? 1.0 / static_cast<double>(c.size()) : 1.0;
  Tensor diff_sign = sign(mdgd::sub(x.value(), c));
  double total = 0.0;
  const auto& xv = x.value().values();
  for (std::size_t i = 0; i < xv.size(); ++i) total += std::fabs(xv[i] - c[i]);
  return t.record(Tensor::scalar(total * factor), {x.id()},
                  [ix = x.id(), diff_sign = std::move(diff_sign), factor](Tape& tp, std::size_t self) {
                    tp.accumulate(ix, mdgd::scale(diff_sign, factor * tp.node(self).grad[0]));
                  });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Gradient checking

GradientVector gradient_of(const LossBuilder& build_loss, const ParamSet& params) {
  Tape tape;
  tape.bind_all(params);
  Var loss = build_loss(tape, params);
  return tape.backward(loss);
}

double loss_value(const LossBuilder& build_loss, const ParamSet& params) {
  Tape tape;
  tape.bind_all(params);
  return build_loss(tape, params).value().item();
}

FdReport finite_difference_report(const LossBuilder& build_loss, const ParamSet& params, double h) {
  if (!(h >= 1e-7 && h <= 1e-4)) {
    throw ContractError("finite_difference_check: step " + std::to_string(h) +
                        " outside [1e-7, 1e-4]");
  }
  const GradientVector ad = gradient_of(build_loss, params);
  ParamSet probe = params;
  FdReport report;
  for (const auto& [name, grad] : ad.entries()) {
    Tensor& value = probe.at(name).value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss_value(build_loss, probe);
      value[i] = saved - h;
      const double down = loss_value(build_loss, probe);
      value[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double a = grad[i];
      if (!std::isfinite(fd) || !std::isfinite(a)) {
        throw NumericError("finite_difference_check: non-finite value at " + name + "[" +
                           std::to_string(i) + "]");
      }
      const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-8});
      const double rel = std::fabs(a - fd) / denom;
      report.max_abs_error = std::max(report.max_abs_error, std::fabs(a - fd));
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_name = name;
        report.worst_index = i;
        report.worst_ad = a;
        report.worst_fd = fd;
      }
    }
  }
  return report;
}

double finite_difference_check(const LossBuilder& build_loss, const ParamSet& params, double h) {
  return finite_difference_report(build_loss, params, h).max_rel_error;
}

}  // namespace mdgd
