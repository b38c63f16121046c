#include "mdgd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mdgd/errors.hpp"

namespace mdgd {

const char* method_name(Method m) {
  switch (m) {
    case Method::kFinetune: return "finetune";
    case Method::kFinetuneAlign: return "finetune_align";
    case Method::kMdgd: return "mdgd";
    case Method::kMdgdNoAlign: return "mdgd_noalign";
    case Method::kMdgdGm: return "mdgd_gm";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::kFinetune, Method::kFinetuneAlign, Method::kMdgd, Method::kMdgdNoAlign,
                   Method::kMdgdGm})
    if (s == method_name(m)) return m;
  throw ConfigError("finetune.method: unknown method '" + s + "'");
}

const char* granularity_name(MaskGranularity g) {
  return g == MaskGranularity::kBlock ? "block" : "element";
}

MaskGranularity parse_granularity(const std::string& s) {
  if (s == "block") return MaskGranularity::kBlock;
  if (s == "element") return MaskGranularity::kElement;
  throw ConfigError("finetune.mask_granularity: unknown granularity '" + s + "'");
}

void MdgdConfig::validate() const {
  if (!(eta > 0.0)) throw ConfigError("finetune.eta: must be positive");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("finetune.alpha: must lie in (0, 1]");
  if (!(eps_proj >= 0.0)) throw ConfigError("finetune.eps_proj: must be non-negative");
  if (batch_size == 0) throw ConfigError("finetune.batch_size: must be positive");
}

// ---------------------------------------------------------------------------
// Alignment loss and drift gradients

Var visual_alignment_loss(Tape& tape, const ModelConfig& config, const Tensor& image_feats,
                          const Tensor& other_states, ag::L1Norm norm) {
  Var states = visual_states(tape, config, image_feats);
  return ag::l1_distance(states, other_states.reshaped(states.value().shape()), norm);
}

double visual_alignment_loss_value(const ParamSet& phi, const ParamSet& theta,
                                   const ModelConfig& config, const Tensor& image_feats,
                                   ag::L1Norm norm) {
  const Tensor mu = visual_states(phi, config, image_feats);
  const Tensor pi = visual_states(theta, config, image_feats);
  const double total = sum(abs(sub(mu, pi)));
  return norm == ag::L1Norm::kMean ? total / static_cast<double>(mu.size()) : total;
}

DriftGradients drift_gradients(const ParamSet& phi, const ParamSet& theta, const ModelConfig& config,
                               const Tensor& image_feats, ag::L1Norm norm) {
  const Tensor mu = visual_states(phi, config, image_feats);
  const Tensor pi = visual_states(theta, config, image_feats);
  DriftGradients out;
  {
    Tape tape;
    tape.bind_all(phi);
    Var loss = visual_alignment_loss(tape, config, image_feats, pi, norm);
    out.loss_v = loss.value().item();
    out.h_phi = tape.backward(loss);
  }
  {
    Tape tape;
    tape.bind_all(theta);
    Var loss = visual_alignment_loss(tape, config, image_feats, mu, norm);
    out.h_theta = tape.backward(loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projections

GradientVector orthogonalize(const GradientVector& g, const GradientVector& h, double eps_proj) {
  require_same_keys(g, h, "orthogonalize");
  const double hh = gv_dot(h, h);
  if (hh < eps_proj || hh == 0.0) return g;
  // A second pass removes what cancellation left behind when g is nearly
  // parallel to h; in exact arithmetic its coefficient is zero.
  const GradientVector once = gv_axpy(g, -gv_dot(g, h) / hh, h);
  return gv_axpy(once, -gv_dot(once, h) / hh, h);
}

GradientVector project_onto(const GradientVector& g_bar_theta, const GradientVector& g_bar_phi,
                            double eps_proj) {
  require_same_keys(g_bar_theta, g_bar_phi, "project_onto");
  const double pp = gv_dot(g_bar_phi, g_bar_phi);
  if (pp < eps_proj || pp == 0.0) return GradientVector::zeros_like(g_bar_phi);
  return gv_scale(g_bar_phi, gv_dot(g_bar_theta, g_bar_phi) / pp);
}

// ---------------------------------------------------------------------------
// Updates

void mdgd_step(ParamSet& theta, const StepGradients& grads, double eta, Method method) {
  const bool use_align = method == Method::kFinetuneAlign || method == Method::kMdgd ||
                         method == Method::kMdgdGm;
  const bool use_tilde = method == Method::kMdgd || method == Method::kMdgdNoAlign;
  if (use_align && !grads.align) throw ContractError("mdgd_step: method needs the alignment gradient");
  if (use_tilde && !grads.g_tilde) throw ContractError("mdgd_step: method needs the projected gradient");
  if (use_align) require_same_keys(grads.task, *grads.align, "mdgd_step");
  if (use_tilde) require_same_keys(grads.task, *grads.g_tilde, "mdgd_step");

  for (const auto& [name, g] : grads.task.entries()) {
    auto it = theta.find(name);
    if (it == theta.end() || !it->second.trainable) {
      throw ContractError("mdgd_step: '" + name + "' is not a trainable parameter of theta");
    }
    auto& w = it->second.value.values();
    const auto& gt = g.values();
    const double* ga = use_align ? grads.align->at(name).data().data() : nullptr;
    const double* gp = use_tilde ? grads.g_tilde->at(name).data().data() : nullptr;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double total = gt[i];
      if (ga) total += ga[i];
      if (gp) total += gp[i];
      w[i] -= eta * total;
    }
  }
}

std::vector<double> block_cosines(const GradientVector& a, const GradientVector& b) {
  require_same_keys(a, b, "block_cosines");
  std::vector<double> out;
  for (const auto& [name, ta] : a.entries()) {
    const Tensor& tb = b.at(name);
    const double aa = dot(ta.data(), ta.data()), bb = dot(tb.data(), tb.data());
    if (aa == 0.0 || bb == 0.0) {
      out.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    // One square root of the product: identical blocks score exactly 1.
    out.push_back(std::clamp(dot(ta.data(), tb.data()) / std::sqrt(aa * bb), -1.0, 1.0));
  }
  return out;
}

namespace {

// ceil(alpha * units), guarding against products like 0.1 * 30 landing a
// rounding error above an integer.
std::size_t quota(double alpha, std::size_t units) {
  const double exact = alpha * static_cast<double>(units);
  const double nearest = std::round(exact);
  const double k = std::fabs(exact - nearest) <= 1e-9 * std::max(1.0, exact) ? nearest : std::ceil(exact);
  return std::min(units, static_cast<std::size_t>(std::max(0.0, k)));
}

}  // namespace

GradientMask gradient_mask(const GradientVector& g_bar_theta, const GradientVector& g_bar_phi,
                           double alpha, MaskGranularity granularity) {
  require_same_keys(g_bar_theta, g_bar_phi, "gradient_mask");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("gradient_mask: alpha must lie in (0, 1]");
  GradientMask out;
  out.mask = GradientVector::zeros_like(g_bar_theta);
  const auto names = g_bar_theta.names();

  if (granularity == MaskGranularity::kBlock) {
    out.block_scores = block_cosines(g_bar_theta, g_bar_phi);
    out.total_units = names.size();
    std::vector<std::size_t> order(names.size());
    std::iota(order.begin(), order.end(), 0);
    // Names are already sorted, so a stable sort by descending score breaks
    // ties lexicographically.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return out.block_scores[x] > out.block_scores[y];
    });
    const bool any_finite = std::any_of(out.block_scores.begin(), out.block_scores.end(),
                                        [](double s) { return std::isfinite(s); });
    if (!any_finite) throw ContractError("gradient_mask: every block has a zero gradient");
    const std::size_t k = quota(alpha, names.size());
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t i = order[r];
      if (!std::isfinite(out.block_scores[i])) break;
      for (auto& v : out.mask.at(names[i]).values()) v = 1.0;
      out.selected.push_back(names[i]);
      ++out.selected_units;
    }
    std::sort(out.selected.begin(), out.selected.end());
    return out;
  }

  const double nt = gv_norm(g_bar_theta), np = gv_norm(g_bar_phi);
  if (nt == 0.0 || np == 0.0) throw ContractError("gradient_mask: zero gradient vector");
  const std::vector<double> a = g_bar_theta.flatten();
  const std::vector<double> b = g_bar_phi.flatten();
  std::vector<double> score(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) score[i] = a[i] * b[i] / (nt * np);
  std::vector<std::size_t> order(a.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });
  const std::size_t k = quota(alpha, a.size());
  std::vector<double> flat(a.size(), 0.0);
  for (std::size_t r = 0; r < k; ++r) flat[order[r]] = 1.0;
  out.mask = GradientVector::unflatten(flat, g_bar_theta);
  out.total_units = a.size();
  out.selected_units = k;
  for (const auto& [name, t] : out.mask.entries())
    if (std::any_of(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; }))
      out.selected.push_back(name);
  return out;
}

void mdgd_gm_step(ParamSet& theta, const GradientVector& task, const GradientVector* align,
                  const GradientMask& mask, double eta) {
  require_same_keys(task, mask.mask, "mdgd_gm_step");
  if (align) require_same_keys(task, *align, "mdgd_gm_step");
  for (const auto& [name, m] : mask.mask.entries()) {
    auto it = theta.find(name);
    if (it == theta.end() || !it->second.trainable) {
      throw ContractError("mdgd_gm_step: '" + name + "' is not a trainable parameter of theta");
    }
    auto& w = it->second.value.values();
    const auto& gt = task.at(name).values();
    const double* ga = align ? align->at(name).data().data() : nullptr;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (m[i] == 0.0) continue;
      w[i] -= eta * m[i] * (gt[i] + (ga ? ga[i] : 0.0));
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

MinibatchSchedule::MinibatchSchedule(std::size_t dataset_size, std::size_t batch_size,
                                     std::uint64_t seed)
    : n_(dataset_size), batch_(std::min(batch_size, dataset_size)), rng_(seed) {
  if (n_ == 0) throw ContractError("minibatch schedule over an empty dataset");
  order_.resize(n_);
  reshuffle();
}

void MinibatchSchedule::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  // Fisher-Yates driven by the portable stream.
  for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
  cursor_ = 0;
}

std::vector<std::size_t> MinibatchSchedule::next() {
  if (cursor_ + batch_ > n_) reshuffle();
  std::vector<std::size_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
  cursor_ += batch_;
  return out;
}

namespace {

struct LossAndGrad {
  double loss;
  GradientVector grad;
};

LossAndGrad task_gradient(const ParamSet& params, const ModelConfig& model, const Batch& batch) {
  Tape tape;
  tape.bind_all(params);
  Var loss = task_loss(tape, model, batch);
  const double value = loss.value().item();
  return {value, tape.backward(loss)};
}

double update_norm(const ParamSet& before, const ParamSet& after) {
  double s = 0.0;
  for (const auto& [name, p] : after) {
    const auto& a = p.value.values();
    const auto& b = before.at(name).value.values();
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return std::sqrt(s);
}

double finite_mean(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace

TrainResult train_loop(const ParamSet& phi, const ModelConfig& model, const Dataset& data,
                       const MdgdConfig& config, const StepObserver& observer) {
  config.validate();
  if (data.samples.empty()) throw ContractError("train_loop: empty dataset");
  TrainResult result;
  result.theta = phi;  // Initialize pi_theta <- mu_phi
  MinibatchSchedule schedule(data.samples.size(), config.batch_size, config.seed);

  const bool decoupled = config.method == Method::kMdgd || config.method == Method::kMdgdNoAlign ||
                         config.method == Method::kMdgdGm;
  const bool needs_align = decoupled || config.method == Method::kFinetuneAlign;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const Batch batch = make_batch(data, schedule.next());
    StepDiagnostics diag;
    diag.step = step;
    const ParamSet before = result.theta;

    StepGradients grads;
    LossAndGrad theta_task = task_gradient(result.theta, model, batch);
    diag.loss_vl_theta = theta_task.loss;
    diag.grad_norm_task = gv_norm(theta_task.grad);
    grads.task = std::move(theta_task.grad);

    if (needs_align) {
      DriftGradients drift =
          drift_gradients(phi, result.theta, model, batch.image_feats, config.lv_normalization);
      diag.loss_v = drift.loss_v;
      diag.grad_norm_align = gv_norm(drift.h_theta);

      if (decoupled) {
        LossAndGrad phi_task = task_gradient(phi, model, batch);
        diag.loss_vl_phi = phi_task.loss;
        const GradientVector g_bar_phi = orthogonalize(phi_task.grad, drift.h_phi, config.eps_proj);
        const GradientVector g_bar_theta = orthogonalize(grads.task, drift.h_theta, config.eps_proj);
        diag.block_cosines = block_cosines(g_bar_theta, g_bar_phi);
        diag.mean_cosine = finite_mean(diag.block_cosines);

        if (config.method == Method::kMdgdGm) {
          const GradientMask mask =
              gradient_mask(g_bar_theta, g_bar_phi, config.alpha, config.mask_granularity);
          diag.mask_fraction = mask.fraction();
          mdgd_gm_step(result.theta, grads.task, &drift.h_theta, mask, config.eta);
        } else {
          grads.g_tilde = project_onto(g_bar_theta, g_bar_phi, config.eps_proj);
          diag.g_tilde_norm = gv_norm(*grads.g_tilde);
        }
      }
      // h_theta is exactly the gradient of L_v with respect to theta.
      grads.align = std::move(drift.h_theta);
    }

    if (config.method != Method::kMdgdGm) mdgd_step(result.theta, grads, config.eta, config.method);
    diag.update_norm = update_norm(before, result.theta);
    if (observer) observer(diag);
    result.log.push_back(std::move(diag));
  }
  return result;
}

}  // namespace mdgd
