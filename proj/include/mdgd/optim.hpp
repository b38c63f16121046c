#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mdgd/autograd.hpp"
#include "mdgd/model.hpp"
#include "mdgd/synth.hpp"

namespace mdgd {

enum class Method { kFinetune, kFinetuneAlign, kMdgd, kMdgdNoAlign, kMdgdGm };
enum class MaskGranularity { kBlock, kElement };

const char* method_name(Method m);
Method parse_method(const std::string& s);  // throws ConfigError
const char* granularity_name(MaskGranularity g);
MaskGranularity parse_granularity(const std::string& s);

struct MdgdConfig {
  double eta = 0.1;
  Method method = Method::kMdgd;
  double alpha = 0.1;
  MaskGranularity mask_granularity = MaskGranularity::kBlock;
  double eps_proj = 1e-12;
  ag::L1Norm lv_normalization = ag::L1Norm::kMean;
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;  // minibatch shuffling

  void validate() const;
  friend bool operator==(const MdgdConfig&, const MdgdConfig&) = default;
};

struct StepDiagnostics {
  std::size_t step = 0;
  double loss_vl_theta = 0.0;
  std::optional<double> loss_vl_phi;
  std::optional<double> loss_v;
  std::vector<double> block_cosines;  // per trainable block, name order
  std::optional<double> mean_cosine;
  std::optional<double> g_tilde_norm;
  std::optional<double> mask_fraction;
  double grad_norm_task = 0.0;
  std::optional<double> grad_norm_align;
  double update_norm = 0.0;
};

// Gradients of the alignment loss for both models: the theta tape treats the
// pre-trained states as constants and vice versa.
struct DriftGradients {
  double loss_v = 0.0;
  GradientVector h_phi;
  GradientVector h_theta;
};

// L1 distance between the two models' final-layer visual states over a batch,
// as a differentiable node on `tape` for the model bound there; `other` is the
// fixed counterpart [B, M, d_model].
Var visual_alignment_loss(Tape& tape, const ModelConfig& config, const Tensor& image_feats,
                          const Tensor& other_states, ag::L1Norm norm);
double visual_alignment_loss_value(const ParamSet& phi, const ParamSet& theta,
                                   const ModelConfig& config, const Tensor& image_feats,
                                   ag::L1Norm norm);

DriftGradients drift_gradients(const ParamSet& phi, const ParamSet& theta, const ModelConfig& config,
                               const Tensor& image_feats, ag::L1Norm norm);

// g - (g.h / |h|^2) h, or g itself when |h|^2 < eps_proj.
GradientVector orthogonalize(const GradientVector& g, const GradientVector& h, double eps_proj);
// (g_theta.g_phi / |g_phi|^2) g_phi, or zero when |g_phi|^2 < eps_proj.
GradientVector project_onto(const GradientVector& g_bar_theta, const GradientVector& g_bar_phi,
                            double eps_proj);

struct StepGradients {
  GradientVector task;                   // grad of L_vl at theta
  std::optional<GradientVector> align;   // grad of L_v at theta
  std::optional<GradientVector> g_tilde;
};

// theta <- theta - eta * (task + align + g_tilde), keeping only the terms the
// method uses.
void mdgd_step(ParamSet& theta, const StepGradients& grads, double eta, Method method);

// Binary mask over the trainable coordinates, one tensor per block.
struct GradientMask {
  GradientVector mask;                 // entries in {0, 1}
  std::vector<std::string> selected;   // blocks with any selected coordinate
  std::vector<double> block_scores;    // cosine per block, name order (block mode)
  std::size_t selected_units = 0;      // blocks (block mode) or coordinates
  std::size_t total_units = 0;
  double fraction() const {
    return total_units ? static_cast<double>(selected_units) / static_cast<double>(total_units) : 0.0;
  }
};

// Per-block cosine, -infinity for blocks where either side has zero norm.
std::vector<double> block_cosines(const GradientVector& a, const GradientVector& b);

// Keeps the ceil(alpha * units) highest scoring units. Ties go to the
// lexicographically smaller block name, then the smaller coordinate.
GradientMask gradient_mask(const GradientVector& g_bar_theta, const GradientVector& g_bar_phi,
                           double alpha, MaskGranularity granularity);

// theta <- theta - eta * mask (.) (task + align). Unmasked coordinates are not
// written.
void mdgd_gm_step(ParamSet& theta, const GradientVector& task, const GradientVector* align,
                  const GradientMask& mask, double eta);

struct TrainResult {
  ParamSet theta;
  std::vector<StepDiagnostics> log;
};

// Callback invoked after each step; may be empty.
using StepObserver = std::function<void(const StepDiagnostics&)>;

// Fine-tunes a copy of phi on the dataset. phi keeps its trainable flags and
// is only read.
TrainResult train_loop(const ParamSet& phi, const ModelConfig& model, const Dataset& data,
                       const MdgdConfig& config, const StepObserver& observer = {});

// Minibatch index schedule: fresh seeded shuffle every epoch.
class MinibatchSchedule {
 public:
  MinibatchSchedule(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  void reshuffle();
  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mdgd
