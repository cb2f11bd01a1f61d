#pragma once

#include <functional>
#include <optional>

#include "cclseg/centroids.hpp"
#include "cclseg/contrastive.hpp"
#include "cclseg/io.hpp"
#include "cclseg/metrics.hpp"
#include "cclseg/segnet.hpp"
#include "cclseg/style.hpp"
#include "cclseg/synth.hpp"

// Orchestration: two-phase training (warm-up with the style latent frozen,
// then adversarial-epsilon main phase), the total loss
//   L = L_RAIN + L_Seg + lambda_contrast * L_p_contrast + lambda_CNR * sum_p R(C_p^t),
// EMA memory bank maintenance, checkpointing, and evaluation.

namespace cclseg {

using Real = double;

struct TrainConfig {
  std::string corpus_dir = "corpus";
  std::string out_dir = "runs/default";
  std::string style_checkpoint;
  std::string mode = "oneshot";  // oneshot | fewshot | full
  int fold = 0;
  uint64_t seed = 1;

  // ablation lattice: FUDA -> +CCL -> +CNR -> +MPCCL
  bool use_style = true;
  bool use_ccl = true;
  bool use_cnr = true;
  bool use_mpccl = true;
  bool epsilon_on = true;

  int warmup_epochs = 20;  // desk-scale smoke budget
  int main_epochs = 20;
  double lr_warmup = 5e-4;
  double lr_main = 2.5e-4;
  double poly_power = 0.9;
  double sgd_momentum = 0.9;
  int source_bs = 8;
  int target_bs = 1;

  double lambda_contrast = 1.0;
  double lambda_cnr = 0.5;
  double rho = 0.9;
  double tau = 0.1;
  int partitions = 4;

  bool detach_pseudo_label = false;
  bool ema_rho_weights_fresh = true;
  bool include_positive_in_denominator = false;
  bool epsilon_descent = false;
  double epsilon_eta = 1.0;

  int style_pretrain_epochs = 12;
  double style_lr = 2e-3;

  int stop_after_epoch = -1;  // checkpoint and halt after this epoch (resume tests)
  bool paper_profile = false; // batch 32, 200+200 epochs

  void resolve();  // applies paper_profile, validates
  uint64_t content_hash() const;

  io::Manifest to_manifest() const;
  static TrainConfig from_manifest(const io::Manifest& m);
  static TrainConfig load(const std::string& path, bool apply_env_overrides = true);
  void apply_env();  // CCLSEG_<UPPER_KEY> overrides
};

struct LossBundle {
  double seg_src = 0, seg_styl = 0, seg = 0;
  double contrast = 0, cnr_term = 0;
  double rain_c = 0, rain_s = 0, rain_kl = 0, rain_rec = 0, rain_total = 0;
  double total = 0;
  std::string str() const;
};

struct StylePretrainResult {
  double first_epoch_loss = 0;
  double last_epoch_loss = 0;
  std::string checkpoint_dir;
};

// Trains the style module on a pool that must not contain target samples.
StylePretrainResult pretrain_style(const std::vector<Sample>& corpus,
                                   const TrainConfig& cfg);
StylePretrainResult pretrain_style_on_pool(const std::vector<Sample>& corpus,
                                           const std::vector<size_t>& pool,
                                           const TrainConfig& cfg,
                                           const std::string& out_dir);

void save_style_checkpoint(const std::string& dir, StyleModule<Real>& sm);
void load_style_checkpoint(const std::string& dir, StyleModule<Real>& sm);

// Mean VAE reconstruction error of style stats over a set of images,
// evaluated at the posterior mean (epsilon = 0).
double style_recon_error(StyleModule<Real>& sm, const std::vector<Sample>& corpus,
                         const std::vector<size_t>& indices);

struct EvalResult {
  MetricsReport target;
  MetricsReport source;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Sample> corpus);

  // one optimizer step over a batch triple; updates weights and bank
  LossBundle train_step(const BatchTriple& bt);

  // full run: both phases, optional halt, final checkpoint + metrics
  EvalResult run();

  EvalResult evaluate();
  MetricsReport evaluate_indices(const std::vector<size_t>& indices);
  void write_overlays(const std::string& dir, int max_images = 4);

  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);

  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  SegNet<Real>& model() { return net_; }
  StyleModule<Real>& style() { return style_; }
  MemoryBank<Real>& bank() { return bank_; }
  const CorpusSplit& split() const { return split_; }

  // instrumentation: receives "bank_read" / "bank_update" events in order
  std::function<void(const char*)> hook;

 private:
  struct StepTensors;
  void begin_phase2_if_needed();
  Tensor<Real> adversarial_epsilon(const Tensor<Real>& x_src,
                                   const Tensor<Real>& y_src,
                                   const Tensor<Real>& base_stats);

  TrainConfig cfg_;
  std::vector<Sample> corpus_;
  CorpusSplit split_;
  SegNet<Real> net_;
  StyleModule<Real> style_;
  MemoryBank<Real> bank_;
  Sgd<Real> sgd_;
  BatchSampler sampler_;
  Rng rng_aug_{0}, rng_part_{0}, rng_style_{0};
  Tensor<Real> eps_adv_;
  bool eps_adv_ready_ = false;
  int epoch_ = 0;
  long phase2_step_ = 0;
  long phase2_total_steps_ = 0;
};

// Stacks corpus samples (optionally pre-augmented) into batch tensors.
Tensor<Real> stack_images(const std::vector<const Sample*>& samples);
Tensor<Real> stack_onehot(const std::vector<const Sample*>& samples, int num_classes);

}  // namespace cclseg
