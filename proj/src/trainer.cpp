#include "cclseg/trainer.hpp"

#include <cstring>
#include <map>

namespace cclseg {

namespace {

constexpr uint64_t kSamplerStream = 0x5a3c1;
constexpr uint64_t kAugStream = 0xa06;
constexpr uint64_t kPartStream = 0x9a27;
constexpr uint64_t kStyleStream = 0x57e1e;
constexpr uint64_t kInitStream = 0x1a17;
constexpr uint64_t kStylePreStream = 0x57e99;

std::string upper_snake(const std::string& s) {
  std::string out;
  for (char c : s) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw std::runtime_error("config: invalid boolean '" + s + "'");
}

// ---- named double arrays in a single blob ----

class ArrayWriter {
 public:
  explicit ArrayWriter(io::Manifest& m) : m_(&m) {}
  void add(const std::string& name, const double* p, Index n) {
    m_->set("array." + name,
            std::to_string(data_.size()) + " " + std::to_string(n));
    data_.insert(data_.end(), p, p + n);
  }
  void add(const std::string& name, const Tensor<Real>& t) {
    add(name, t.data(), t.numel());
  }
  void write(const std::string& path) const {
    io::write_file_bytes(path, data_.data(), data_.size() * sizeof(double));
  }

 private:
  io::Manifest* m_;
  std::vector<double> data_;
};

class ArrayReader {
 public:
  ArrayReader(const io::Manifest& m, const std::string& bin_path)
      : m_(&m), bytes_(io::read_file_bytes(bin_path)) {}
  bool has(const std::string& name) const { return m_->has("array." + name); }
  void read(const std::string& name, double* dst, Index n) const {
    const std::string& spec = m_->get("array." + name);
    const auto sep = spec.find(' ');
    const size_t off = std::stoull(spec.substr(0, sep));
    const Index count = std::stoll(spec.substr(sep + 1));
    CCLSEG_REQUIRE(count == n, "checkpoint: array '" + name + "' count mismatch");
    CCLSEG_REQUIRE((off + static_cast<size_t>(n)) * sizeof(double) <= bytes_.size(),
                   "checkpoint: array '" + name + "' out of range");
    std::memcpy(dst, bytes_.data() + off * sizeof(double),
                static_cast<size_t>(n) * sizeof(double));
  }
  void read(const std::string& name, Tensor<Real>& t) const {
    read(name, t.data(), t.numel());
  }

 private:
  const io::Manifest* m_;
  std::vector<uint8_t> bytes_;
};

int corpus_num_classes(const std::vector<Sample>& corpus) {
  int k = 0;
  for (const auto& s : corpus)
    for (Index i = 0; i < s.label.numel(); ++i) k = std::max(k, static_cast<int>(s.label[i]));
  return k + 1;
}

CentroidSet<Real> merge_centroids(const CentroidSet<Real>& a,
                                  const CentroidSet<Real>& b) {
  CentroidSet<Real> out;
  const Index k = a.values.size(0), c = a.values.size(1);
  out.values = Tensor<Real>({k, c});
  out.per_class_mass = Tensor<Real>({k});
  out.present.assign(static_cast<size_t>(k), 0);
  for (Index i = 0; i < k; ++i) {
    const double m = a.per_class_mass[i] + b.per_class_mass[i];
    out.per_class_mass[i] = m;
    if (m > kEpsMass) {
      out.present[static_cast<size_t>(i)] = 1;
      out.values.mat2().row(i) =
          (a.values.mat2().row(i) * a.per_class_mass[i] +
           b.values.mat2().row(i) * b.per_class_mass[i]) /
          m;
    }
  }
  return out;
}

}  // namespace

// ----------------------------------------------------------------- config

void TrainConfig::resolve() {
  if (paper_profile) {
    source_bs = 32;
    warmup_epochs = 200;
    main_epochs = 200;
  }
  CCLSEG_REQUIRE(target_bs == 1, "config: target batch size is fixed at 1");
  CCLSEG_REQUIRE(partitions >= 1, "config: partitions >= 1");
  CCLSEG_REQUIRE(tau > 0, "config: tau > 0");
  CCLSEG_REQUIRE(rho > 0 && rho < 1, "config: rho in (0,1)");
  CCLSEG_REQUIRE(lambda_contrast >= 0 && lambda_cnr >= 0, "config: weights >= 0");
  CCLSEG_REQUIRE(warmup_epochs >= 0 && main_epochs >= 0, "config: epochs >= 0");
  mode_from_name(mode);  // throws on junk
}

io::Manifest TrainConfig::to_manifest() const {
  io::Manifest m;
  m.set("corpus_dir", corpus_dir);
  m.set("out_dir", out_dir);
  m.set("style_checkpoint", style_checkpoint);
  m.set("mode", mode);
  m.set_int("fold", fold);
  m.set_u64("seed", seed);
  m.set_int("use_style", use_style);
  m.set_int("use_ccl", use_ccl);
  m.set_int("use_cnr", use_cnr);
  m.set_int("use_mpccl", use_mpccl);
  m.set_int("epsilon_on", epsilon_on);
  m.set_int("warmup_epochs", warmup_epochs);
  m.set_int("main_epochs", main_epochs);
  m.set_double("lr_warmup", lr_warmup);
  m.set_double("lr_main", lr_main);
  m.set_double("poly_power", poly_power);
  m.set_double("sgd_momentum", sgd_momentum);
  m.set_int("source_bs", source_bs);
  m.set_int("target_bs", target_bs);
  m.set_double("lambda_contrast", lambda_contrast);
  m.set_double("lambda_cnr", lambda_cnr);
  m.set_double("rho", rho);
  m.set_double("tau", tau);
  m.set_int("partitions", partitions);
  m.set_int("detach_pseudo_label", detach_pseudo_label);
  m.set_int("ema_rho_weights_fresh", ema_rho_weights_fresh);
  m.set_int("include_positive_in_denominator", include_positive_in_denominator);
  m.set_int("epsilon_descent", epsilon_descent);
  m.set_double("epsilon_eta", epsilon_eta);
  m.set_int("style_pretrain_epochs", style_pretrain_epochs);
  m.set_double("style_lr", style_lr);
  m.set_int("stop_after_epoch", stop_after_epoch);
  m.set_int("paper_profile", paper_profile);
  return m;
}

TrainConfig TrainConfig::from_manifest(const io::Manifest& m) {
  TrainConfig c;
  auto s = [&](const char* k, std::string& dst) { if (m.has(k)) dst = m.get(k); };
  auto i = [&](const char* k, int& dst) { if (m.has(k)) dst = static_cast<int>(m.get_int(k)); };
  auto b = [&](const char* k, bool& dst) { if (m.has(k)) dst = parse_bool(m.get(k)); };
  auto d = [&](const char* k, double& dst) { if (m.has(k)) dst = m.get_double(k); };
  s("corpus_dir", c.corpus_dir);
  s("out_dir", c.out_dir);
  s("style_checkpoint", c.style_checkpoint);
  s("mode", c.mode);
  i("fold", c.fold);
  if (m.has("seed")) c.seed = m.get_u64("seed");
  b("use_style", c.use_style);
  b("use_ccl", c.use_ccl);
  b("use_cnr", c.use_cnr);
  b("use_mpccl", c.use_mpccl);
  b("epsilon_on", c.epsilon_on);
  i("warmup_epochs", c.warmup_epochs);
  i("main_epochs", c.main_epochs);
  d("lr_warmup", c.lr_warmup);
  d("lr_main", c.lr_main);
  d("poly_power", c.poly_power);
  d("sgd_momentum", c.sgd_momentum);
  i("source_bs", c.source_bs);
  i("target_bs", c.target_bs);
  d("lambda_contrast", c.lambda_contrast);
  d("lambda_cnr", c.lambda_cnr);
  d("rho", c.rho);
  d("tau", c.tau);
  i("partitions", c.partitions);
  b("detach_pseudo_label", c.detach_pseudo_label);
  b("ema_rho_weights_fresh", c.ema_rho_weights_fresh);
  b("include_positive_in_denominator", c.include_positive_in_denominator);
  b("epsilon_descent", c.epsilon_descent);
  d("epsilon_eta", c.epsilon_eta);
  i("style_pretrain_epochs", c.style_pretrain_epochs);
  d("style_lr", c.style_lr);
  i("stop_after_epoch", c.stop_after_epoch);
  b("paper_profile", c.paper_profile);
  return c;
}

void TrainConfig::apply_env() {
  io::Manifest m = to_manifest();
  io::Manifest patched;
  for (const auto& [key, value] : m.entries()) {
    const std::string env_key = "CCLSEG_" + upper_snake(key);
    if (const char* env = std::getenv(env_key.c_str()))
      patched.set(key, env);
    else
      patched.set(key, value);
  }
  *this = from_manifest(patched);
}

TrainConfig TrainConfig::load(const std::string& path, bool apply_env_overrides) {
  TrainConfig c = from_manifest(io::Manifest::load(path));
  if (apply_env_overrides) c.apply_env();
  return c;
}

uint64_t TrainConfig::content_hash() const {
  io::Manifest m = to_manifest();
  uint64_t h = 1469598103934665603ull;
  for (const auto& [key, value] : m.entries()) {
    if (key == "out_dir" || key == "stop_after_epoch") continue;
    for (char ch : key + "=" + value) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string LossBundle::str() const {
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "total=%.6f seg=%.6f (src=%.4f styl=%.4f) contrast=%.4f cnr=%.4f "
                "rain=%.4f (c=%.4f s=%.4f kl=%.4f rec=%.4f)",
                total, seg, seg_src, seg_styl, contrast, cnr_term, rain_total,
                rain_c, rain_s, rain_kl, rain_rec);
  return buf;
}

// ------------------------------------------------------------ batch helpers

Tensor<Real> stack_images(const std::vector<const Sample*>& samples) {
  CCLSEG_REQUIRE(!samples.empty(), "stack_images: empty batch");
  const Index h = samples[0]->image.size(1), w = samples[0]->image.size(2);
  Tensor<Real> out({static_cast<Index>(samples.size()), 1, h, w});
  for (size_t i = 0; i < samples.size(); ++i)
    std::memcpy(out.data() + static_cast<Index>(i) * h * w, samples[i]->image.data(),
                static_cast<size_t>(h * w) * sizeof(Real));
  return out;
}

Tensor<Real> stack_onehot(const std::vector<const Sample*>& samples, int num_classes) {
  CCLSEG_REQUIRE(!samples.empty(), "stack_onehot: empty batch");
  const Index h = samples[0]->label.size(0), w = samples[0]->label.size(1);
  const Index k = num_classes;
  Tensor<Real> out({static_cast<Index>(samples.size()), k, h, w});
  for (size_t i = 0; i < samples.size(); ++i) {
    Tensor<Real> oh = onehot(samples[i]->label, num_classes);
    std::memcpy(out.data() + static_cast<Index>(i) * k * h * w, oh.data(),
                static_cast<size_t>(k * h * w) * sizeof(Real));
  }
  return out;
}

// -------------------------------------------------------- style checkpoint

void save_style_checkpoint(const std::string& dir, StyleModule<Real>& sm) {
  io::make_dirs(dir);
  io::Manifest m;
  m.set("format", "cclseg-style-v1");
  m.set_int("zdim", sm.zdim);
  m.set_int("pretrained", sm.pretrained ? 1 : 0);
  ArrayWriter aw(m);
  sm.visit_params([&](const std::string& name, Tensor<Real>& t) { aw.add(name, t); });
  aw.write(dir + "/arrays.bin");
  m.save(dir + "/manifest.txt");
}

void load_style_checkpoint(const std::string& dir, StyleModule<Real>& sm) {
  CCLSEG_REQUIRE(io::file_exists(dir + "/manifest.txt"),
                 "style module not pretrained: no checkpoint at " + dir +
                     " (run pretrain-style first)");
  io::Manifest m = io::Manifest::load(dir + "/manifest.txt");
  CCLSEG_REQUIRE(m.get("format") == "cclseg-style-v1",
                 "load_style_checkpoint: unknown format");
  CCLSEG_REQUIRE(m.get_int("zdim") == sm.zdim, "load_style_checkpoint: zdim mismatch");
  ArrayReader ar(m, dir + "/arrays.bin");
  sm.visit_params([&](const std::string& name, Tensor<Real>& t) { ar.read(name, t); });
  sm.pretrained = m.get_int("pretrained") != 0;
}

double style_recon_error(StyleModule<Real>& sm, const std::vector<Sample>& corpus,
                         const std::vector<size_t>& indices) {
  CCLSEG_REQUIRE(!indices.empty(), "style_recon_error: no images");
  double total = 0;
  for (size_t idx : indices) {
    Tensor<Real> img = stack_images({&corpus[idx]});
    Tape<Real> tape;
    Binding<Real> bind(tape, false);
    auto taps = sm.encode(bind, tape.constant(img));
    Var<Real> stats = sm.stats_vec(tape, taps.b3);
    auto post = sm.vae_encode(bind, stats);
    auto dec = sm.vae_decode(bind, post.mu);  // epsilon = 0
    Var<Real> recon = ad::concat_cols(dec.mu, dec.sigma);
    total += ad::mean_all(ad::square(ad::sub(stats, recon))).item();
  }
  return total / static_cast<double>(indices.size());
}

// -------------------------------------------------------- style pretraining

StylePretrainResult pretrain_style_on_pool(const std::vector<Sample>& corpus,
                                           const std::vector<size_t>& pool,
                                           const TrainConfig& cfg,
                                           const std::string& out_dir) {
  CCLSEG_REQUIRE(!pool.empty(), "pretrain_style: empty pool");
  for (size_t idx : pool)
    CCLSEG_REQUIRE(corpus[idx].domain != Domain::target,
                   "pretrain_style: target sample in style pretraining pool");

  Rng init_rng(detail::mix_seed(cfg.seed, kInitStream));
  StyleModule<Real> sm(init_rng);
  Sgd<Real> opt(sm.param_ptrs(), cfg.sgd_momentum);
  Rng rng(detail::mix_seed(cfg.seed, kStylePreStream));

  StylePretrainResult res;
  const int bs = std::min<int>(cfg.source_bs, static_cast<int>(pool.size()));
  for (int ep = 0; ep < cfg.style_pretrain_epochs; ++ep) {
    std::vector<size_t> order = pool;
    rng.shuffle(order);
    double ep_loss = 0;
    int ep_batches = 0;
    for (size_t pos = 0; pos + static_cast<size_t>(bs) <= order.size();
         pos += static_cast<size_t>(bs)) {
      std::vector<const Sample*> content;
      for (int i = 0; i < bs; ++i) content.push_back(&corpus[order[pos + static_cast<size_t>(i)]]);
      const Sample& style_img =
          corpus[pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]];
      Tensor<Real> eps({1, sm.zdim});
      for (Index z = 0; z < sm.zdim; ++z) eps[z] = rng.normal();

      Tape<Real> tape;
      Binding<Real> bind(tape, true);
      auto rain = sm.rain_losses(tape, bind, tape.constant(stack_images(content)),
                                 tape.constant(stack_images({&style_img})),
                                 tape.constant(eps));
      const double loss = rain.total.item();
      CCLSEG_REQUIRE(std::isfinite(loss), "pretrain_style: non-finite loss");
      tape.backward(rain.total);
      opt.step(tape, bind, cfg.style_lr);
      ep_loss += loss;
      ++ep_batches;
    }
    ep_loss /= std::max(1, ep_batches);
    if (ep == 0) res.first_epoch_loss = ep_loss;
    res.last_epoch_loss = ep_loss;
  }

  sm.pretrained = true;
  save_style_checkpoint(out_dir, sm);
  res.checkpoint_dir = out_dir;
  return res;
}

StylePretrainResult pretrain_style(const std::vector<Sample>& corpus,
                                   const TrainConfig& cfg) {
  TrainConfig c = cfg;
  c.resolve();
  CorpusSplit sp = split_corpus(corpus, c.fold, mode_from_name(c.mode));
  const std::string dir =
      c.style_checkpoint.empty() ? c.out_dir + "/style_ckpt" : c.style_checkpoint;
  return pretrain_style_on_pool(corpus, sp.style_pool, c, dir);
}

// ----------------------------------------------------------------- trainer

Trainer::Trainer(TrainConfig cfg, std::vector<Sample> corpus)
    : cfg_(std::move(cfg)), corpus_(std::move(corpus)) {
  cfg_.resolve();
  CCLSEG_REQUIRE(!corpus_.empty(), "Trainer: empty corpus");
  split_ = split_corpus(corpus_, cfg_.fold, mode_from_name(cfg_.mode));

  const int K = corpus_num_classes(corpus_);
  Rng init_rng(detail::mix_seed(cfg_.seed, kInitStream));
  net_ = SegNet<Real>(K, init_rng);
  style_ = StyleModule<Real>(init_rng);
  bank_ = MemoryBank<Real>(K, SegNet<Real>::kDecoderChannels, cfg_.rho,
                           cfg_.ema_rho_weights_fresh);

  std::vector<Tensor<Real>*> params = net_.param_ptrs();
  for (Tensor<Real>* p : style_.param_ptrs()) params.push_back(p);
  sgd_ = Sgd<Real>(params, cfg_.sgd_momentum);

  sampler_ = BatchSampler(split_.source_train, split_.target_train, cfg_.source_bs,
                          detail::mix_seed(cfg_.seed, kSamplerStream));
  rng_aug_ = Rng(detail::mix_seed(cfg_.seed, kAugStream));
  rng_part_ = Rng(detail::mix_seed(cfg_.seed, kPartStream));
  rng_style_ = Rng(detail::mix_seed(cfg_.seed, kStyleStream));
  eps_adv_ = Tensor<Real>({1, style_.zdim});

  if (cfg_.use_style) load_style_checkpoint(cfg_.style_checkpoint, style_);

  phase2_total_steps_ =
      static_cast<long>(cfg_.main_epochs) * sampler_.batches_per_epoch();
}

Tensor<Real> Trainer::adversarial_epsilon(const Tensor<Real>& x_src,
                                          const Tensor<Real>& y_src,
                                          const Tensor<Real>& base_stats) {
  Tape<Real> tape;
  Binding<Real> frozen(tape, false);
  Var<Real> eps_var = tape.input(eps_adv_, true);
  Var<Real> gen =
      style_.stylize_with_latent(tape, frozen, tape.constant(x_src), base_stats, eps_var);
  auto out = net_.forward(frozen, gen);
  Var<Real> loss = seg_loss(tape, out.logits, y_src);
  tape.backward(loss);
  return adversarial_epsilon_step(eps_adv_, tape.grad(eps_var), Real(cfg_.epsilon_eta),
                                  cfg_.epsilon_descent);
}

LossBundle Trainer::train_step(const BatchTriple& bt) {
  const bool phase2 = epoch_ >= cfg_.warmup_epochs;
  const int K = net_.num_classes();

  // batch assembly: affine-augmented source, raw target, heavy-augmented copy
  std::vector<Sample> src_aug;
  src_aug.reserve(bt.source.size());
  for (size_t idx : bt.source) src_aug.push_back(augment_source(corpus_[idx], rng_aug_.raw()));
  std::vector<const Sample*> src_ptrs;
  for (const auto& s : src_aug) src_ptrs.push_back(&s);
  Tensor<Real> x_s = stack_images(src_ptrs);
  Tensor<Real> y_s = stack_onehot(src_ptrs, K);
  const Sample& tgt = corpus_[bt.target];
  Sample tgt_heavy = augment_target_heavy(tgt, rng_aug_.raw());
  Tensor<Real> x_t = stack_images({&tgt});
  Tensor<Real> x_ta = stack_images({&tgt_heavy});

  // style preliminaries
  const Sample* style_img = nullptr;
  Tensor<Real> style_tensor, base_stats;
  Tensor<Real> eps({1, style_.zdim});
  if (cfg_.use_style) {
    style_img = &corpus_[split_.style_pool[static_cast<size_t>(
        rng_style_.uniform_int(0, static_cast<int>(split_.style_pool.size()) - 1))]];
    style_tensor = stack_images({style_img});
    if (phase2 && cfg_.epsilon_on) {
      if (!eps_adv_ready_) {
        for (Index z = 0; z < style_.zdim; ++z) eps_adv_[z] = rng_style_.normal();
        eps_adv_ready_ = true;
      }
      base_stats = style_.image_style_stats(style_tensor);
      eps_adv_ = adversarial_epsilon(x_s, y_s, base_stats);
      eps = eps_adv_;
    } else {
      for (Index z = 0; z < style_.zdim; ++z) eps[z] = rng_style_.normal();
    }
  }

  // main graph
  Tape<Real> tape;
  Binding<Real> bind(tape, true);
  LossBundle bundle;
  Var<Real> x_s_var = tape.constant(x_s);
  Var<Real> total = tape.scalar(0);

  Tensor<Real> x_hat;
  if (cfg_.use_style) {
    auto rain = style_.rain_losses(tape, bind, x_s_var, tape.constant(style_tensor),
                                   tape.constant(eps));
    bundle.rain_c = rain.content.item();
    bundle.rain_s = rain.style.item();
    bundle.rain_kl = rain.kl.item();
    bundle.rain_rec = rain.rec.item();
    bundle.rain_total = rain.total.item();
    total = ad::add(total, rain.total);
    // the stylized batch trains the segmenter but does not backfeed the
    // style weights; epsilon carries the adversarial pressure instead
    x_hat = rain.generated.val();
  }

  auto out_src = net_.forward(bind, x_s_var);
  Var<Real> seg_total = seg_loss(tape, out_src.logits, y_s);
  bundle.seg_src = seg_total.item();
  std::optional<SegNet<Real>::Out> out_styl;
  if (cfg_.use_style) {
    out_styl = net_.forward(bind, tape.constant(x_hat));
    Var<Real> l = seg_loss(tape, out_styl->logits, y_s);
    bundle.seg_styl = l.item();
    seg_total = ad::add(seg_total, l);
  }
  bundle.seg = seg_total.item();
  total = ad::add(total, seg_total);

  if (cfg_.use_ccl || cfg_.use_cnr) {
    auto out_t = net_.forward(bind, tape.constant(x_t));
    Var<Real> soft_t = target_soft_mask(tape, out_t.logits);
    if (cfg_.detach_pseudo_label) soft_t = ad::detach(soft_t);
    const int P = cfg_.use_mpccl ? cfg_.partitions : 1;
    const Index hw = x_t.size(2) * x_t.size(3);
    PartitionAssignment pa = make_partition_assignment(hw, P, rng_part_);
    std::vector<Var<Real>> parts = partition_prediction(tape, soft_t, pa);
    std::vector<CentroidArg<Real>> part_args;
    for (auto& pm : parts)
      part_args.push_back(CentroidArg<Real>::from(
          compute_centroids(tape, out_t.decoder_features, pm)));

    auto out_a = net_.forward(bind, tape.constant(x_ta));
    Var<Real> soft_a = target_soft_mask(tape, out_a.logits);
    if (cfg_.detach_pseudo_label) soft_a = ad::detach(soft_a);
    CentroidArg<Real> aug_arg = CentroidArg<Real>::from(
        compute_centroids(tape, out_a.decoder_features, soft_a));

    if (hook) hook("bank_read");
    CentroidSet<Real> bank_snapshot = bank_.snapshot();

    ContrastiveConfig ccfg;
    ccfg.tau = cfg_.tau;
    ccfg.lambda_contrast = cfg_.lambda_contrast;
    ccfg.lambda_cnr = cfg_.lambda_cnr;
    ccfg.partitions = P;
    ccfg.include_positive_in_denominator = cfg_.include_positive_in_denominator;

    if (cfg_.use_ccl) {
      CentroidArg<Real> bank_arg = CentroidArg<Real>::constant(tape, bank_snapshot);
      Var<Real> lc = mpccl(tape, bank_arg, part_args, aug_arg, ccfg, /*quiet=*/true);
      bundle.contrast = lc.item();
      total = ad::add(total, ad::mul_scalar(lc, Real(cfg_.lambda_contrast)));
    }
    if (cfg_.use_cnr) {
      Var<Real> lr_ = cnr_over_partitions(tape, part_args, bank_snapshot);
      bundle.cnr_term = lr_.item();
      total = ad::add(total, ad::mul_scalar(lr_, Real(cfg_.lambda_cnr)));
    }
  }

  bundle.total = total.item();
  for (double v : {bundle.total, bundle.seg, bundle.contrast, bundle.cnr_term,
                   bundle.rain_total})
    if (!std::isfinite(v))
      throw std::runtime_error("train_step: non-finite sub-loss, aborting step. " +
                               bundle.str());

  tape.backward(total);
  const Real lr = phase2 ? poly_lr(Real(cfg_.lr_main), phase2_step_,
                                   phase2_total_steps_, Real(cfg_.poly_power))
                         : Real(cfg_.lr_warmup);
  sgd_.step(tape, bind, lr);
  if (phase2) ++phase2_step_;

  // fresh source centroids from the labeled batch (and its stylized twin),
  // blended into the bank only after the gradients are done
  CentroidSet<Real> fresh = compute_centroids(out_src.decoder_features.val(), y_s);
  if (out_styl)
    fresh = merge_centroids(fresh,
                            compute_centroids(out_styl->decoder_features.val(), y_s));
  if (hook) hook("bank_update");
  bank_.update(fresh);

  return bundle;
}

EvalResult Trainer::run() {
  io::make_dirs(cfg_.out_dir);
  cfg_.to_manifest().save(cfg_.out_dir + "/config.txt");
  std::string log = "epoch,phase,lr,total,seg,contrast,cnr,rain\n";

  const int total_epochs = cfg_.warmup_epochs + cfg_.main_epochs;
  for (; epoch_ < total_epochs;) {
    double ep_total = 0, ep_seg = 0, ep_con = 0, ep_cnr = 0, ep_rain = 0;
    int n = 0;
    for (const BatchTriple& bt : sampler_.epoch()) {
      LossBundle b = train_step(bt);
      ep_total += b.total;
      ep_seg += b.seg;
      ep_con += b.contrast;
      ep_cnr += b.cnr_term;
      ep_rain += b.rain_total;
      ++n;
    }
    const bool phase2 = epoch_ >= cfg_.warmup_epochs;
    char row[256];
    std::snprintf(row, sizeof(row), "%d,%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f\n", epoch_,
                  phase2 ? 2 : 1, phase2 ? cfg_.lr_main : cfg_.lr_warmup,
                  ep_total / n, ep_seg / n, ep_con / n, ep_cnr / n, ep_rain / n);
    log += row;
    ++epoch_;
    if (cfg_.stop_after_epoch >= 0 && epoch_ >= cfg_.stop_after_epoch) {
      save_checkpoint(cfg_.out_dir + "/checkpoint_halt");
      io::write_text_file(cfg_.out_dir + "/train_log.csv", log);
      return evaluate();
    }
  }

  save_checkpoint(cfg_.out_dir + "/checkpoint_final");
  io::write_text_file(cfg_.out_dir + "/train_log.csv", log);
  EvalResult ev = evaluate();
  io::write_text_file(cfg_.out_dir + "/metrics_target.csv", metrics_csv(ev.target));
  if (!ev.source.per_class.empty())
    io::write_text_file(cfg_.out_dir + "/metrics_source.csv", metrics_csv(ev.source));
  io::write_text_file(cfg_.out_dir + "/report.txt",
                      metrics_table("target fold " + std::to_string(cfg_.fold), ev.target) +
                          (ev.source.per_class.empty()
                               ? std::string()
                               : metrics_table("source fold " + std::to_string(cfg_.fold),
                                               ev.source)));
  write_overlays(cfg_.out_dir + "/overlays");
  return ev;
}

MetricsReport Trainer::evaluate_indices(const std::vector<size_t>& indices) {
  CCLSEG_REQUIRE(!indices.empty(), "evaluate: no slices");
  std::vector<Mask> preds, gts;
  const int K = net_.num_classes();
  for (size_t idx : indices) {
    const Sample& s = corpus_[idx];
    Tape<Real> tape;
    Binding<Real> frozen(tape, false);
    auto out = net_.forward(frozen, tape.constant(stack_images({&s})));
    const Tensor<Real>& logits = out.logits.val();
    const Index h = logits.size(2), w = logits.size(3);
    Mask pred({h, w});
    for (Index p = 0; p < h * w; ++p) {
      int best = 0;
      double bv = logits[p];
      for (int k = 1; k < K; ++k)
        if (logits[k * h * w + p] > bv) {
          bv = logits[k * h * w + p];
          best = k;
        }
      pred[p] = static_cast<uint8_t>(best);
    }
    preds.push_back(std::move(pred));
    gts.push_back(s.label);
  }
  return evaluate_slices(preds, gts, K, {"ring", "disk", "blob"});
}

EvalResult Trainer::evaluate() {
  EvalResult ev;
  ev.target = evaluate_indices(split_.target_test);
  if (!split_.source_test.empty()) ev.source = evaluate_indices(split_.source_test);
  return ev;
}

void Trainer::write_overlays(const std::string& dir, int max_images) {
  io::make_dirs(dir);
  const int K = net_.num_classes();
  // background gray, ring red, disk violet, blob green
  const uint8_t colors[4][3] = {{0, 0, 0}, {220, 60, 60}, {170, 80, 220}, {60, 200, 90}};
  int written = 0;
  for (size_t idx : split_.target_test) {
    if (written >= max_images) break;
    const Sample& s = corpus_[idx];
    Tape<Real> tape;
    Binding<Real> frozen(tape, false);
    auto out = net_.forward(frozen, tape.constant(stack_images({&s})));
    const Tensor<Real>& logits = out.logits.val();
    const Index h = s.label.size(0), w = s.label.size(1);
    // side by side: ground truth | prediction
    std::vector<uint8_t> rgb(static_cast<size_t>(h) * (2 * w + 2) * 3, 255);
    auto put = [&](Index y, Index x, const uint8_t* c, double alpha, double gray) {
      const size_t o = (static_cast<size_t>(y) * (2 * w + 2) + static_cast<size_t>(x)) * 3;
      for (int ch = 0; ch < 3; ++ch)
        rgb[o + static_cast<size_t>(ch)] = static_cast<uint8_t>(
            std::clamp(alpha * c[ch] + (1 - alpha) * 255.0 * gray, 0.0, 255.0));
    };
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double g = s.image[y * w + x];
        const int gt = s.label[y * w + x];
        put(y, x, colors[gt], gt == 0 ? 0.0 : 0.55, g);
        int best = 0;
        double bv = logits[y * w + x];
        for (int k = 1; k < K; ++k)
          if (logits[k * h * w + y * w + x] > bv) {
            bv = logits[k * h * w + y * w + x];
            best = k;
          }
        put(y, x + w + 2, colors[best], best == 0 ? 0.0 : 0.55, g);
      }
    io::write_png_rgb8(dir + "/overlay_" + std::to_string(written) + ".png",
                       static_cast<int>(2 * w + 2), static_cast<int>(h), rgb);
    ++written;
  }
}

// -------------------------------------------------------------- checkpoints

void Trainer::save_checkpoint(const std::string& dir) const {
  io::make_dirs(dir);
  io::Manifest m;
  m.set("format", "cclseg-ckpt-v1");
  m.set_int("epoch_next", epoch_);
  m.set_int("phase2_step", phase2_step_);
  m.set_u64("config_hash", cfg_.content_hash());
  m.set("rng.sampler", sampler_.rng_state());
  m.set("rng.aug", rng_aug_.serialize());
  m.set("rng.part", rng_part_.serialize());
  m.set("rng.style", rng_style_.serialize());
  m.set_int("eps_adv_ready", eps_adv_ready_ ? 1 : 0);
  std::string init_flags;
  for (uint8_t f : bank_.initialized) init_flags += f ? '1' : '0';
  m.set("bank.initialized", init_flags);

  ArrayWriter aw(m);
  const_cast<SegNet<Real>&>(net_).visit_params(
      [&](const std::string& name, Tensor<Real>& t) { aw.add(name, t); });
  const_cast<StyleModule<Real>&>(style_).visit_params(
      [&](const std::string& name, Tensor<Real>& t) { aw.add(name, t); });
  auto& vels = const_cast<Sgd<Real>&>(sgd_).velocities();
  for (size_t i = 0; i < vels.size(); ++i)
    aw.add("opt.v" + std::to_string(i), vels[i]);
  aw.add("bank.centroids", bank_.centroids);
  aw.add("eps_adv", eps_adv_);
  aw.write(dir + "/arrays.bin");
  m.save(dir + "/manifest.txt");
}

void Trainer::load_checkpoint(const std::string& dir) {
  io::Manifest m = io::Manifest::load(dir + "/manifest.txt");
  CCLSEG_REQUIRE(m.get("format") == "cclseg-ckpt-v1", "checkpoint: unknown format");
  CCLSEG_REQUIRE(m.get_u64("config_hash") == cfg_.content_hash(),
                 "checkpoint: config hash mismatch, refusing to resume");
  ArrayReader ar(m, dir + "/arrays.bin");
  net_.visit_params([&](const std::string& name, Tensor<Real>& t) { ar.read(name, t); });
  style_.visit_params([&](const std::string& name, Tensor<Real>& t) { ar.read(name, t); });
  auto& vels = sgd_.velocities();
  for (size_t i = 0; i < vels.size(); ++i) ar.read("opt.v" + std::to_string(i), vels[i]);
  ar.read("bank.centroids", bank_.centroids);
  ar.read("eps_adv", eps_adv_);
  const std::string& init_flags = m.get("bank.initialized");
  CCLSEG_REQUIRE(init_flags.size() == bank_.initialized.size(),
                 "checkpoint: bank class count mismatch");
  for (size_t i = 0; i < init_flags.size(); ++i)
    bank_.initialized[i] = init_flags[i] == '1' ? 1 : 0;
  sampler_.set_rng_state(m.get("rng.sampler"));
  rng_aug_.deserialize(m.get("rng.aug"));
  rng_part_.deserialize(m.get("rng.part"));
  rng_style_.deserialize(m.get("rng.style"));
  eps_adv_ready_ = m.get_int("eps_adv_ready") != 0;
  epoch_ = static_cast<int>(m.get_int("epoch_next"));
  phase2_step_ = m.get_int("phase2_step");
}

}  // namespace cclseg
