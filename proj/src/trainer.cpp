#include "segkit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "segkit/rng.hpp"

namespace fs = std::filesystem;

namespace segkit {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (grad_accum < 1) throw std::invalid_argument("train: grad_accum must be >= 1");
  if (!(lr_min <= lr_max)) throw std::invalid_argument("train: lr_min must be <= lr_max");
  if (cycle_length < 1) throw std::invalid_argument("train: cycle_length must be >= 1");
  if (weight_decay < 0) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
}

double cyclic_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("cyclic_lr: epoch must be >= 0");
  int t = epoch % cfg.cycle_length;
  double phase = M_PI * static_cast<double>(t) / static_cast<double>(cfg.cycle_length);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(phase));
}

void init_adam_state(AdamState& state,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
  state.step = 0;
  state.m.clear();
  state.v.clear();
  for (const auto& [name, t] : params) {
    state.m.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    state.v.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state not initialized for this parameter list");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, t] = params[pi];
    if (!t.has_grad()) {
      throw std::runtime_error("adam_step: parameter '" + name + "' has no gradient");
    }
    auto& theta = t.values();
    auto& g = t.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < theta.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw std::runtime_error("adam_step: non-finite gradient in parameter '" + name +
                                 "' at element " + std::to_string(i));
      }
      double grad = g[i] + cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
      double m_hat = m[i] / bc1;
      double v_hat = v[i] / bc2;
      theta[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Shared sample preparation

namespace {

struct PreparedData {
  // deduplicated base samples, CLAHE applied, unpadded
  std::vector<SegSample> base;
  // per split: indices into `base` (train repeats reflect oversampling)
  std::vector<size_t> train, val, test;
};

SegSample preprocess(const DatasetManifest& manifest, const ManifestEntry& entry,
                     const DataConfig& cfg) {
  SegSample s = load_manifest_sample(manifest, entry);
  if (cfg.clahe_enabled) {
    s.image = clahe(s.image, s.height, s.width, cfg.clahe_clip, cfg.clahe_tiles_r,
                    cfg.clahe_tiles_c);
  }
  return s;
}

PreparedData prepare(const DatasetManifest& manifest, const DataConfig& cfg) {
  DatasetManifest source = manifest;
  if (cfg.oversample_enabled && cfg.oversample_factor > 1) {
    source = oversample(manifest, cfg.oversample_threshold, cfg.oversample_factor);
  }
  PreparedData out;
  std::map<std::string, size_t> by_image;
  for (const auto& e : source.entries) {
    std::string key = e.image_path + "|" + e.contour_path;
    auto it = by_image.find(key);
    size_t idx;
    if (it == by_image.end()) {
      out.base.push_back(preprocess(source, e, cfg));
      idx = out.base.size() - 1;
      by_image.emplace(std::move(key), idx);
    } else {
      idx = it->second;
    }
    switch (e.split) {
      case Split::train: out.train.push_back(idx); break;
      case Split::val: out.val.push_back(idx); break;
      case Split::test: out.test.push_back(idx); break;
    }
  }
  return out;
}

int pad_multiple_for(const ModelSpec& spec) { return 1 << spec.depth; }

// Stack prepared samples into input/mask batch tensors.
void stack_batch(const std::vector<SegSample>& samples, Tensor& images, Tensor& masks) {
  int n = static_cast<int>(samples.size());
  int h = samples[0].height, w = samples[0].width;
  images = Tensor::zeros({n, 1, h, w});
  masks = Tensor::zeros({n, 1, h, w});
  for (int i = 0; i < n; ++i) {
    if (samples[static_cast<size_t>(i)].height != h || samples[static_cast<size_t>(i)].width != w) {
      throw std::invalid_argument("batch: samples have mixed spatial sizes");
    }
    const auto& s = samples[static_cast<size_t>(i)];
    std::copy(s.image.begin(), s.image.end(),
              images.values().begin() + static_cast<int64_t>(i) * h * w);
    double* mdst = masks.values().data() + static_cast<int64_t>(i) * h * w;
    for (size_t j = 0; j < s.mask.data.size(); ++j) mdst[j] = s.mask.data[j] ? 1.0 : 0.0;
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct ValScore {
  double dice_mean = 0.0;
  double hd_mean = std::numeric_limits<double>::quiet_NaN();
  int hd_defined = 0;
};

// Validation pass on padded eval-ready samples; predictions are cropped back
// to the original frame before scoring.
ValScore validate_split(Model& model, const std::vector<SegSample>& eval_samples,
                        const TrainConfig& tcfg) {
  ValScore score;
  if (eval_samples.empty()) return score;
  double dice_acc = 0.0, hd_acc = 0.0;
  size_t i = 0;
  while (i < eval_samples.size()) {
    size_t j = i;
    std::vector<SegSample> group;
    while (j < eval_samples.size() && group.size() < static_cast<size_t>(tcfg.batch_size) &&
           eval_samples[j].height == eval_samples[i].height &&
           eval_samples[j].width == eval_samples[i].width) {
      group.push_back(eval_samples[j]);
      ++j;
    }
    Tensor images, masks;
    stack_batch(group, images, masks);
    Tape tape(false);
    Tensor prob = model.forward(tape, images, /*training=*/false);
    int h = group[0].height, w = group[0].width;
    for (size_t k = 0; k < group.size(); ++k) {
      BinaryMask pred = BinaryMask::zeros(h, w, group[k].mask.spacing);
      const double* pv = prob.values().data() + static_cast<int64_t>(k) * h * w;
      for (int64_t px = 0; px < static_cast<int64_t>(h) * w; ++px) {
        pred.data[static_cast<size_t>(px)] = pv[px] > tcfg.threshold ? 1 : 0;
      }
      BinaryMask pred_c = crop_to_original(pred, group[k].meta);
      BinaryMask truth_c = crop_to_original(group[k].mask, group[k].meta);
      dice_acc += dice_coefficient(pred_c, truth_c);
      if (!pred_c.empty_foreground() && !truth_c.empty_foreground()) {
        hd_acc += hausdorff(boundary(pred_c), boundary(truth_c), truth_c.spacing);
        ++score.hd_defined;
      }
    }
    i = j;
  }
  score.dice_mean = dice_acc / static_cast<double>(eval_samples.size());
  if (score.hd_defined > 0) score.hd_mean = hd_acc / score.hd_defined;
  return score;
}

}  // namespace

// ---------------------------------------------------------------------------
// train

TrainResult train(const ExperimentSetup& setup, const DatasetManifest& manifest,
                  const std::string& out_dir, const std::string& resume_from) {
  setup.train.validate();
  setup.loss.validate();
  setup.model.validate();
  set_num_threads(setup.train.threads);
  fs::create_directories(out_dir);

  const TrainConfig& tcfg = setup.train;
  PreparedData data = prepare(manifest, setup.data);
  if (data.train.empty()) throw std::invalid_argument("train: empty train split");
  if (data.val.empty()) throw std::invalid_argument("train: empty val split");

  const int pad_m = pad_multiple_for(setup.model);
  std::vector<SegSample> val_ready;
  for (size_t idx : data.val) val_ready.push_back(pad_to_multiple(data.base[idx], pad_m));

  Model model;
  AdamState opt;
  int start_epoch = 0;
  double best_val = -1.0;
  int best_epoch = -1;
  if (resume_from.empty()) {
    model = Model::build(setup.model, tcfg.seed);
    init_adam_state(opt, model.parameters());
  } else {
    LoadedCheckpoint ck = load_checkpoint(resume_from);
    if (!ck.has_opt) {
      throw std::runtime_error(resume_from + ": checkpoint has no optimizer state to resume");
    }
    model = std::move(ck.model);
    opt = std::move(ck.opt);
    start_epoch = ck.epoch + 1;
    best_val = ck.best_val_dice;
    best_epoch = ck.meta.value("extra", nlohmann::json::object()).value("best_epoch", -1);
  }

  TrainResult result;
  result.best_val_dice = best_val;
  result.best_epoch = best_epoch;
  result.log_path = (fs::path(out_dir) / "train_log.csv").string();
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();

  std::ofstream log(result.log_path,
                    resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error(result.log_path + ": cannot open training log");
  if (resume_from.empty()) {
    log << "# model=" << to_string(setup.model.family) << " depth=" << setup.model.depth
        << " base_width=" << setup.model.base_width
        << " width_multiplier=" << setup.model.width_multiplier
        << " batch_norm=" << (setup.model.batch_norm ? 1 : 0)
        << " gcn_kernel=" << setup.model.gcn_kernel << "\n";
    log << "# loss=" << to_string(setup.loss.kind) << " gamma=" << format_double(setup.loss.gamma)
        << " lambda=" << format_double(setup.loss.lambda)
        << " tau=" << format_double(setup.loss.tau) << " eps=" << format_double(setup.loss.eps)
        << "\n";
    log << "# epochs=" << tcfg.epochs << " batch_size=" << tcfg.batch_size
        << " grad_accum=" << tcfg.grad_accum << " lr_max=" << format_double(tcfg.lr_max)
        << " lr_min=" << format_double(tcfg.lr_min) << " cycle_length=" << tcfg.cycle_length
        << " weight_decay=" << format_double(tcfg.weight_decay)
        << " beta1=" << format_double(tcfg.beta1) << " beta2=" << format_double(tcfg.beta2)
        << " adam_eps=" << format_double(tcfg.adam_eps)
        << " threshold=" << format_double(tcfg.threshold) << " seed=" << tcfg.seed
        << " threads=" << tcfg.threads << "\n";
    log << "# augment=" << (setup.data.augment ? 1 : 0)
        << " clahe=" << (setup.data.clahe_enabled ? 1 : 0)
        << " clahe_clip=" << format_double(setup.data.clahe_clip)
        << " clahe_tiles=" << setup.data.clahe_tiles_r << "x" << setup.data.clahe_tiles_c
        << " oversample=" << (setup.data.oversample_enabled ? 1 : 0)
        << " oversample_threshold=" << format_double(setup.data.oversample_threshold)
        << " oversample_factor=" << setup.data.oversample_factor << "\n";
    log << "epoch,lr,train_loss,val_dice_mean,val_hd_mean\n";
  }

  for (int epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
    double lr = cyclic_lr(epoch, tcfg);

    // seeded shuffle of the (oversampled) train list
    std::vector<size_t> order = data.train;
    Rng shuffle_rng(derive_seed(tcfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = shuffle_rng.uniform_int(i);
      std::swap(order[i - 1], order[j]);
    }

    double loss_acc = 0.0;
    int64_t seen = 0;
    int accumulated = 0;
    size_t pos = 0;
    int batch_index = 0;
    while (pos < order.size()) {
      size_t take = std::min(static_cast<size_t>(tcfg.batch_size), order.size() - pos);
      std::vector<SegSample> batch;
      batch.reserve(take);
      for (size_t k = 0; k < take; ++k) {
        const SegSample& base = data.base[order[pos + k]];
        SegSample s = base;
        if (setup.data.augment) {
          Rng arng(derive_seed(tcfg.seed, "augment", static_cast<uint64_t>(epoch),
                               static_cast<uint64_t>(pos + k)));
          s = augment(base, arng);
        }
        batch.push_back(pad_to_multiple(s, pad_m));
      }
      Tensor images, masks;
      stack_batch(batch, images, masks);

      Tape tape;
      Tensor prob = model.forward(tape, images, /*training=*/true);
      LossValue lv = compute_loss(tape, prob, masks, setup.loss);
      double loss_val = lv.total.item();
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batch_index));
      }
      tape.backward(lv.total);
      loss_acc += loss_val * static_cast<double>(take);
      seen += static_cast<int64_t>(take);
      ++accumulated;

      bool do_step = accumulated == tcfg.grad_accum || pos + take >= order.size();
      if (do_step) {
        if (accumulated > 1) {
          double inv = 1.0 / accumulated;
          for (auto& [name, t] : model.parameters()) {
            for (auto& g : t.grad()) g *= inv;
          }
        }
        adam_step(model.parameters(), opt, lr, tcfg);
        for (auto& [name, t] : model.parameters()) t.zero_grad();
        accumulated = 0;
      }
      pos += take;
      ++batch_index;
    }

    double train_loss = loss_acc / static_cast<double>(seen);
    ValScore val = validate_split(model, val_ready, tcfg);

    nlohmann::json extra;
    extra["best_epoch"] = best_epoch;
    if (val.dice_mean > best_val) {
      best_val = val.dice_mean;
      best_epoch = epoch;
      extra["best_epoch"] = best_epoch;
      save_checkpoint(result.best_checkpoint, model, &opt, epoch, best_val, extra);
    }
    save_checkpoint(result.last_checkpoint, model, &opt, epoch, best_val, extra);

    std::string row = std::to_string(epoch) + "," + format_double(lr) + "," +
                      format_double(train_loss) + "," + format_double(val.dice_mean) + "," +
                      format_double(val.hd_mean);
    log << row << "\n";
    log.flush();
    result.log_rows.push_back(row);
    ++result.epochs_run;
  }

  result.best_val_dice = best_val;
  result.best_epoch = best_epoch;
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

MetricsReport evaluate(Model& model, const DatasetManifest& manifest, Split split,
                       const DataConfig& data_cfg, double threshold,
                       std::optional<PixelSpacing> spacing_override,
                       const std::string& pred_mask_dir) {
  std::vector<size_t> idx = manifest.indices_of(split);
  if (idx.empty()) {
    throw std::invalid_argument("evaluate: split '" + to_string(split) + "' is empty");
  }
  if (!pred_mask_dir.empty()) fs::create_directories(pred_mask_dir);
  const int pad_m = pad_multiple_for(model.spec());

  std::vector<MetricRecord> records;
  for (size_t mi : idx) {
    const ManifestEntry& entry = manifest.entries[mi];
    SegSample s = preprocess(manifest, entry, data_cfg);
    if (spacing_override) {
      s.mask.spacing = *spacing_override;
      s.meta.spacing = *spacing_override;
    }
    SegSample padded = pad_to_multiple(s, pad_m);
    Tensor images, masks;
    stack_batch({padded}, images, masks);
    Tape tape(false);
    Tensor prob = model.forward(tape, images, /*training=*/false);

    BinaryMask pred = BinaryMask::zeros(padded.height, padded.width, s.mask.spacing);
    for (size_t i = 0; i < pred.data.size(); ++i) {
      pred.data[i] = prob.values()[i] > threshold ? 1 : 0;
    }
    BinaryMask pred_c = crop_to_original(pred, padded.meta);
    if (!pred_mask_dir.empty()) {
      std::string stem = fs::path(entry.image_path).stem().string();
      write_mask((fs::path(pred_mask_dir) / (stem + "_pred.pgm")).string(), pred_c);
    }

    MetricRecord rec;
    rec.patient = entry.meta.patient_id;
    rec.slice = entry.meta.slice_id;
    rec.phase = entry.meta.phase;
    rec.contour = entry.meta.contour_kind;
    rec.dice = dice_coefficient(pred_c, s.mask);
    if (!pred_c.empty_foreground() && !s.mask.empty_foreground()) {
      rec.hd_mm = hausdorff(boundary(pred_c), boundary(s.mask), s.mask.spacing);
    }
    records.push_back(std::move(rec));
  }
  return MetricsReport::aggregate(std::move(records));
}

}  // namespace segkit
