#include "cilfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "cilfuse/errors.hpp"
#include "cilfuse/rng.hpp"
#include "cilfuse/routing.hpp"

namespace cilfuse {

std::string to_string(Pooler p) { return p == Pooler::max ? "max" : "avg"; }

Pooler pooler_from_string(const std::string& s) {
  if (s == "max") return Pooler::max;
  if (s == "avg") return Pooler::avg;
  throw ConfigError("unknown pooler '" + s + "'");
}

// ------------------------------------------------------------- label map

GlobalLabelMap GlobalLabelMap::build(std::span<const std::vector<ClassId>> branch_labels) {
  GlobalLabelMap map;
  std::map<ClassId, std::vector<LabelSlot>> slots;
  std::size_t offset = 0;
  for (std::size_t d = 0; d < branch_labels.size(); ++d) {
    const auto& labels = branch_labels[d];
    if (labels.empty()) throw MapError("label map: branch " + std::to_string(d) + " has no labels");
    if (!std::is_sorted(labels.begin(), labels.end()) ||
        std::adjacent_find(labels.begin(), labels.end()) != labels.end()) {
      throw MapError("label map: branch " + std::to_string(d) + " labels must be sorted and unique");
    }
    map.offsets.push_back(offset);
    map.branch_sizes.push_back(labels.size());
    for (std::size_t j = 0; j < labels.size(); ++j) slots[labels[j]].push_back({d, j});
    offset += labels.size();
  }
  for (auto& [c, s] : slots) {
    map.classes.push_back(c);
    map.slots.push_back(std::move(s));
  }
  return map;
}

std::size_t GlobalLabelMap::width() const {
  std::size_t w = 0;
  for (auto s : branch_sizes) w += s;
  return w;
}

std::size_t GlobalLabelMap::class_index(ClassId c) const {
  const auto it = std::lower_bound(classes.begin(), classes.end(), c);
  if (it == classes.end() || *it != c) throw LookupError("label map has no class " + std::to_string(c));
  return static_cast<std::size_t>(it - classes.begin());
}

void GlobalLabelMap::validate() const {
  if (slots.size() != classes.size()) throw MapError("label map: slot table size mismatch");
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& s : slots) {
    if (s.empty()) throw MapError("label map: class with no entries");
    for (const auto& slot : s) {
      if (slot.branch >= branch_sizes.size() || slot.local >= branch_sizes[slot.branch]) {
        throw MapError("label map: slot out of range");
      }
      if (!seen.insert({slot.branch, slot.local}).second) throw MapError("label map: duplicate slot");
    }
  }
  if (seen.size() != width()) throw MapError("label map: slots do not cover every branch column");
}

std::vector<Param*> FusionHead::params() {
  std::vector<Param*> out;
  for (auto& [key, p] : cross) out.push_back(&p);
  out.push_back(&aux);
  return out;
}

std::vector<const Param*> FusionHead::params() const {
  std::vector<const Param*> out;
  for (const auto& [key, p] : cross) out.push_back(&p);
  out.push_back(&aux);
  return out;
}

// ------------------------------------------------------------------ init

namespace {

std::vector<std::vector<ClassId>> branch_label_sets(const ModelBundle& m) {
  std::vector<std::vector<ClassId>> out;
  for (const auto& br : m.branches) out.push_back(br.labels);
  return out;
}

}  // namespace

FusionHead init_fusion(const ModelBundle& m, Pooler pooler, double alpha, double beta, std::uint64_t seed,
                       const FusionHead* warm_start) {
  const std::size_t n = m.branches.size();
  if (n < 2) throw SpecError("init_fusion: need at least 2 branches");
  if (alpha < 0.0 || alpha > 1.0) throw SpecError("init_fusion: alpha must be in [0,1]");
  if (beta < 0.0 || beta > 1.0) throw SpecError("init_fusion: beta must be in [0,1]");
  FusionHead f;
  f.n_branches = n;
  f.pooler = pooler;
  f.alpha = alpha;
  f.beta = beta;
  const auto labels = branch_label_sets(m);
  f.label_map = GlobalLabelMap::build(labels);
  f.label_map.validate();

  Rng rng(derive_seed(seed, 0xf0));
  const std::size_t k = m.feature_dim();
  for (std::size_t d = 0; d < n; ++d) {
    for (std::size_t dp = 0; dp < n; ++dp) {
      if (d == dp) continue;
      Mat w(k, labels[d].size());
      for (auto& v : w.data) v = rng.uniform(-kCrossInitScale, kCrossInitScale);
      f.cross.emplace(std::make_pair(d, dp), Param(std::move(w)));
    }
  }
  Mat aux = Mat::identity(n);
  for (auto& v : aux.data) v += rng.uniform(-kCrossInitScale, kCrossInitScale);
  f.aux = Param(std::move(aux));

  if (warm_start) {
    for (auto& [key, p] : f.cross) {
      const auto it = warm_start->cross.find(key);
      if (it != warm_start->cross.end() && it->second.value.rows == p.value.rows &&
          it->second.value.cols == p.value.cols) {
        p.value = it->second.value;
      }
    }
  }
  return f;
}

// --------------------------------------------------------------- forward

std::vector<double> pool_overlap(std::span<const double> z_a, const GlobalLabelMap& map, Pooler mode) {
  if (z_a.size() != map.width()) throw DimensionError("pool_overlap: z_a width does not match label map");
  std::vector<double> out(map.classes.size());
  for (std::size_t c = 0; c < map.slots.size(); ++c) {
    const auto& slots = map.slots[c];
    if (slots.empty()) throw MapError("pool_overlap: empty map entry");
    if (mode == Pooler::max) {
      double best = z_a[map.offsets[slots[0].branch] + slots[0].local];
      for (std::size_t s = 1; s < slots.size(); ++s) best = std::max(best, z_a[map.offsets[slots[s].branch] + slots[s].local]);
      out[c] = best;
    } else {
      double sum = 0.0;
      for (const auto& s : slots) sum += z_a[map.offsets[s.branch] + s.local];
      out[c] = sum / static_cast<double>(slots.size());
    }
  }
  return out;
}

FusionOutput fused_forward(const FusionHead& f, std::span<const std::span<const double>> features,
                           std::span<const std::span<const double>> logits, bool scale_base) {
  const std::size_t n = f.n_branches;
  if (features.size() != n || logits.size() != n) throw DimensionError("fused_forward: branch count mismatch");
  FusionOutput out;
  out.z.resize(n);
  out.delta.resize(n);
  out.z_tilde.resize(n);
  std::vector<double> scaled;
  for (std::size_t d = 0; d < n; ++d) {
    const std::size_t width = f.label_map.branch_sizes[d];
    if (logits[d].size() != width) throw DimensionError("fused_forward: logit width mismatch");
    out.z[d].assign(logits[d].begin(), logits[d].end());
    out.delta[d].assign(width, 0.0);
    for (std::size_t dp = 0; dp < n; ++dp) {
      if (dp == d) continue;
      const Mat& w = f.cross_weight(d, dp).value;
      std::span<const double> h = features[dp];
      if (h.size() != w.rows) throw DimensionError("fused_forward: feature width mismatch");
      if (d == 0 && scale_base) {
        scaled.assign(h.begin(), h.end());
        for (auto& v : scaled) v *= f.beta;
        h = scaled;
      }
      for (std::size_t r = 0; r < w.rows; ++r) {
        const double hr = h[r];
        const double* wr = w.data.data() + r * w.cols;
        for (std::size_t c = 0; c < width; ++c) out.delta[d][c] += hr * wr[c];
      }
    }
    out.z_tilde[d].resize(width);
    for (std::size_t c = 0; c < width; ++c) out.z_tilde[d][c] = out.z[d][c] + out.delta[d][c];
    out.z_a.insert(out.z_a.end(), out.z_tilde[d].begin(), out.z_tilde[d].end());
  }
  out.pooled = pool_overlap(out.z_a, f.label_map, f.pooler);
  return out;
}

FusionOutput fused_forward(const FusionHead& f, const BranchOutputs& outputs, std::size_t row, bool scale_base) {
  std::vector<std::span<const double>> h, z;
  for (std::size_t d = 0; d < outputs.features.size(); ++d) {
    h.push_back(outputs.features[d].row(row));
    z.push_back(outputs.logits[d].row(row));
  }
  return fused_forward(f, h, z, scale_base);
}

FusionOutput fused_forward(const ModelBundle& m, const FusionHead& f, std::span<const double> x,
                           std::optional<std::uint32_t> train_origin) {
  const Mat row(1, x.size(), std::vector<double>(x.begin(), x.end()));
  return fused_forward(f, compute_outputs(m, row), 0, train_origin.has_value() && *train_origin == 0);
}

// ------------------------------------------------------------------ loss

FusionLoss loss_total(FusionHead& f, const BranchOutputs& outputs, std::span<const std::size_t> rows,
                      std::span<const ClassId> labels, std::span<const std::uint32_t> splits, bool accumulate_grads) {
  const std::size_t n = f.n_branches;
  const std::size_t B = rows.size();
  if (B == 0) throw SpecError("loss_total: empty batch");
  const double alpha = f.alpha;
  const double inv_b = 1.0 / static_cast<double>(B);

  std::vector<FusionOutput> fwd;
  fwd.reserve(B);
  Mat router_in(B, n), router_logits;
  std::vector<std::vector<std::size_t>> arg(B, std::vector<std::size_t>(n));
  std::vector<std::uint32_t> batch_splits(B);
  FusionLoss loss;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t r = rows[i];
    const bool base_sample = splits[r] == 0;
    fwd.push_back(fused_forward(f, outputs, r, base_sample));
    loss.cls += cross_entropy(fwd.back().pooled, f.label_map.class_index(labels[r])) * inv_b;
    for (std::size_t d = 0; d < n; ++d) {
      arg[i][d] = argmax(fwd.back().z_tilde[d]);
      router_in(i, d) = fwd.back().z_tilde[d][arg[i][d]];
    }
    batch_splits[i] = splits[r];
  }
  router_logits = matmul(router_in, f.aux.value);
  Mat drouter(B, n);
  loss.rt = routing_balanced_loss(router_logits, batch_splits, accumulate_grads ? &drouter : nullptr, alpha);
  loss.total = (1.0 - alpha) * loss.cls + alpha * loss.rt;
  if (!std::isfinite(loss.total)) throw NumericError("loss_total: non-finite loss");
  if (!accumulate_grads) return loss;

  // d/d(router_in) and d/d(W_aux).
  const Mat gaux = matmul_tn(router_in, drouter);
  for (std::size_t i = 0; i < gaux.data.size(); ++i) f.aux.grad.data[i] += gaux.data[i];
  const Mat dmax = matmul_nt(drouter, f.aux.value);

  const auto& map = f.label_map;
  std::vector<double> dza(map.width());
  std::vector<double> scaled;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t r = rows[i];
    const auto& o = fwd[i];
    std::fill(dza.begin(), dza.end(), 0.0);
    if (alpha < 1.0) {
      auto g = cross_entropy_grad(o.pooled, map.class_index(labels[r]));
      for (std::size_t c = 0; c < g.size(); ++c) {
        const double gc = g[c] * (1.0 - alpha) * inv_b;
        const auto& slots = map.slots[c];
        if (f.pooler == Pooler::max) {
          // Subgradient to the first slot holding the maximum.
          std::size_t best = 0;
          double best_v = o.z_a[map.offsets[slots[0].branch] + slots[0].local];
          for (std::size_t s = 1; s < slots.size(); ++s) {
            const double v = o.z_a[map.offsets[slots[s].branch] + slots[s].local];
            if (v > best_v) {
              best_v = v;
              best = s;
            }
          }
          dza[map.offsets[slots[best].branch] + slots[best].local] += gc;
        } else {
          const double share = gc / static_cast<double>(slots.size());
          for (const auto& s : slots) dza[map.offsets[s.branch] + s.local] += share;
        }
      }
    }
    for (std::size_t d = 0; d < n; ++d) dza[map.offsets[d] + arg[i][d]] += dmax(i, d);

    const bool base_sample = splits[r] == 0;
    for (std::size_t d = 0; d < n; ++d) {
      const double* dz = dza.data() + map.offsets[d];
      const std::size_t width = map.branch_sizes[d];
      for (std::size_t dp = 0; dp < n; ++dp) {
        if (dp == d) continue;
        Param& w = f.cross_weight(d, dp);
        auto h = outputs.features[dp].row(r);
        const double scale = (d == 0 && base_sample) ? f.beta : 1.0;
        for (std::size_t k = 0; k < w.value.rows; ++k) {
          const double hk = h[k] * scale;
          if (hk == 0.0) continue;
          double* gr = w.grad.data.data() + k * width;
          for (std::size_t c = 0; c < width; ++c) gr[c] += hk * dz[c];
        }
      }
    }
  }
  return loss;
}

// -------------------------------------------------------------- training

namespace {

struct CandidateTable {
  BranchOutputs outputs;
  std::vector<ClassId> labels;
  std::vector<std::uint32_t> splits;
};

CandidateTable tabulate(const ModelBundle& m, const BalancedSampler& sampler) {
  const auto& cand = sampler.candidates();
  for (auto o : cand.origin) {
    if (o >= m.branches.size()) throw SpecError("fusion training sample has origin beyond the branch count");
  }
  return {compute_outputs(m, cand.x), cand.y, cand.origin};
}

template <typename StepFn>
TrainLog run_balanced_epochs(const BalancedSampler& sampler, const SgdConfig& sgd, StepFn&& step) {
  sgd.validate();
  TrainLog log;
  for (std::size_t epoch = 0; epoch < sgd.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& batch : sampler.epoch_batches(epoch, sgd.batch_size)) {
      sum += step(batch, epoch) * static_cast<double>(batch.size());
      count += batch.size();
    }
    const double l = sum / static_cast<double>(count);
    if (!std::isfinite(l)) throw TrainingError("stage-II training diverged");
    log.epoch_loss.push_back(l);
  }
  return log;
}

}  // namespace

FusionHead train_fusion(const FusionHead& f, const BalancedSampler& sampler, const BranchOutputs& candidate_outputs,
                        const FusionTrainConfig& cfg, TrainLog* log) {
  FusionHead out = f;
  auto params = out.params();
  for (Param* p : params) p->zero_grad();
  const auto& cand = sampler.candidates();
  TrainLog l = run_balanced_epochs(sampler, cfg.sgd, [&](const std::vector<std::size_t>& batch, std::size_t epoch) {
    const auto loss = loss_total(out, candidate_outputs, batch, cand.y, cand.origin, true);
    sgd_step(params, epoch, cfg.sgd);
    return loss.total;
  });
  if (log) *log = std::move(l);
  return out;
}

FusionHead train_fusion(const ModelBundle& m, const FusionHead& f, const ExemplarMemory& memory,
                        const LabeledSet& novel, const FusionTrainConfig& cfg, std::uint64_t seed, TrainLog* log) {
  const BalancedSampler sampler(memory, novel, cfg.per_class, derive_seed(seed, 0xf5));
  const auto table = tabulate(m, sampler);
  return train_fusion(f, sampler, table.outputs, cfg, log);
}

std::vector<ClassId> fused_predict(const FusionHead& f, const BranchOutputs& outputs) {
  std::vector<ClassId> out(outputs.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    const auto o = fused_forward(f, outputs, r, false);
    out[r] = f.label_map.classes[argmax(o.pooled)];
  }
  return out;
}

ClassId fused_predict(const ModelBundle& m, const FusionHead& f, std::span<const double> x) {
  const auto o = fused_forward(m, f, x);
  return f.label_map.classes[argmax(o.pooled)];
}

// ------------------------------------------------------------ cat baselines

FeatCatHead featcat_retrain(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                            const FusionTrainConfig& cfg, std::uint64_t seed) {
  const BalancedSampler sampler(memory, novel, cfg.per_class, derive_seed(seed, 0xfc));
  const auto table = tabulate(m, sampler);
  const Mat inputs = hstack(table.outputs.features);
  FeatCatHead head;
  head.labels = m.all_labels();
  Rng rng(derive_seed(seed, 0xfd));
  Mat w(inputs.cols, head.labels.size());
  for (auto& v : w.data) v = rng.uniform(-kCrossInitScale, kCrossInitScale);
  head.weight = Param(std::move(w));
  Param* params[] = {&head.weight};

  run_balanced_epochs(sampler, cfg.sgd, [&](const std::vector<std::size_t>& batch, std::size_t epoch) {
    const Mat xb = select_rows(inputs, batch);
    const Mat z = matmul(xb, head.weight.value);
    Mat dz(z.rows, z.cols);
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto it = std::lower_bound(head.labels.begin(), head.labels.end(), table.labels[batch[i]]);
      const auto y = static_cast<std::size_t>(it - head.labels.begin());
      loss += cross_entropy(z.row(i), y) * inv_b;
      const auto g = cross_entropy_grad(z.row(i), y);
      for (std::size_t c = 0; c < z.cols; ++c) dz(i, c) = g[c] * inv_b;
    }
    const Mat gw = matmul_tn(xb, dz);
    for (std::size_t i = 0; i < gw.data.size(); ++i) head.weight.grad.data[i] += gw.data[i];
    sgd_step(params, epoch, cfg.sgd);
    return loss;
  });
  return head;
}

std::vector<ClassId> featcat_predict(const FeatCatHead& head, const BranchOutputs& outputs) {
  const Mat z = matmul(hstack(outputs.features), head.weight.value);
  std::vector<ClassId> out(z.rows);
  for (std::size_t r = 0; r < z.rows; ++r) out[r] = head.labels[argmax(z.row(r))];
  return out;
}

LogitCatHead logitcat_frozen(const ModelBundle& m, Pooler pooler) {
  LogitCatHead head;
  for (const auto& br : m.branches) head.heads.push_back(br.head);
  for (auto& h : head.heads) h.frozen = false;
  const auto labels = branch_label_sets(m);
  head.label_map = GlobalLabelMap::build(labels);
  head.pooler = pooler;
  return head;
}

namespace {

// Logits z_a for rows of the given per-branch features.
std::vector<Mat> logitcat_branch_logits(const Architecture& arch, const LogitCatHead& head,
                                        std::span<const Mat> features) {
  std::vector<Mat> z;
  for (std::size_t d = 0; d < head.heads.size(); ++d) z.push_back(head_logits(arch, head.heads[d], features[d]));
  return z;
}

std::vector<double> concat_row(std::span<const Mat> z, std::size_t r) {
  std::vector<double> out;
  for (const auto& m : z) out.insert(out.end(), m.row(r).begin(), m.row(r).end());
  return out;
}

void train_logitcat(const ModelBundle& m, LogitCatHead& head, const ExemplarMemory& memory, const LabeledSet& novel,
                    const FusionTrainConfig& cfg, std::uint64_t seed) {
  const BalancedSampler sampler(memory, novel, cfg.per_class, derive_seed(seed, 0x1c));
  const auto table = tabulate(m, sampler);
  std::vector<Param*> params;
  for (auto& h : head.heads) {
    h.grad = Mat(h.value.rows, h.value.cols);
    params.push_back(&h);
  }
  const auto& map = head.label_map;
  run_balanced_epochs(sampler, cfg.sgd, [&](const std::vector<std::size_t>& batch, std::size_t epoch) {
    std::vector<Mat> feats;
    for (const auto& f : table.outputs.features) feats.push_back(select_rows(f, batch));
    const auto z = logitcat_branch_logits(m.arch, head, feats);
    std::vector<Mat> dz;
    for (const auto& zd : z) dz.emplace_back(zd.rows, zd.cols);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto za = concat_row(z, i);
      const auto pooled = pool_overlap(za, map, head.pooler);
      const auto y = map.class_index(table.labels[batch[i]]);
      loss += cross_entropy(pooled, y) * inv_b;
      const auto g = cross_entropy_grad(pooled, y);
      for (std::size_t c = 0; c < g.size(); ++c) {
        const auto& slots = map.slots[c];
        if (head.pooler == Pooler::max) {
          std::size_t best = 0;
          for (std::size_t s = 1; s < slots.size(); ++s) {
            if (za[map.offsets[slots[s].branch] + slots[s].local] > za[map.offsets[slots[best].branch] + slots[best].local])
              best = s;
          }
          dz[slots[best].branch](i, slots[best].local) += g[c] * inv_b;
        } else {
          for (const auto& s : slots) dz[s.branch](i, s.local) += g[c] * inv_b / static_cast<double>(slots.size());
        }
      }
    }
    for (std::size_t d = 0; d < head.heads.size(); ++d) {
      head_backward(m.arch, head.heads[d], feats[d], dz[d], &head.heads[d].grad, nullptr);
    }
    sgd_step(params, epoch, cfg.sgd);
    return loss;
  });
}

}  // namespace

LogitCatHead logitcat_retrain(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                              const FusionTrainConfig& cfg, std::uint64_t seed) {
  LogitCatHead head = logitcat_frozen(m);
  Rng rng(derive_seed(seed, 0x1d));
  for (std::size_t d = 0; d < head.heads.size(); ++d) {
    head.heads[d] = init_head(m.feature_dim(), m.branches[d].labels.size(), rng);
  }
  train_logitcat(m, head, memory, novel, cfg, seed);
  return head;
}

LogitCatHead logitcat_finetune(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                               const FusionTrainConfig& cfg, std::uint64_t seed) {
  LogitCatHead head = logitcat_frozen(m);
  train_logitcat(m, head, memory, novel, cfg, seed);
  return head;
}

std::vector<ClassId> logitcat_predict(const Architecture& arch, const LogitCatHead& head, const BranchOutputs& outputs) {
  const auto z = logitcat_branch_logits(arch, head, outputs.features);
  std::vector<ClassId> out(outputs.rows());
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = head.label_map.classes[argmax(pool_overlap(concat_row(z, r), head.label_map, head.pooler))];
  }
  return out;
}

}  // namespace cilfuse
