#include "cilfuse/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "cilfuse/errors.hpp"

namespace cilfuse {

std::size_t Branch::local_index(ClassId c) const {
  const auto it = std::lower_bound(labels.begin(), labels.end(), c);
  if (it == labels.end() || *it != c) {
    throw LookupError("branch " + id + " has no class " + std::to_string(c));
  }
  return static_cast<std::size_t>(it - labels.begin());
}

void Architecture::validate() const {
  if (input_dim < 1) throw SpecError("Architecture: input_dim must be >= 1");
  if (branch_widths.empty()) throw SpecError("Architecture: branch needs at least one block");
  for (auto w : trunk_widths)
    if (w < 1) throw SpecError("Architecture: zero-width trunk block");
  for (auto w : branch_widths)
    if (w < 1) throw SpecError("Architecture: zero-width branch block");
  if (!(cosine_scale > 0.0)) throw SpecError("Architecture: cosine_scale must be > 0");
}

std::size_t ModelBundle::branch_index(std::string_view id) const {
  for (std::size_t i = 0; i < branches.size(); ++i)
    if (branches[i].id == id) return i;
  throw LookupError("unknown branch '" + std::string(id) + "'");
}

std::vector<const Param*> ModelBundle::params() const {
  std::vector<const Param*> out;
  for (const auto& b : trunk) {
    out.push_back(&b.weight);
    out.push_back(&b.bias);
  }
  for (const auto& br : branches) {
    for (const auto& b : br.blocks) {
      out.push_back(&b.weight);
      out.push_back(&b.bias);
    }
    out.push_back(&br.head);
  }
  return out;
}

std::vector<Param*> ModelBundle::params() {
  std::vector<Param*> out;
  for (const Param* p : std::as_const(*this).params()) out.push_back(const_cast<Param*>(p));
  return out;
}

std::vector<ClassId> ModelBundle::all_labels() const {
  std::vector<ClassId> out;
  for (const auto& br : branches) out.insert(out.end(), br.labels.begin(), br.labels.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// --------------------------------------------------------------------- init

namespace {

Block make_block(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  Mat w(in, out);
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  return {Param(std::move(w)), Param(Mat(1, out))};
}

std::vector<Block> make_blocks(std::size_t in, std::span<const std::size_t> widths, Rng& rng) {
  std::vector<Block> blocks;
  for (auto w : widths) {
    blocks.push_back(make_block(in, w, rng));
    in = w;
  }
  return blocks;
}

void set_frozen(std::vector<Block>& blocks, bool frozen) {
  for (auto& b : blocks) {
    b.weight.frozen = frozen;
    b.bias.frozen = frozen;
  }
}

}  // namespace

Param init_head(std::size_t feature_dim, std::size_t n_classes, Rng& rng) {
  std::vector<double> shared(feature_dim);
  for (auto& v : shared) v = rng.uniform(-1.0, 1.0);
  Mat w(feature_dim, n_classes);
  for (std::size_t r = 0; r < feature_dim; ++r)
    for (std::size_t c = 0; c < n_classes; ++c) w(r, c) = shared[r] + 0.01 * rng.uniform(-1.0, 1.0);
  return Param(std::move(w));
}

ModelBundle init_bundle(const Architecture& arch, std::span<const ClassId> base_labels, std::uint64_t seed) {
  arch.validate();
  if (base_labels.empty()) throw SpecError("init_bundle: empty base label set");
  Rng rng(derive_seed(seed, 0xb0));
  ModelBundle m;
  m.arch = arch;
  m.trunk = make_blocks(arch.input_dim, arch.trunk_widths, rng);
  const std::size_t trunk_out = arch.trunk_widths.empty() ? arch.input_dim : arch.trunk_widths.back();
  Branch b;
  b.id = "b";
  b.blocks = make_blocks(trunk_out, arch.branch_widths, rng);
  b.labels.assign(base_labels.begin(), base_labels.end());
  std::sort(b.labels.begin(), b.labels.end());
  b.head = init_head(arch.feature_dim(), b.labels.size(), rng);
  m.branches.push_back(std::move(b));
  return m;
}

// ----------------------------------------------------------------- forward

namespace {

void block_forward(const Block& b, const Mat& in, Mat& pre, Mat& out) {
  pre = matmul(in, b.weight.value);
  const auto& bias = b.bias.value.data;
  for (std::size_t r = 0; r < pre.rows; ++r) {
    auto row = pre.row(r);
    for (std::size_t c = 0; c < pre.cols; ++c) row[c] += bias[c];
  }
  out = pre;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
}

Mat run_blocks(std::span<const Block> blocks, Mat x) {
  Mat pre, out;
  for (const auto& b : blocks) {
    block_forward(b, x, pre, out);
    x = std::move(out);
  }
  return x;
}

}  // namespace

Mat trunk_forward(const ModelBundle& m, const Mat& x) {
  if (x.cols != m.arch.input_dim) throw DimensionError("trunk_forward: input width mismatch");
  return run_blocks(m.trunk, x);
}

Mat branch_features(const ModelBundle& m, const Mat& trunk_out, std::size_t branch) {
  Mat h = run_blocks(m.branches.at(branch).blocks, trunk_out);
  if (m.arch.normalize) l2_normalize_rows(h);
  return h;
}

Mat extract_features(const ModelBundle& m, const Mat& x, std::string_view branch_id) {
  const std::size_t d = m.branch_index(branch_id);
  return branch_features(m, trunk_forward(m, x), d);
}

Mat head_logits(const Architecture& arch, const Param& head, const Mat& features) {
  if (features.cols != head.value.rows) throw DimensionError("head_logits: feature width mismatch");
  if (!arch.normalize) return matmul(features, head.value);
  Mat hn = features;
  l2_normalize_rows(hn);
  Mat wn = head.value;
  for (std::size_t c = 0; c < wn.cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < wn.rows; ++r) s += wn(r, c) * wn(r, c);
    const double n = std::sqrt(s);
    if (n > kNormEpsilon)
      for (std::size_t r = 0; r < wn.rows; ++r) wn(r, c) /= n;
  }
  Mat z = matmul(hn, wn);
  for (auto& v : z.data) v *= arch.cosine_scale;
  return z;
}

void head_backward(const Architecture& arch, const Param& head, const Mat& features, const Mat& dlogits, Mat* dhead,
                   Mat* dfeatures) {
  const Mat& w = head.value;
  if (!arch.normalize) {
    if (dhead) {
      const Mat g = matmul_tn(features, dlogits);
      for (std::size_t i = 0; i < g.data.size(); ++i) dhead->data[i] += g.data[i];
    }
    if (dfeatures) *dfeatures = matmul_nt(dlogits, w);
    return;
  }
  const double s = arch.cosine_scale;
  Mat hn = features;
  std::vector<double> row_norm(features.rows);
  for (std::size_t r = 0; r < features.rows; ++r) {
    row_norm[r] = l2_norm(features.row(r));
    if (row_norm[r] > kNormEpsilon)
      for (auto& v : hn.row(r)) v /= row_norm[r];
  }
  Mat wn = w;
  std::vector<double> col_norm(w.cols);
  for (std::size_t c = 0; c < w.cols; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < w.rows; ++r) acc += w(r, c) * w(r, c);
    col_norm[c] = std::sqrt(acc);
    if (col_norm[c] > kNormEpsilon)
      for (std::size_t r = 0; r < w.rows; ++r) wn(r, c) /= col_norm[c];
  }
  if (dhead) {
    Mat dwn = matmul_tn(hn, dlogits);  // k × C
    for (std::size_t c = 0; c < w.cols; ++c) {
      double dot = 0.0;
      for (std::size_t r = 0; r < w.rows; ++r) dot += wn(r, c) * dwn(r, c);
      for (std::size_t r = 0; r < w.rows; ++r) {
        double g = s * dwn(r, c);
        if (col_norm[c] > kNormEpsilon) g = s * (dwn(r, c) - dot * wn(r, c)) / col_norm[c];
        (*dhead)(r, c) += g;
      }
    }
  }
  if (dfeatures) {
    Mat dhn = matmul_nt(dlogits, wn);  // B × k
    for (auto& v : dhn.data) v *= s;
    for (std::size_t r = 0; r < features.rows; ++r) {
      if (row_norm[r] <= kNormEpsilon) continue;
      auto g = dhn.row(r);
      const auto hrow = hn.row(r);
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += hrow[i] * g[i];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - dot * hrow[i]) / row_norm[r];
    }
    *dfeatures = std::move(dhn);
  }
}

BranchOutputs compute_outputs(const ModelBundle& m, const Mat& x) {
  BranchOutputs out;
  const Mat t = trunk_forward(m, x);
  for (std::size_t d = 0; d < m.branches.size(); ++d) {
    out.features.push_back(branch_features(m, t, d));
    out.logits.push_back(head_logits(m.arch, m.branches[d].head, out.features.back()));
  }
  return out;
}

std::vector<ClassId> branch_predict(const ModelBundle& m, const Mat& x, std::size_t branch) {
  const Mat h = branch_features(m, trunk_forward(m, x), branch);
  const Mat z = head_logits(m.arch, m.branches.at(branch).head, h);
  std::vector<ClassId> out(z.rows);
  for (std::size_t r = 0; r < z.rows; ++r) out[r] = m.branches[branch].labels[argmax(z.row(r))];
  return out;
}

// ----------------------------------------------------------------- training

namespace {

std::vector<std::size_t> local_targets(const LabeledSet& data, std::span<const ClassId> labels) {
  std::vector<std::size_t> t(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto it = std::lower_bound(labels.begin(), labels.end(), data.y[i]);
    if (it == labels.end() || *it != data.y[i]) {
      throw SpecError("training data label " + std::to_string(data.y[i]) + " outside the head's label set");
    }
    t[i] = static_cast<std::size_t>(it - labels.begin());
  }
  return t;
}

// Trains blocks[first_trainable..] and the head with cross-entropy. Blocks
// below first_trainable are evaluated once and never touched.
TrainLog train_path(std::span<Block* const> blocks, std::size_t first_trainable, Param& head,
                    const Architecture& arch, const Mat& x, std::span<const std::size_t> targets,
                    const SgdConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TrainLog log;
  if (x.rows == 0) throw SpecError("train_path: empty training set");

  Mat base = x;
  for (std::size_t l = 0; l < first_trainable; ++l) {
    Mat pre, out;
    block_forward(*blocks[l], base, pre, out);
    base = std::move(out);
  }
  std::vector<Block*> live(blocks.begin() + static_cast<std::ptrdiff_t>(first_trainable), blocks.end());
  std::vector<Param*> params;
  for (Block* b : live) {
    params.push_back(&b->weight);
    params.push_back(&b->bias);
  }
  params.push_back(&head);
  for (Param* p : params) {
    if (p->grad.rows != p->value.rows || p->grad.cols != p->value.cols) p->grad = Mat(p->value.rows, p->value.cols);
    p->zero_grad();
  }

  const std::size_t n = base.rows;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t L = live.size();
  std::vector<Mat> acts(L + 1), pres(L);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, 0xe0, epoch));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const double bsz = static_cast<double>(idx.size());
      acts[0] = select_rows(base, idx);
      for (std::size_t l = 0; l < L; ++l) block_forward(*live[l], acts[l], pres[l], acts[l + 1]);
      const Mat& h = acts[L];
      const Mat z = head_logits(arch, head, h);
      Mat dz(z.rows, z.cols);
      for (std::size_t r = 0; r < z.rows; ++r) {
        const std::size_t y = targets[idx[r]];
        loss_sum += cross_entropy(z.row(r), y);
        const auto g = cross_entropy_grad(z.row(r), y);
        for (std::size_t c = 0; c < z.cols; ++c) dz(r, c) = g[c] / bsz;
      }
      Mat dh;
      head_backward(arch, head, h, dz, head.frozen ? nullptr : &head.grad, L > 0 ? &dh : nullptr);
      for (std::size_t l = L; l-- > 0;) {
        Block& b = *live[l];
        for (std::size_t i = 0; i < dh.data.size(); ++i)
          if (pres[l].data[i] <= 0.0) dh.data[i] = 0.0;
        if (!b.weight.frozen) {
          const Mat gw = matmul_tn(acts[l], dh);
          for (std::size_t i = 0; i < gw.data.size(); ++i) b.weight.grad.data[i] += gw.data[i];
        }
        if (!b.bias.frozen) {
          for (std::size_t r = 0; r < dh.rows; ++r)
            for (std::size_t c = 0; c < dh.cols; ++c) b.bias.grad.data[c] += dh(r, c);
        }
        if (l > 0) dh = matmul_nt(dh, b.weight.value);
      }
      sgd_step(params, epoch, cfg);
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss)) throw TrainingError("training diverged (non-finite loss)");
    log.epoch_loss.push_back(epoch_loss);
  }
  for (Param* p : params) {
    if (!all_finite(p->value)) throw TrainingError("training produced non-finite parameters");
  }
  return log;
}

double path_accuracy(std::span<const Block> trunk, std::span<const Block> branch, const Param& head,
                     const Architecture& arch, std::span<const ClassId> labels, const LabeledSet& eval) {
  if (eval.empty()) return 0.0;
  Mat h = run_blocks(branch, run_blocks(trunk, eval.x));
  const Mat z = head_logits(arch, head, h);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < z.rows; ++r) correct += labels[argmax(z.row(r))] == eval.y[r];
  return static_cast<double>(correct) / static_cast<double>(z.rows);
}

}  // namespace

ModelBundle pretrain_base(const LabeledSet& data, const Architecture& arch, const SgdConfig& cfg, std::uint64_t seed,
                          TrainLog* log) {
  data.validate();
  if (data.empty()) throw SpecError("pretrain_base: empty data");
  Architecture a = arch;
  a.input_dim = data.dim();
  const auto labels = data.labels();
  ModelBundle m = init_bundle(a, labels, seed);
  std::vector<Block*> path;
  for (auto& b : m.trunk) path.push_back(&b);
  for (auto& b : m.branches[0].blocks) path.push_back(&b);
  const auto targets = local_targets(data, m.branches[0].labels);
  TrainLog l = train_path(path, 0, m.branches[0].head, m.arch, data.x, targets, cfg, derive_seed(seed, 0xa1));
  if (log) *log = std::move(l);
  return m;
}

ModelBundle add_branch_stage1(const ModelBundle& m, const LabeledSet& novel, const SgdConfig& cfg, std::uint64_t seed,
                              TrainLog* log) {
  if (novel.empty()) throw SpecError("add_branch_stage1: empty novel set");
  if (m.branches.empty()) throw SpecError("add_branch_stage1: model has no base branch");
  ModelBundle out = m;
  set_frozen(out.trunk, true);
  for (auto& br : out.branches) {
    set_frozen(br.blocks, true);
    br.head.frozen = true;
  }
  Branch nb;
  nb.id = "n" + std::to_string(out.branches.size());
  nb.blocks = out.branches[0].blocks;  // clone Φ_b
  set_frozen(nb.blocks, false);
  nb.labels = novel.labels();
  Rng rng(derive_seed(seed, 0xc1));
  nb.head = init_head(m.feature_dim(), nb.labels.size(), rng);
  out.branches.push_back(std::move(nb));

  Branch& br = out.branches.back();
  const Mat trunk_out = trunk_forward(out, novel.x);
  std::vector<Block*> path;
  for (auto& b : br.blocks) path.push_back(&b);
  const auto targets = local_targets(novel, br.labels);
  TrainLog l = train_path(path, 0, br.head, out.arch, trunk_out, targets, cfg, derive_seed(seed, 0xc2));
  if (log) *log = std::move(l);
  return out;
}

FinetuneResult finetune_k_blocks(const ModelBundle& m, const LabeledSet& novel_train, const LabeledSet& novel_eval,
                                 std::size_t k_blocks, const SgdConfig& cfg, std::uint64_t seed) {
  if (novel_train.empty()) throw SpecError("finetune_k_blocks: empty novel set");
  const auto& base = m.branches.at(0);
  const std::size_t total = m.trunk.size() + base.blocks.size();
  if (k_blocks > total) throw SpecError("finetune_k_blocks: k_blocks exceeds block count");

  FinetuneResult res;
  ModelBundle& out = res.model;
  out.arch = m.arch;
  out.trunk = m.trunk;
  Branch ft;
  ft.id = "ft";
  ft.blocks = base.blocks;
  ft.labels = novel_train.labels();
  Rng rng(derive_seed(seed, 0xf1));
  ft.head = init_head(m.feature_dim(), ft.labels.size(), rng);
  out.branches.push_back(std::move(ft));

  std::vector<Block*> path;
  for (auto& b : out.trunk) path.push_back(&b);
  for (auto& b : out.branches[0].blocks) path.push_back(&b);
  const std::size_t first = total - k_blocks;
  for (std::size_t l = 0; l < total; ++l) {
    path[l]->weight.frozen = l < first;
    path[l]->bias.frozen = l < first;
  }
  const auto targets = local_targets(novel_train, out.branches[0].labels);
  train_path(path, first, out.branches[0].head, out.arch, novel_train.x, targets, cfg, derive_seed(seed, 0xf2));
  res.novel_accuracy =
      path_accuracy(out.trunk, out.branches[0].blocks, out.branches[0].head, out.arch, out.branches[0].labels, novel_eval);
  return res;
}

ModelBundle full_finetune_baseline(const ModelBundle& m, const LabeledSet& novel, std::span<const ClassId> all_labels,
                                   const SgdConfig& cfg, std::uint64_t seed, TrainLog* log) {
  if (m.branches.empty()) throw SpecError("full_finetune_baseline: model has no base branch");
  ModelBundle out;
  out.arch = m.arch;
  out.trunk = m.trunk;
  set_frozen(out.trunk, false);
  Branch ft;
  ft.id = "ft";
  ft.blocks = m.branches[0].blocks;
  set_frozen(ft.blocks, false);
  ft.labels.assign(all_labels.begin(), all_labels.end());
  std::sort(ft.labels.begin(), ft.labels.end());
  Rng rng(derive_seed(seed, 0xd1));
  ft.head = init_head(m.feature_dim(), ft.labels.size(), rng);
  out.branches.push_back(std::move(ft));
  if (novel.empty()) return out;

  std::vector<Block*> path;
  for (auto& b : out.trunk) path.push_back(&b);
  for (auto& b : out.branches[0].blocks) path.push_back(&b);
  const auto targets = local_targets(novel, out.branches[0].labels);
  TrainLog l = train_path(path, 0, out.branches[0].head, out.arch, novel.x, targets, cfg, derive_seed(seed, 0xd2));
  if (log) *log = std::move(l);
  return out;
}

std::uint64_t hash_params(std::span<const Param* const> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data.data());
    const std::size_t n = p->value.data.size() * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
    h ^= p->value.rows * 0x9e3779b97f4a7c15ULL;
    h ^= p->value.cols;
  }
  return h;
}

}  // namespace cilfuse
