#include "cilfuse/routing.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "cilfuse/errors.hpp"
#include "cilfuse/rng.hpp"

namespace cilfuse {

double routing_balanced_loss(const Mat& logits, std::span<const std::uint32_t> splits, Mat* dlogits,
                             double grad_scale) {
  if (splits.size() != logits.rows) throw DimensionError("routing_balanced_loss: split count mismatch");
  std::map<std::uint32_t, std::size_t> counts;
  for (auto s : splits) {
    if (s >= logits.cols) throw IndexError("routing_balanced_loss: split label out of range");
    ++counts[s];
  }
  if (counts.empty()) return 0.0;
  const double n_splits = static_cast<double>(counts.size());
  std::map<std::uint32_t, double> split_sum;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto s = splits[r];
    const double w = 1.0 / (n_splits * static_cast<double>(counts[s]));
    split_sum[s] += cross_entropy(logits.row(r), s);
    if (dlogits) {
      const auto g = cross_entropy_grad(logits.row(r), s);
      for (std::size_t c = 0; c < logits.cols; ++c) (*dlogits)(r, c) += grad_scale * w * g[c];
    }
  }
  double loss = 0.0;
  for (const auto& [s, sum] : split_sum) loss += sum / static_cast<double>(counts[s]);
  return loss / n_splits;
}

std::size_t confidence_route(const BranchOutputs& outputs, std::size_t row) {
  if (outputs.logits.empty()) throw SpecError("confidence_route: no branches");
  std::size_t best = 0;
  double best_conf = -1.0;
  for (std::size_t d = 0; d < outputs.logits.size(); ++d) {
    const auto p = softmax(outputs.logits[d].row(row));
    const double conf = *std::max_element(p.begin(), p.end());
    if (conf > best_conf) {
      best_conf = conf;
      best = d;
    }
  }
  return best;
}

std::size_t confidence_route(const ModelBundle& m, std::span<const double> x) {
  const Mat row(1, x.size(), std::vector<double>(x.begin(), x.end()));
  return confidence_route(compute_outputs(m, row), 0);
}

Mat routing_inputs(const BranchOutputs& outputs) { return hstack(outputs.features); }

Router train_learned_router(const ModelBundle& m, const ExemplarMemory& memory, const LabeledSet& novel,
                            const SgdConfig& cfg, std::uint64_t seed, const LabeledSet* oracle_data, TrainLog* log) {
  cfg.validate();
  const std::size_t nb = m.branches.size();
  if (nb < 2) throw SpecError("train_learned_router: need at least 2 branches");
  LabeledSet data;
  if (oracle_data) {
    data = *oracle_data;
  } else {
    data = memory.to_set();
    data.append(novel);
  }
  if (data.empty()) throw SpecError("train_learned_router: no training data");

  Router r;
  r.mode = oracle_data ? RouterMode::oracle : RouterMode::learned;
  r.n_branches = nb;
  const Mat inputs = routing_inputs(compute_outputs(m, data.x));
  Rng init(derive_seed(seed, 0x70));
  Mat w(inputs.cols, nb);
  for (auto& v : w.data) v = init.uniform(-1e-3, 1e-3);
  r.weight = Param(std::move(w));

  // Per-sample weights reproduce the split-balanced loss over the whole set;
  // they average to 1 so minibatch means stay on the same scale.
  std::map<std::uint32_t, std::size_t> counts;
  for (auto s : data.origin) {
    if (s >= nb) throw SpecError("train_learned_router: sample origin beyond branch count");
    ++counts[s];
  }
  std::vector<double> weight(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    weight[i] = static_cast<double>(data.size()) /
                (static_cast<double>(counts.size()) * static_cast<double>(counts[data.origin[i]]));
  }

  std::vector<std::size_t> order(data.size());
  Param* params[] = {&r.weight};
  TrainLog l;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, 0x71, epoch));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), s + cfg.batch_size);
      const double bsz = static_cast<double>(e - s);
      const std::span<const std::size_t> idx(order.data() + s, e - s);
      const Mat xb = select_rows(inputs, idx);
      const Mat z = matmul(xb, r.weight.value);
      Mat dz(z.rows, z.cols);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto target = data.origin[idx[i]];
        const double wi = weight[idx[i]] / bsz;
        epoch_loss += weight[idx[i]] * cross_entropy(z.row(i), target);
        const auto g = cross_entropy_grad(z.row(i), target);
        for (std::size_t c = 0; c < z.cols; ++c) dz(i, c) = wi * g[c];
      }
      const Mat gw = matmul_tn(xb, dz);
      for (std::size_t i = 0; i < gw.data.size(); ++i) r.weight.grad.data[i] += gw.data[i];
      sgd_step(params, epoch, cfg);
    }
    epoch_loss /= static_cast<double>(data.size());
    if (!std::isfinite(epoch_loss)) throw TrainingError("router training diverged");
    l.epoch_loss.push_back(epoch_loss);
  }
  if (log) *log = std::move(l);
  return r;
}

std::vector<std::size_t> route(const Router& router, const BranchOutputs& outputs) {
  const std::size_t n = outputs.rows();
  std::vector<std::size_t> out(n, 0);
  if (outputs.features.size() == 1) return out;
  if (router.mode == RouterMode::confidence) {
    for (std::size_t r = 0; r < n; ++r) out[r] = confidence_route(outputs, r);
    return out;
  }
  if (router.n_branches != outputs.features.size()) throw SpecError("route: router/branch count mismatch");
  const Mat z = matmul(routing_inputs(outputs), router.weight.value);
  for (std::size_t r = 0; r < n; ++r) out[r] = argmax(z.row(r));
  return out;
}

std::vector<ClassId> routed_predict(const ModelBundle& m, const Router& router, const BranchOutputs& outputs) {
  const auto branch = route(router, outputs);
  std::vector<ClassId> out(branch.size());
  for (std::size_t r = 0; r < branch.size(); ++r) {
    const std::size_t d = branch[r];
    out[r] = m.branches[d].labels[argmax(outputs.logits[d].row(r))];
  }
  return out;
}

ClassId routed_predict(const ModelBundle& m, const Router& router, std::span<const double> x) {
  const Mat row(1, x.size(), std::vector<double>(x.begin(), x.end()));
  return routed_predict(m, router, compute_outputs(m, row)).front();
}

double routing_accuracy(const Router& router, const BranchOutputs& outputs, std::span<const std::uint32_t> splits) {
  const auto branch = route(router, outputs);
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> tally;  // split -> (correct, total)
  for (std::size_t r = 0; r < branch.size(); ++r) {
    auto& t = tally[splits[r]];
    t.first += branch[r] == splits[r];
    ++t.second;
  }
  if (tally.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& [s, t] : tally) acc += static_cast<double>(t.first) / static_cast<double>(t.second);
  return acc / static_cast<double>(tally.size());
}

}  // namespace cilfuse
