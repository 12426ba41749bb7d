#include "cilfuse/synth_data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "cilfuse/errors.hpp"
#include "cilfuse/rng.hpp"

namespace cilfuse {

// ---------------------------------------------------------------- LabeledSet

void ClassGen::validate() const {
  if (components.empty()) throw SpecError("ClassGen: no components");
  double total = 0.0;
  for (const auto& c : components) {
    if (c.mean.size() != dim()) throw DimensionError("ClassGen: component dimension mismatch");
    if (c.stddev < 0.0) throw SpecError("ClassGen: negative stddev");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw SpecError("ClassGen: component weights must sum to 1");
}

void LabeledSet::push_back(std::span<const double> row, ClassId label, std::uint32_t origin_step, std::uint32_t comp) {
  if (x.rows == 0 && x.cols == 0) x.cols = row.size();
  if (row.size() != x.cols) throw DimensionError("LabeledSet: row width mismatch");
  x.data.insert(x.data.end(), row.begin(), row.end());
  ++x.rows;
  y.push_back(label);
  origin.push_back(origin_step);
  component.push_back(comp);
}

void LabeledSet::append(const LabeledSet& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    push_back(other.x.row(i), other.y[i], other.origin[i], other.component[i]);
  }
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  LabeledSet out(dim());
  for (std::size_t i : indices) {
    if (i >= size()) throw IndexError("LabeledSet::subset: index out of range");
    out.push_back(x.row(i), y[i], origin[i], component[i]);
  }
  return out;
}

LabeledSet LabeledSet::of_class(ClassId label) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i)
    if (y[i] == label) idx.push_back(i);
  return subset(idx);
}

std::vector<ClassId> LabeledSet::labels() const {
  std::vector<ClassId> out(y.begin(), y.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void LabeledSet::validate() const {
  if (x.rows != y.size() || origin.size() != y.size() || component.size() != y.size()) {
    throw DimensionError("LabeledSet: inconsistent lengths");
  }
  if (x.data.size() != x.rows * x.cols) throw DimensionError("LabeledSet: matrix storage mismatch");
}

// ------------------------------------------------------------------- strings

std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::disjoint: return "disjoint";
    case ScenarioKind::overlap_random: return "overlap_random";
    case ScenarioKind::overlap_domain: return "overlap_domain";
    case ScenarioKind::overlap_style: return "overlap_style";
    case ScenarioKind::full_overlap: return "full_overlap";
  }
  return "disjoint";
}

std::string to_string(SampleSplit s) { return s == SampleSplit::random ? "random" : "cluster"; }

ScenarioKind scenario_kind_from_string(const std::string& s) {
  for (auto k : {ScenarioKind::disjoint, ScenarioKind::overlap_random, ScenarioKind::overlap_domain,
                 ScenarioKind::overlap_style, ScenarioKind::full_overlap}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown scenario kind '" + s + "'");
}

SampleSplit sample_split_from_string(const std::string& s) {
  if (s == "random") return SampleSplit::random;
  if (s == "cluster") return SampleSplit::cluster;
  throw ConfigError("unknown sample split '" + s + "'");
}

// ---------------------------------------------------------------------- spec

void ScenarioSpec::validate() const {
  if (dim < 1) throw SpecError("ScenarioSpec: dim must be >= 1");
  if (n_base_classes < 2) throw SpecError("ScenarioSpec: need at least 2 base classes");
  if (novel_steps.empty()) throw SpecError("ScenarioSpec: need at least one novel step");
  if (per_class_train < 1 || per_class_val < 1 || per_class_test < 1) {
    throw SpecError("ScenarioSpec: per-class counts must be >= 1");
  }
  if (!(stddev > 0.0)) throw SpecError("ScenarioSpec: stddev must be > 0");
  for (auto s : novel_steps)
    if (s < 1) throw SpecError("ScenarioSpec: empty novel step");
  switch (kind) {
    case ScenarioKind::disjoint: break;
    case ScenarioKind::overlap_random:
    case ScenarioKind::overlap_domain:
    case ScenarioKind::overlap_style:
      for (auto s : novel_steps) {
        if (n_overlap > s) throw SpecError("ScenarioSpec: n_overlap exceeds a novel step size");
      }
      if (n_overlap * novel_steps.size() > n_base_classes) {
        throw SpecError("ScenarioSpec: not enough base classes for distinct overlap classes per step");
      }
      if (kind == ScenarioKind::overlap_style && per_class_train < 2) {
        throw SpecError("ScenarioSpec: style split needs >= 2 training samples per class");
      }
      break;
    case ScenarioKind::full_overlap: {
      const auto total = std::accumulate(novel_steps.begin(), novel_steps.end(), std::size_t{0});
      if (total > n_base_classes) throw SpecError("ScenarioSpec: full overlap needs novel classes within base");
      break;
    }
  }
  if (kind != ScenarioKind::disjoint && kind != ScenarioKind::overlap_style && per_class_train < 2) {
    throw SpecError("ScenarioSpec: overlap splitting needs >= 2 training samples per class");
  }
}

// ------------------------------------------------------------------ scenario

std::vector<ClassId> Scenario::labels_up_to(std::size_t t) const {
  std::set<ClassId> all;
  for (std::size_t s = 0; s <= t && s < steps.size(); ++s) all.insert(steps[s].labels.begin(), steps[s].labels.end());
  return {all.begin(), all.end()};
}

std::vector<ClassId> Scenario::overlap_labels(std::size_t t) const {
  std::vector<ClassId> out;
  if (t == 0 || t >= steps.size()) return out;
  std::set_intersection(steps[0].labels.begin(), steps[0].labels.end(), steps[t].labels.begin(),
                        steps[t].labels.end(), std::back_inserter(out));
  return out;
}

LabeledSet Scenario::val_up_to(std::size_t t) const {
  LabeledSet out(spec.dim);
  for (std::size_t s = 0; s <= t && s < steps.size(); ++s) out.append(steps[s].val);
  return out;
}

LabeledSet Scenario::test_up_to(std::size_t t) const {
  LabeledSet out(spec.dim);
  for (std::size_t s = 0; s <= t && s < steps.size(); ++s) out.append(steps[s].test);
  return out;
}

std::vector<std::vector<ClassId>> Scenario::step_label_sets(std::size_t t) const {
  std::vector<std::vector<ClassId>> out;
  for (std::size_t s = 0; s <= t && s < steps.size(); ++s) out.push_back(steps[s].labels);
  return out;
}

// ----------------------------------------------------------------- generator

namespace {

constexpr std::size_t kMaxMeanAttempts = 10000;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Appends one mean to `accepted` by rejection sampling. sign > 0 forces the
// first coordinate positive, sign < 0 negative.
std::vector<double> draw_mean(std::vector<std::vector<double>>& accepted, std::size_t dim, double spacing, Rng& rng,
                              int sign = 0) {
  const double min_sq = spacing * spacing;
  for (std::size_t attempt = 0; attempt < kMaxMeanAttempts; ++attempt) {
    std::vector<double> m(dim);
    for (auto& v : m) v = rng.uniform(-1.0, 1.0);
    if (sign > 0) m[0] = std::abs(m[0]);
    if (sign < 0) m[0] = -std::abs(m[0]);
    if (sign != 0 && m[0] == 0.0) continue;
    const bool ok = std::all_of(accepted.begin(), accepted.end(),
                                [&](const std::vector<double>& o) { return sq_dist(m, o) >= min_sq; });
    if (ok) {
      accepted.push_back(m);
      return m;
    }
  }
  throw GenerationError("cannot place class mean with spacing " + std::to_string(spacing) + " after " +
                        std::to_string(kMaxMeanAttempts) + " attempts");
}

void draw_sample(const MixtureComponent& comp, Rng& rng, std::vector<double>& row) {
  row.resize(comp.mean.size());
  for (std::size_t d = 0; d < row.size(); ++d) row[d] = comp.mean[d] + comp.stddev * rng.normal();
}

std::uint32_t pick_component(const ClassGen& gen, Rng& rng) {
  if (gen.components.size() == 1) return 0;
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t c = 0; c < gen.components.size(); ++c) {
    acc += gen.components[c].weight;
    if (u < acc) return static_cast<std::uint32_t>(c);
  }
  return static_cast<std::uint32_t>(gen.components.size() - 1);
}

// Draws `count` rows from one class; `forced` pins the mixture component.
void sample_class(const ClassGen& gen, std::size_t count, Rng& rng, std::uint32_t origin, LabeledSet& out,
                  std::optional<std::uint32_t> forced = std::nullopt) {
  std::vector<double> row;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t c = forced ? *forced : pick_component(gen, rng);
    draw_sample(gen.components[c], rng, row);
    out.push_back(row, gen.label, origin, c);
  }
}

}  // namespace

double min_mean_spacing(std::size_t n_means, std::size_t dim) {
  return std::pow(static_cast<double>(std::max<std::size_t>(n_means, 1)), -1.0 / static_cast<double>(dim));
}

std::vector<ClassGen> gen_class_means(std::size_t n_classes, std::size_t dim, std::uint64_t seed, double stddev) {
  if (n_classes < 2) throw SpecError("gen_class_means: need at least 2 classes");
  if (dim < 1) throw SpecError("gen_class_means: dim must be >= 1");
  Rng rng(derive_seed(seed, 1));
  const double spacing = min_mean_spacing(n_classes, dim);
  std::vector<std::vector<double>> accepted;
  std::vector<ClassGen> gens;
  for (std::size_t c = 0; c < n_classes; ++c) {
    gens.push_back({static_cast<ClassId>(c), {{draw_mean(accepted, dim, spacing, rng), stddev, 1.0}}});
  }
  return gens;
}

LabeledSet sample_set(std::span<const ClassGen> gens, std::size_t per_class, std::uint64_t seed, std::uint32_t origin) {
  if (per_class < 1) throw SpecError("sample_set: per_class must be >= 1");
  if (gens.empty()) throw SpecError("sample_set: no generators");
  LabeledSet out(gens.front().dim());
  for (const auto& g : gens) {
    g.validate();
    Rng rng(derive_seed(seed, g.label));
    sample_class(g, per_class, rng, origin, out);
  }
  return out;
}

std::pair<LabeledSet, LabeledSet> split_overlap_samples_random(const LabeledSet& class_samples, std::uint64_t seed) {
  if (class_samples.empty()) throw SpecError("split_overlap_samples_random: empty input");
  std::vector<std::size_t> idx(class_samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x5e11));
  rng.shuffle(idx);
  const std::size_t n_base = (idx.size() + 1) / 2;
  std::vector<std::size_t> base(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_base));
  std::vector<std::size_t> novel(idx.begin() + static_cast<std::ptrdiff_t>(n_base), idx.end());
  std::sort(base.begin(), base.end());
  std::sort(novel.begin(), novel.end());
  return {class_samples.subset(base), class_samples.subset(novel)};
}

KMeansResult kmeans2(const Mat& features, std::uint64_t seed, std::size_t max_iter, double tol) {
  const std::size_t n = features.rows;
  if (n < 2) throw DomainError("kmeans2: need at least 2 rows");

  // Farthest pair; ties are resolved by a seeded draw among the tied pairs.
  double best = -1.0;
  std::vector<std::pair<std::size_t, std::size_t>> tied;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = sq_dist(features.row(i), features.row(j));
      if (d > best) {
        best = d;
        tied.assign(1, {i, j});
      } else if (d == best) {
        tied.emplace_back(i, j);
      }
    }
  }
  if (best <= 0.0) throw DegenerateError("kmeans2: all rows identical");
  Rng rng(derive_seed(seed, 0x6b6d));
  const auto [i0, j0] = tied[tied.size() == 1 ? 0 : rng.index(tied.size())];

  KMeansResult res;
  res.centroids = Mat(2, features.cols);
  std::copy(features.row(i0).begin(), features.row(i0).end(), res.centroids.row(0).begin());
  std::copy(features.row(j0).begin(), features.row(j0).end(), res.centroids.row(1).begin());
  res.assignment.assign(n, 0);

  for (std::size_t it = 0; it < max_iter; ++it) {
    double objective = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double d0 = sq_dist(features.row(r), res.centroids.row(0));
      const double d1 = sq_dist(features.row(r), res.centroids.row(1));
      res.assignment[r] = d1 < d0 ? 1 : 0;
      objective += std::min(d0, d1);
    }
    res.objective.push_back(objective);
    ++res.iterations;

    Mat next(2, features.cols);
    std::size_t counts[2] = {0, 0};
    for (std::size_t r = 0; r < n; ++r) {
      const auto c = res.assignment[r];
      ++counts[c];
      auto dst = next.row(c);
      const auto src = features.row(r);
      for (std::size_t d = 0; d < features.cols; ++d) dst[d] += src[d];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < 2; ++c) {
      auto dst = next.row(c);
      if (counts[c] == 0) {
        std::copy(res.centroids.row(c).begin(), res.centroids.row(c).end(), dst.begin());
      } else {
        for (auto& v : dst) v /= static_cast<double>(counts[c]);
      }
      shift = std::max(shift, std::sqrt(sq_dist(dst, res.centroids.row(c))));
    }
    res.centroids = std::move(next);
    if (shift < tol) break;
  }
  return res;
}

std::pair<LabeledSet, LabeledSet> split_overlap_samples_cluster(const LabeledSet& class_samples,
                                                                const Mat& reference_features, std::uint64_t seed) {
  if (reference_features.rows != class_samples.size()) {
    throw DimensionError("split_overlap_samples_cluster: features not row-aligned with samples");
  }
  const auto km = kmeans2(reference_features, seed);
  const std::size_t n1 = static_cast<std::size_t>(std::count(km.assignment.begin(), km.assignment.end(), 1u));
  const std::size_t n0 = km.assignment.size() - n1;
  std::uint32_t base_cluster = 0;
  if (n1 > n0) base_cluster = 1;
  if (n1 == n0) base_cluster = km.assignment[0];
  std::vector<std::size_t> base, novel;
  for (std::size_t i = 0; i < km.assignment.size(); ++i) {
    (km.assignment[i] == base_cluster ? base : novel).push_back(i);
  }
  return {class_samples.subset(base), class_samples.subset(novel)};
}

Scenario build_scenario(const ScenarioSpec& spec, const FeatureFn& reference) {
  spec.validate();
  const std::size_t nb = spec.n_base_classes;
  const std::size_t T = spec.novel_steps.size();
  const bool shares_base = spec.kind != ScenarioKind::disjoint;
  const std::size_t per_step_new_offset = (spec.kind == ScenarioKind::disjoint) ? 0 : spec.n_overlap;

  std::size_t n_total = nb;
  if (spec.kind != ScenarioKind::full_overlap) {
    for (auto s : spec.novel_steps) n_total += s - per_step_new_offset;
  }

  // Class roles. ids[r] is the generator index for role slot r; base slots
  // come first, then each step's new classes in order.
  std::vector<ClassId> ids(n_total);
  std::iota(ids.begin(), ids.end(), 0);
  Rng assign_rng(derive_seed(spec.seed, 2));
  if (spec.kind == ScenarioKind::overlap_random) assign_rng.shuffle(ids);

  Scenario sc;
  sc.spec = spec;
  sc.steps.resize(T + 1);
  std::vector<ClassId> base_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(nb));
  std::sort(base_ids.begin(), base_ids.end());
  sc.steps[0].labels = base_ids;

  // Base classes not yet shared with a novel step, in a seeded order.
  std::vector<ClassId> shareable = base_ids;
  assign_rng.shuffle(shareable);
  std::size_t share_pos = 0;
  std::vector<std::set<ClassId>> shared(T + 1);
  std::size_t next_new = nb;
  for (std::size_t t = 1; t <= T; ++t) {
    const std::size_t size = spec.novel_steps[t - 1];
    std::size_t n_shared = 0;
    if (spec.kind == ScenarioKind::full_overlap) n_shared = size;
    else if (shares_base) n_shared = spec.n_overlap;
    std::vector<ClassId> labels;
    for (std::size_t i = 0; i < n_shared; ++i) {
      labels.push_back(shareable[share_pos]);
      shared[t].insert(shareable[share_pos]);
      ++share_pos;
    }
    for (std::size_t i = n_shared; i < size; ++i) labels.push_back(ids[next_new++]);
    std::sort(labels.begin(), labels.end());
    sc.steps[t].labels = labels;
  }

  std::map<ClassId, std::size_t> shared_step;  // overlap class -> novel step sharing it
  for (std::size_t t = 1; t <= T; ++t)
    for (auto c : shared[t]) shared_step[c] = t;

  // Means. Style overlap classes get a second mixture component.
  const bool style = spec.kind == ScenarioKind::overlap_style;
  const std::size_t n_means = n_total + (style ? shared_step.size() : 0);
  const double spacing = min_mean_spacing(n_means, spec.dim);
  Rng mean_rng(derive_seed(spec.seed, 1));
  std::vector<std::vector<double>> accepted;
  std::set<ClassId> base_set(base_ids.begin(), base_ids.end());
  sc.generators.resize(n_total);
  for (ClassId c = 0; c < n_total; ++c) {
    int sign = 0;
    if (spec.kind == ScenarioKind::overlap_domain) sign = base_set.count(c) ? 1 : -1;
    sc.generators[c].label = c;
    sc.generators[c].components.push_back({draw_mean(accepted, spec.dim, spacing, mean_rng, sign), spec.stddev, 1.0});
  }
  if (style) {
    for (const auto& [c, t] : shared_step) {
      auto& g = sc.generators[c];
      g.components.front().weight = 0.5;
      g.components.push_back({draw_mean(accepted, spec.dim, spacing, mean_rng), spec.stddev, 0.5});
    }
  }

  // Samples.
  for (auto& st : sc.steps) {
    st.train = LabeledSet(spec.dim);
    st.val = LabeledSet(spec.dim);
    st.test = LabeledSet(spec.dim);
  }
  std::vector<std::size_t> first_step(n_total, 0);
  for (std::size_t t = 1; t <= T; ++t)
    for (auto c : sc.steps[t].labels)
      if (!base_set.count(c)) first_step[c] = t;

  for (ClassId c = 0; c < n_total; ++c) {
    const auto& gen = sc.generators[c];
    const std::size_t home = first_step[c];
    Rng train_rng(derive_seed(spec.seed, 3, c, 0));
    Rng val_rng(derive_seed(spec.seed, 3, c, 1));
    Rng test_rng(derive_seed(spec.seed, 3, c, 2));
    sample_class(gen, spec.per_class_val, val_rng, static_cast<std::uint32_t>(home), sc.steps[home].val);
    sample_class(gen, spec.per_class_test, test_rng, static_cast<std::uint32_t>(home), sc.steps[home].test);

    const auto shared_it = shared_step.find(c);
    if (shared_it == shared_step.end()) {
      sample_class(gen, spec.per_class_train, train_rng, static_cast<std::uint32_t>(home), sc.steps[home].train);
      continue;
    }
    const std::size_t t = shared_it->second;
    if (style) {
      const std::size_t n_base = (spec.per_class_train + 1) / 2;
      sample_class(gen, n_base, train_rng, 0, sc.steps[0].train, 0u);
      sample_class(gen, spec.per_class_train - n_base, train_rng, static_cast<std::uint32_t>(t), sc.steps[t].train, 1u);
      continue;
    }
    LabeledSet all(spec.dim);
    sample_class(gen, spec.per_class_train, train_rng, 0, all);
    const std::uint64_t split_seed = derive_seed(spec.seed, 4, c);
    auto [base_part, novel_part] =
        spec.sample_split == SampleSplit::random
            ? split_overlap_samples_random(all, split_seed)
            : split_overlap_samples_cluster(all, reference ? reference(all.x) : all.x, split_seed);
    std::fill(novel_part.origin.begin(), novel_part.origin.end(), static_cast<std::uint32_t>(t));
    sc.steps[0].train.append(base_part);
    sc.steps[t].train.append(novel_part);
  }
  return sc;
}

// ------------------------------------------------------------- serialization

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char kTable[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += kTable[(v >> 6) & 63];
    out += kTable[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += kTable[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char ch) -> int {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
    if (ch >= '0' && ch <= '9') return ch - '0' + 52;
    if (ch == '+') return 62;
    if (ch == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char ch = text[i + static_cast<std::size_t>(k)];
      if (ch == '=') {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(ch);
        if (v[k] < 0) throw FormatError("base64: invalid character at offset " + std::to_string(i + k));
      }
    }
    const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                            (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

namespace {

std::string encode_doubles(std::span<const double> values) {
  std::vector<std::uint8_t> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

std::vector<double> decode_doubles(const std::string& text, std::size_t expected) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != expected * 8) throw FormatError("scenario: matrix payload has wrong length");
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

nlohmann::json set_to_json(const LabeledSet& s) {
  return {{"n", s.size()},     {"dim", s.dim()},           {"x", encode_doubles(s.x.data)},
          {"y", s.y},          {"origin", s.origin},       {"component", s.component}};
}

LabeledSet set_from_json(const nlohmann::json& j) {
  LabeledSet s;
  const auto n = j.at("n").get<std::size_t>();
  const auto dim = j.at("dim").get<std::size_t>();
  s.x = Mat(n, dim, decode_doubles(j.at("x").get<std::string>(), n * dim));
  s.y = j.at("y").get<std::vector<ClassId>>();
  s.origin = j.at("origin").get<std::vector<std::uint32_t>>();
  s.component = j.at("component").get<std::vector<std::uint32_t>>();
  s.validate();
  return s;
}

constexpr int kScenarioFormatVersion = 1;

}  // namespace

nlohmann::json spec_to_json(const ScenarioSpec& spec) {
  return {{"kind", to_string(spec.kind)},
          {"n_base_classes", spec.n_base_classes},
          {"novel_steps", spec.novel_steps},
          {"n_overlap", spec.n_overlap},
          {"sample_split", to_string(spec.sample_split)},
          {"per_class_train", spec.per_class_train},
          {"per_class_val", spec.per_class_val},
          {"per_class_test", spec.per_class_test},
          {"seed", spec.seed},
          {"dim", spec.dim},
          {"stddev", spec.stddev}};
}

ScenarioSpec spec_from_json(const nlohmann::json& j, ScenarioSpec base) {
  if (!j.is_object()) throw ConfigError("scenario: expected an object");
  ScenarioSpec s = std::move(base);
  for (const auto& [key, value] : j.items()) {
    const std::string path = "scenario." + key;
    try {
      if (key == "kind") s.kind = scenario_kind_from_string(value.get<std::string>());
      else if (key == "n_base_classes") s.n_base_classes = value.get<std::size_t>();
      else if (key == "novel_steps") s.novel_steps = value.get<std::vector<std::size_t>>();
      else if (key == "n_overlap") s.n_overlap = value.get<std::size_t>();
      else if (key == "sample_split") s.sample_split = sample_split_from_string(value.get<std::string>());
      else if (key == "per_class_train") s.per_class_train = value.get<std::size_t>();
      else if (key == "per_class_val") s.per_class_val = value.get<std::size_t>();
      else if (key == "per_class_test") s.per_class_test = value.get<std::size_t>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else if (key == "dim") s.dim = value.get<std::size_t>();
      else if (key == "stddev") s.stddev = value.get<double>();
      else throw ConfigError(path + ": unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.starts_with(path) ? msg : path + ": " + msg);
    }
  }
  return s;
}

nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& g : s.generators) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : g.components) comps.push_back({{"mean", c.mean}, {"stddev", c.stddev}, {"weight", c.weight}});
    gens.push_back({{"label", g.label}, {"components", comps}});
  }
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& st : s.steps) {
    steps.push_back(
        {{"labels", st.labels}, {"train", set_to_json(st.train)}, {"val", set_to_json(st.val)}, {"test", set_to_json(st.test)}});
  }
  return {{"format", "cilfuse-scenario"},
          {"version", kScenarioFormatVersion},
          {"spec", spec_to_json(s.spec)},
          {"generators", gens},
          {"steps", steps}};
}

Scenario scenario_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "cilfuse-scenario") throw FormatError("scenario: wrong format tag");
    if (j.at("version").get<int>() != kScenarioFormatVersion) throw FormatError("scenario: unsupported version");
    Scenario s;
    s.spec = spec_from_json(j.at("spec"));
    for (const auto& g : j.at("generators")) {
      ClassGen gen;
      gen.label = g.at("label").get<ClassId>();
      for (const auto& c : g.at("components")) {
        gen.components.push_back(
            {c.at("mean").get<std::vector<double>>(), c.at("stddev").get<double>(), c.at("weight").get<double>()});
      }
      s.generators.push_back(std::move(gen));
    }
    for (const auto& st : j.at("steps")) {
      s.steps.push_back({st.at("labels").get<std::vector<ClassId>>(), set_from_json(st.at("train")),
                         set_from_json(st.at("val")), set_from_json(st.at("test"))});
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scenario: ") + e.what());
  }
}

}  // namespace cilfuse
