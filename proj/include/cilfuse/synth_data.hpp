#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cilfuse/linalg.hpp"

namespace cilfuse {

struct MixtureComponent {
  std::vector<double> mean;
  double stddev = 0.15;
  double weight = 1.0;
};

/// Gaussian-mixture generator for one class.
struct ClassGen {
  ClassId label = 0;
  std::vector<MixtureComponent> components;

  std::size_t dim() const { return components.empty() ? 0 : components.front().mean.size(); }
  void validate() const;
};

/// Samples with labels and the step they were introduced in (0 = base).
/// `component` keeps the generating mixture component per row; it is hidden
/// metadata for tests and never reaches a learner.
struct LabeledSet {
  Mat x;
  std::vector<ClassId> y;
  std::vector<std::uint32_t> origin;
  std::vector<std::uint32_t> component;

  LabeledSet() = default;
  explicit LabeledSet(std::size_t dim) : x(0, dim) {}

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols; }
  bool empty() const { return y.empty(); }

  void push_back(std::span<const double> row, ClassId label, std::uint32_t origin_step, std::uint32_t comp = 0);
  void append(const LabeledSet& other);
  LabeledSet subset(std::span<const std::size_t> indices) const;
  LabeledSet of_class(ClassId label) const;
  std::vector<ClassId> labels() const;  // sorted unique
  void validate() const;
};

enum class ScenarioKind { disjoint, overlap_random, overlap_domain, overlap_style, full_overlap };
enum class SampleSplit { random, cluster };

std::string to_string(ScenarioKind k);
std::string to_string(SampleSplit s);
ScenarioKind scenario_kind_from_string(const std::string& s);
SampleSplit sample_split_from_string(const std::string& s);

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::disjoint;
  std::size_t n_base_classes = 40;
  std::vector<std::size_t> novel_steps{8};
  std::size_t n_overlap = 2;
  SampleSplit sample_split = SampleSplit::random;
  std::size_t per_class_train = 100;
  std::size_t per_class_val = 20;
  std::size_t per_class_test = 50;
  std::uint64_t seed = 0;
  std::size_t dim = 8;
  double stddev = 0.15;

  void validate() const;
};

/// One incremental step: the label set 𝓨_t and the data introduced with it.
/// Step 0 is the base step. val/test hold the classes first seen at this step.
struct StepData {
  std::vector<ClassId> labels;
  LabeledSet train;
  LabeledSet val;
  LabeledSet test;
};

struct Scenario {
  ScenarioSpec spec;
  std::vector<ClassGen> generators;
  std::vector<StepData> steps;

  std::size_t num_novel_steps() const { return steps.empty() ? 0 : steps.size() - 1; }
  std::vector<ClassId> labels_up_to(std::size_t t) const;   // 𝓨_a after step t
  std::vector<ClassId> overlap_labels(std::size_t t) const; // 𝓨_b ∩ 𝓨_nt
  LabeledSet val_up_to(std::size_t t) const;
  LabeledSet test_up_to(std::size_t t) const;
  std::vector<std::vector<ClassId>> step_label_sets(std::size_t t) const;
};

// Minimum pairwise spacing used by gen_class_means: n^(-1/p), i.e. half the
// typical grid pitch 2·n^(-1/p) of n points in [-1,1]^p.
double min_mean_spacing(std::size_t n_means, std::size_t dim);

std::vector<ClassGen> gen_class_means(std::size_t n_classes, std::size_t dim, std::uint64_t seed,
                                      double stddev = 0.15);

LabeledSet sample_set(std::span<const ClassGen> gens, std::size_t per_class, std::uint64_t seed,
                      std::uint32_t origin = 0);

using FeatureFn = std::function<Mat(const Mat&)>;

// `reference` maps raw inputs to the features used for cluster splitting;
// when empty the raw inputs are clustered.
Scenario build_scenario(const ScenarioSpec& spec, const FeatureFn& reference = {});

std::pair<LabeledSet, LabeledSet> split_overlap_samples_random(const LabeledSet& class_samples, std::uint64_t seed);

struct KMeansResult {
  std::vector<std::uint32_t> assignment;
  Mat centroids;
  std::vector<double> objective;  // after each assignment step
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with K=2 from the farthest pair of rows.
KMeansResult kmeans2(const Mat& features, std::uint64_t seed, std::size_t max_iter = 100, double tol = 1e-8);

std::pair<LabeledSet, LabeledSet> split_overlap_samples_cluster(const LabeledSet& class_samples,
                                                                const Mat& reference_features, std::uint64_t seed);

// Versioned JSON document; matrices are base64 of little-endian f64.
nlohmann::json scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const ScenarioSpec& spec);
ScenarioSpec spec_from_json(const nlohmann::json& j, ScenarioSpec base = {});

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace cilfuse
