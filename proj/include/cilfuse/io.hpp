#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cilfuse/backbone.hpp"
#include "cilfuse/fusion.hpp"

namespace cilfuse {

// ------------------------------------------------------------ checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelBundle model;
  std::optional<FusionHead> fusion;
};

/// "CILM", u32 version, architecture descriptor, branch table, then every
/// parameter as little-endian f64 in declaration order (trunk blocks, then
/// per branch its blocks and head). An optional fusion section follows.
std::vector<std::uint8_t> checkpoint_bytes(const ModelBundle& m, const FusionHead* fusion = nullptr);
Checkpoint checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& m, const FusionHead* fusion = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------- feature files

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 16;

struct FeatureData {
  Mat x;  // upcast from f32
  std::vector<std::uint32_t> labels;
};

/// "CILF", u32 version, u32 n, u32 k, n·k little-endian f32 row-major, n u32
/// labels. Values are narrowed to f32 on write.
std::vector<std::uint8_t> feature_file_bytes(const Mat& x, std::span<const std::uint32_t> labels);
FeatureData feature_data_from_bytes(const std::vector<std::uint8_t>& bytes);

void write_feature_file(const std::filesystem::path& path, const Mat& x, std::span<const std::uint32_t> labels);
FeatureData read_feature_file(const std::filesystem::path& path);

/// JSON manifest next to a feature file: {"feature_file": path relative to
/// the manifest, "num_classes": N, "origin": optional per-row step tags}.
struct FeatureManifest {
  std::filesystem::path feature_file;
  std::uint32_t num_classes = 0;
  std::vector<std::uint32_t> origin;
};

FeatureManifest read_feature_manifest(const std::filesystem::path& path);

// Rows become precomputed features; every label must be < num_classes.
LabeledSet ingest_features(const std::filesystem::path& file, const std::filesystem::path& manifest);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
// Writes through a temporary sibling and renames it into place.
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cilfuse
