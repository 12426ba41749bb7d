#include "cilfuse/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "cilfuse/errors.hpp"

namespace cilfuse {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_u32(std::size_t v) { put(static_cast<std::uint32_t>(v)); }
  void put_tag(const char (&tag)[5]) { bytes.insert(bytes.end(), tag, tag + 4); }
  void put_string(const std::string& s) {
    put_u32(s.size());
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  void put_mat(const Mat& m) {
    for (double v : m.data) put(v);
  }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string what) : bytes_(b), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::uint32_t get_u32() { return get<std::uint32_t>(); }
  void expect_tag(const char (&tag)[5]) {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, tag, 4) != 0) fail("bad magic, expected '" + std::string(tag) + "'");
    pos_ += 4;
  }
  std::string get_string() {
    const std::uint32_t n = get_u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Mat get_mat(std::size_t rows, std::size_t cols) {
    need(rows * cols * sizeof(double));
    Mat m(rows, cols);
    for (auto& v : m.data) v = get<double>();
    return m;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      fail("truncated: need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) + " left");
    }
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

void put_param(Writer& w, const Param& p) {
  w.put<std::uint8_t>(p.frozen ? 1 : 0);
  w.put_mat(p.value);
}

Param get_param(Reader& r, std::size_t rows, std::size_t cols) {
  const bool frozen = r.get<std::uint8_t>() != 0;
  return Param(r.get_mat(rows, cols), frozen);
}

}  // namespace

// ------------------------------------------------------------ checkpoints

std::vector<std::uint8_t> checkpoint_bytes(const ModelBundle& m, const FusionHead* fusion) {
  Writer w;
  w.put_tag("CILM");
  w.put_u32(kCheckpointVersion);
  const auto& a = m.arch;
  w.put_u32(a.input_dim);
  w.put_u32(a.trunk_widths.size());
  for (auto v : a.trunk_widths) w.put_u32(v);
  w.put_u32(a.branch_widths.size());
  for (auto v : a.branch_widths) w.put_u32(v);
  w.put<std::uint8_t>(a.normalize ? 1 : 0);
  w.put(a.cosine_scale);

  w.put_u32(m.branches.size());
  for (const auto& br : m.branches) {
    w.put_string(br.id);
    w.put_u32(br.labels.size());
    for (auto c : br.labels) w.put_u32(c);
  }
  for (const auto& b : m.trunk) {
    put_param(w, b.weight);
    put_param(w, b.bias);
  }
  for (const auto& br : m.branches) {
    for (const auto& b : br.blocks) {
      put_param(w, b.weight);
      put_param(w, b.bias);
    }
    put_param(w, br.head);
  }

  w.put<std::uint8_t>(fusion ? 1 : 0);
  if (fusion) {
    if (fusion->n_branches != m.branches.size()) throw SpecError("checkpoint: fusion head does not match model");
    w.put<std::uint8_t>(fusion->pooler == Pooler::max ? 0 : 1);
    w.put(fusion->alpha);
    w.put(fusion->beta);
    for (const auto& [key, p] : fusion->cross) put_param(w, p);
    put_param(w, fusion->aux);
  }
  return std::move(w.bytes);
}

Checkpoint checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "checkpoint");
  r.expect_tag("CILM");
  const auto version = r.get_u32();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));

  Checkpoint ck;
  ModelBundle& m = ck.model;
  auto& a = m.arch;
  a.input_dim = r.get_u32();
  a.trunk_widths.resize(r.get_u32());
  for (auto& v : a.trunk_widths) v = r.get_u32();
  a.branch_widths.resize(r.get_u32());
  for (auto& v : a.branch_widths) v = r.get_u32();
  a.normalize = r.get<std::uint8_t>() != 0;
  a.cosine_scale = r.get<double>();
  try {
    a.validate();
  } catch (const Error& e) {
    r.fail(std::string("invalid architecture: ") + e.what());
  }

  const std::uint32_t n_branches = r.get_u32();
  m.branches.resize(n_branches);
  for (auto& br : m.branches) {
    br.id = r.get_string();
    br.labels.resize(r.get_u32());
    for (auto& c : br.labels) c = r.get_u32();
  }
  std::size_t in = a.input_dim;
  for (auto width : a.trunk_widths) {
    Block b;
    b.weight = get_param(r, in, width);
    b.bias = get_param(r, 1, width);
    m.trunk.push_back(std::move(b));
    in = width;
  }
  const std::size_t trunk_out = in;
  for (auto& br : m.branches) {
    in = trunk_out;
    for (auto width : a.branch_widths) {
      Block b;
      b.weight = get_param(r, in, width);
      b.bias = get_param(r, 1, width);
      br.blocks.push_back(std::move(b));
      in = width;
    }
    br.head = get_param(r, in, br.labels.size());
  }

  if (r.get<std::uint8_t>() != 0) {
    FusionHead f;
    f.n_branches = n_branches;
    f.pooler = r.get<std::uint8_t>() == 0 ? Pooler::max : Pooler::avg;
    f.alpha = r.get<double>();
    f.beta = r.get<double>();
    std::vector<std::vector<ClassId>> labels;
    for (const auto& br : m.branches) labels.push_back(br.labels);
    f.label_map = GlobalLabelMap::build(labels);
    for (std::size_t d = 0; d < n_branches; ++d) {
      for (std::size_t dp = 0; dp < n_branches; ++dp) {
        if (d != dp) f.cross.emplace(std::make_pair(d, dp), get_param(r, m.feature_dim(), labels[d].size()));
      }
    }
    f.aux = get_param(r, n_branches, n_branches);
    ck.fusion = std::move(f);
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelBundle& m, const FusionHead* fusion) {
  write_file_bytes(path, checkpoint_bytes(m, fusion));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_bytes(read_file_bytes(path)); }

// ---------------------------------------------------------- feature files

std::vector<std::uint8_t> feature_file_bytes(const Mat& x, std::span<const std::uint32_t> labels) {
  if (labels.size() != x.rows) throw DimensionError("feature file: label count does not match rows");
  if (x.rows == 0) throw FormatError("feature file: empty dataset");
  Writer w;
  w.put_tag("CILF");
  w.put_u32(kFeatureFileVersion);
  w.put_u32(x.rows);
  w.put_u32(x.cols);
  for (double v : x.data) w.put(static_cast<float>(v));
  for (auto c : labels) w.put(c);
  return std::move(w.bytes);
}

FeatureData feature_data_from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "feature file");
  r.expect_tag("CILF");
  const auto version = r.get_u32();
  if (version != kFeatureFileVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t n = r.get_u32();
  const std::uint32_t k = r.get_u32();
  if (n == 0) r.fail("empty dataset (n = 0)");
  if (k == 0) r.fail("zero feature width");
  FeatureData out;
  out.x = Mat(n, k);
  for (auto& v : out.x.data) {
    const float f = r.get<float>();
    if (!std::isfinite(f)) r.fail("non-finite feature value");
    v = f;
  }
  out.labels.resize(n);
  for (auto& c : out.labels) c = r.get_u32();
  if (!r.at_end()) r.fail("trailing bytes");
  return out;
}

void write_feature_file(const std::filesystem::path& path, const Mat& x, std::span<const std::uint32_t> labels) {
  write_file_bytes(path, feature_file_bytes(x, labels));
}

FeatureData read_feature_file(const std::filesystem::path& path) {
  return feature_data_from_bytes(read_file_bytes(path));
}

FeatureManifest read_feature_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(std::ifstream(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError("manifest " + path.string() + ": expected an object");
  FeatureManifest m;
  for (const auto& [key, v] : j.items()) {
    if (key == "feature_file") {
      m.feature_file = v.get<std::string>();
    } else if (key == "num_classes") {
      m.num_classes = v.get<std::uint32_t>();
    } else if (key == "origin") {
      m.origin = v.get<std::vector<std::uint32_t>>();
    } else if (key != "model" && key != "layer" && key != "images") {
      throw FormatError("manifest " + path.string() + ": unknown key '" + key + "'");
    }
  }
  if (m.num_classes == 0) throw FormatError("manifest " + path.string() + ": num_classes must be >= 1");
  if (!m.feature_file.empty() && m.feature_file.is_relative()) m.feature_file = path.parent_path() / m.feature_file;
  return m;
}

LabeledSet ingest_features(const std::filesystem::path& file, const std::filesystem::path& manifest) {
  const FeatureManifest man = read_feature_manifest(manifest);
  const FeatureData data = read_feature_file(file);
  if (!man.origin.empty() && man.origin.size() != data.labels.size()) {
    throw FormatError("manifest origin list has " + std::to_string(man.origin.size()) + " entries for " +
                      std::to_string(data.labels.size()) + " rows");
  }
  LabeledSet out(data.x.cols);
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    if (data.labels[i] >= man.num_classes) {
      throw FormatError("feature file: label " + std::to_string(data.labels[i]) + " of row " + std::to_string(i) +
                        " exceeds num_classes at byte offset " +
                        std::to_string(kFeatureHeaderBytes + 4 * data.x.data.size() + 4 * i));
    }
    out.push_back(data.x.row(i), data.labels[i], man.origin.empty() ? 0 : man.origin[i]);
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace cilfuse
