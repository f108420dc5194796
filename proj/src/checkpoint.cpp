#include "clipa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "clipa/rng.hpp"

namespace clipa {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'I', 'P', 'A', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 1;
constexpr std::uint8_t kFloat64 = 2;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw CheckpointError("cannot open " + path.string() + " for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <class T>
  void pod(T v) { bytes(&v, sizeof v); }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw CheckpointError("write failed for " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + path_);
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw CheckpointError("truncated checkpoint " + path_);
  }
  template <class T>
  T pod() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

bool fits_float32(std::span<const double> values) {
  for (double v : values)
    if (static_cast<double>(static_cast<float>(v)) != v) return false;
  return true;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ClipModel& model) {
  nlohmann::json meta = to_json(model.config());
  meta["image_grid"] = model.image.grid;
  const std::string config = meta.dump();

  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.pod(kVersion);
  w.pod(fnv1a64(config));
  w.pod(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());

  const auto params = model.parameters();
  w.pod(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.pod(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    const auto values = t.data();
    const bool f32 = fits_float32(values);
    w.pod(f32 ? kFloat32 : kFloat64);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (auto extent : t.shape()) w.pod(static_cast<std::int64_t>(extent));
    if (f32) {
      for (double v : values) w.pod(static_cast<float>(v));
    } else {
      w.bytes(values.data(), values.size() * sizeof(double));
    }
  }
  w.finish(path);
}

ClipModel load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto digest = r.pod<std::uint64_t>();
  std::string config(r.pod<std::uint32_t>(), '\0');
  r.bytes(config.data(), config.size());
  if (fnv1a64(config) != digest) throw CheckpointError("config digest mismatch in " + path.string());

  nlohmann::json meta = nlohmann::json::parse(config);
  const auto grid = meta.at("image_grid").get<std::int64_t>();
  meta.erase("image_grid");
  ClipModel model = ClipModel::init(clip_config_from_json(meta), 0);
  if (grid != model.image.grid) {
    model.image.grid = grid;
    model.image.pos = Tensor::zeros({grid * grid, model.image.config.width}, true);
  }

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : model.parameters()) by_name.emplace(name, t);

  const auto count = r.pod<std::uint32_t>();
  if (count != by_name.size()) throw CheckpointError("parameter count mismatch in " + path.string());
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.pod<std::uint32_t>(), '\0');
    r.bytes(name.data(), name.size());
    const auto dtype = r.pod<std::uint8_t>();
    Shape shape(r.pod<std::uint32_t>());
    for (auto& extent : shape) extent = r.pod<std::int64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("unexpected parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw CheckpointError("shape mismatch for '" + name + "': " + shape_str(shape) + " vs " +
                            shape_str(it->second.shape()));
    }
    auto dst = it->second.mutable_data();
    if (dtype == kFloat32) {
      for (double& v : dst) v = static_cast<double>(r.pod<float>());
    } else if (dtype == kFloat64) {
      r.bytes(dst.data(), dst.size() * sizeof(double));
    } else {
      throw CheckpointError("unknown dtype code " + std::to_string(dtype) + " for '" + name + "'");
    }
  }
  return model;
}

}  // namespace clipa
