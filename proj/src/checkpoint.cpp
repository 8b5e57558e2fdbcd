#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "cpg/network.hpp"

namespace cpg {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'G', 'N'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename V>
void put(std::ostream& os, V value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::filesystem::path& path) {
  V value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(V))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return value;
}

struct Header {
  std::uint64_t digest = 0;
  std::uint64_t count = 0;
};

Header read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  Header h;
  h.digest = get<std::uint64_t>(is, path);
  h.count = get<std::uint64_t>(is, path);
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return is;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CpgModel<float>& model) {
  const auto& reg = model.registry();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put(os, kVersion);
  put(os, model.config().digest());
  put(os, static_cast<std::uint64_t>(reg.params().size() + reg.buffers().size()));
  auto write_entry = [&os](const std::string& name, const Tensor<float>& t) {
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put(os, static_cast<std::int64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  };
  for (const auto& [name, t] : reg.params()) write_entry(name, t);
  for (const auto& [name, t] : reg.buffers()) write_entry(name, t);
  if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, CpgModel<float>& model) {
  auto is = open_in(path);
  const auto header = read_header(is, path);
  if (header.digest != model.config().digest()) {
    throw CheckpointError("checkpoint " + path.string() + " was written for a different model configuration");
  }
  std::map<std::string, Tensor<float>> targets;
  for (const auto& [name, t] : model.registry().params()) targets.emplace(name, t);
  for (const auto& [name, t] : model.registry().buffers()) targets.emplace(name, t);
  if (header.count != targets.size()) {
    throw CheckpointError("checkpoint " + path.string() + " holds " + std::to_string(header.count) +
                          " tensors, model has " + std::to_string(targets.size()));
  }
  for (std::uint64_t i = 0; i < header.count; ++i) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("truncated checkpoint " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::int64_t>(is, path);
    auto it = targets.find(name);
    if (it == targets.end()) throw CheckpointError("unknown tensor " + name + " in " + path.string());
    if (it->second.shape() != shape) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                            shape_str(it->second.shape()));
    }
    // Writes in place so every layer holding this tensor sees the new values.
    auto data = it->second.mutable_data();
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw CheckpointError("truncated checkpoint " + path.string());
    }
  }
}

std::uint64_t read_checkpoint_digest(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_header(is, path).digest;
}

}  // namespace cpg
