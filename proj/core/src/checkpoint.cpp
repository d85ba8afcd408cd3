#include "pseudoseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::train {

namespace {

constexpr char kMagic[8] = {'P', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

void write_store(std::ostream& out, const net::ParamStore& store) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store.params()) {
    write_string(out, p.name);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.ndim()));
    for (int d = 0; d < p.value.ndim(); ++d)
      write_pod<std::int32_t>(out, static_cast<std::int32_t>(p.value.dim(d)));
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
}

std::map<std::string, Tensor> read_store(std::istream& in, const std::string& file) {
  std::map<std::string, Tensor> out;
  const auto count = read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = read_string(in);
    const auto nd = read_pod<std::uint32_t>(in);
    if (!in || nd > 8) throw DataError("corrupt checkpoint " + file);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = read_pod<std::int32_t>(in);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint " + file);
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_checkpoint(const std::filesystem::path& file, const net::ParamStore& theta,
                     const net::ParamStore& attention, const std::string& config_json,
                     std::int64_t iteration) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + file.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(out, fnv1a64(config_json));
  write_pod<std::int64_t>(out, iteration);
  write_string(out, config_json);
  write_store(out, theta);
  write_store(out, attention);
  if (!out) throw DataError("failed writing checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + file.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("not a checkpoint file: " + file.string());
  Checkpoint ckpt;
  ckpt.config_hash = read_pod<std::uint64_t>(in);
  ckpt.iteration = read_pod<std::int64_t>(in);
  ckpt.config_json = read_string(in);
  ckpt.theta = read_store(in, file.string());
  ckpt.attention = read_store(in, file.string());
  if (fnv1a64(ckpt.config_json) != ckpt.config_hash)
    throw DataError("checkpoint config hash mismatch: " + file.string());
  return ckpt;
}

void restore_params(net::ParamStore& store, const std::map<std::string, Tensor>& values) {
  for (auto& p : store.params()) {
    auto it = values.find(p.name);
    if (it == values.end()) throw DataError("checkpoint missing parameter '" + p.name + "'");
    if (!(it->second.shape() == p.value.shape()))
      throw DataError("checkpoint shape mismatch for '" + p.name + "': expected " +
                      p.value.shape_str() + ", got " + it->second.shape_str());
    p.value = it->second;
    p.grad.zero();
    p.momentum.zero();
  }
}

}  // namespace pseudoseg::train
