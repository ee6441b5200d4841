#include "purer/archive.hpp"

#include "purer/errors.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace purer {

namespace {

constexpr const char* kMagic = "purer-ckpt-v1";

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void swap_if_big_endian(float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, data + i, 4);
      u = __builtin_bswap32(u);
      std::memcpy(data + i, &u, 4);
    }
  } else {
    (void)data;
    (void)n;
  }
}

}  // namespace

const std::string& Archive::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint is missing key '" + key + "'");
  return it->second;
}

long Archive::get_long(const std::string& key) const {
  const std::string& s = get(key);
  long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("checkpoint key '" + key + "' is not an integer");
  return v;
}

double Archive::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("checkpoint key '" + key + "' is not a number");
  return v;
}

void save_archive(const std::string& path, const Archive& archive) {
  std::ostringstream meta;
  for (const auto& [k, v] : archive.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw InputError("checkpoint metadata may not contain newlines or '=' in keys: " + k);
    meta << k << '=' << v << '\n';
  }
  const std::string meta_text = meta.str();

  // Write to a sibling file and rename, so an interrupted save never clobbers a valid checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    out << kMagic << '\n' << meta_text.size() << '\n' << meta_text << archive.arrays.size() << '\n';
    for (std::size_t i = 0; i < archive.arrays.size(); ++i) {
      const auto& t = archive.arrays.values[i];
      out << archive.arrays.names[i] << '\n' << t.shape.size();
      for (Index d : t.shape) out << ' ' << d;
      out << '\n';
      std::vector<float> buf(t.data.data(), t.data.data() + t.size());
      swap_if_big_endian(buf.data(), buf.size());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  auto fail = [&](const std::string& what) { return IoError("corrupt checkpoint " + path + ": " + what); };

  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw fail("bad header");
  std::size_t meta_size = 0;
  if (!(in >> meta_size) || in.get() != '\n') throw fail("bad metadata size");
  std::string meta_text(meta_size, '\0');
  if (!in.read(meta_text.data(), static_cast<std::streamsize>(meta_size))) throw fail("truncated metadata");

  Archive archive;
  std::istringstream meta(meta_text);
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail("metadata line without '='");
    archive.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }

  std::size_t count = 0;
  if (!(in >> count) || in.get() != '\n') throw fail("bad array count");
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    if (!std::getline(in, name)) throw fail("truncated array list");
    std::size_t rank = 0;
    if (!(in >> rank) || rank > 8) throw fail("bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape)
      if (!(in >> d) || d < 0) throw fail("bad shape for " + name);
    if (in.get() != '\n') throw fail("bad shape line for " + name);
    std::vector<float> buf(static_cast<std::size_t>(numel(shape)));
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw fail("truncated payload for " + name);
    swap_if_big_endian(buf.data(), buf.size());
    archive.arrays.add(name, Tensor<float>(shape, Eigen::Map<Eigen::VectorXf>(buf.data(), static_cast<Index>(buf.size()))));
  }
  return archive;
}

void put_network(Archive& archive, const std::string& prefix, const NetworkParams<float>& net) {
  archive.meta[prefix + ".arch"] = to_string(net.spec.arch);
  archive.meta[prefix + ".channels"] = std::to_string(net.spec.channels);
  archive.meta[prefix + ".height"] = std::to_string(net.spec.height);
  archive.meta[prefix + ".width"] = std::to_string(net.spec.width);
  archive.meta[prefix + ".num_classes"] = std::to_string(net.spec.num_classes);
  archive.meta[prefix + ".width_multiplier"] = format_double(net.spec.width_multiplier);
  for (std::size_t i = 0; i < net.params.size(); ++i)
    archive.arrays.add(prefix + "/param/" + net.params.names[i], net.params.values[i]);
  for (std::size_t i = 0; i < net.buffers.size(); ++i)
    archive.arrays.add(prefix + "/buffer/" + net.buffers.names[i], net.buffers.values[i]);
}

NetworkParams<float> get_network(const Archive& archive, const std::string& prefix) {
  ArchSpec spec;
  try {
    spec.arch = parse_arch_id(archive.get(prefix + ".arch"));
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
  spec.channels = archive.get_long(prefix + ".channels");
  spec.height = archive.get_long(prefix + ".height");
  spec.width = archive.get_long(prefix + ".width");
  spec.num_classes = static_cast<int>(archive.get_long(prefix + ".num_classes"));
  spec.width_multiplier = archive.get_double(prefix + ".width_multiplier");

  // Start from a freshly built network so names, order and shapes are checked against the architecture.
  NetworkParams<float> net = build_network<float>(spec, 0);
  auto fill = [&](NamedTensors<float>& dst, const std::string& kind) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const std::string key = prefix + "/" + kind + "/" + dst.names[i];
      const long j = archive.arrays.index_of(key);
      if (j < 0) throw IoError("checkpoint is missing array " + key);
      const auto& src = archive.arrays.values[static_cast<std::size_t>(j)];
      if (src.shape != dst.values[i].shape) throw IoError("checkpoint array " + key + " has shape " + shape_str(src.shape));
      dst.values[i] = src;
    }
  };
  fill(net.params, "param");
  fill(net.buffers, "buffer");
  return net;
}

void save_network(const std::string& path, const NetworkParams<float>& net) {
  Archive a;
  put_network(a, "net", net);
  save_archive(path, a);
}

NetworkParams<float> load_network(const std::string& path) { return get_network(load_archive(path), "net"); }

}  // namespace purer
