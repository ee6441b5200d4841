#pragma once

// Binary container for checkpoints: a text metadata block followed by named
// float32 arrays.
//
//   purer-ckpt-v1\n
//   <meta byte count>\n<key=value lines>
//   <array count>\n
//   per array: <name>\n<rank> <dim...>\n<little-endian float32 payload>

#include "purer/nets.hpp"

#include <map>
#include <string>

namespace purer {

struct Archive {
  std::map<std::string, std::string> meta;
  NamedTensors<float> arrays;

  const std::string& get(const std::string& key) const;
  long get_long(const std::string& key) const;
  double get_double(const std::string& key) const;
};

void save_archive(const std::string& path, const Archive& archive);
/// IoError on missing or corrupt files.
Archive load_archive(const std::string& path);

/// Adds the network under `prefix` ("prefix/param/<name>", "prefix/buffer/<name>").
void put_network(Archive& archive, const std::string& prefix, const NetworkParams<float>& net);
NetworkParams<float> get_network(const Archive& archive, const std::string& prefix);

void save_network(const std::string& path, const NetworkParams<float>& net);
NetworkParams<float> load_network(const std::string& path);

}  // namespace purer
