#include "purer/data.hpp"

#include "purer/errors.hpp"
#include "purer/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace purer {

std::vector<int> LabeledDataset::class_ids() const {
  std::vector<int> ids;
  ids.reserve(class_index.size());
  for (const auto& [id, items] : class_index) ids.push_back(id);
  return ids;
}

template <typename Scalar>
Tensor<Scalar> LabeledDataset::gather_items(const std::vector<Index>& items) const {
  const Index per = numel(item_shape());
  Tensor<Scalar> out({static_cast<Index>(items.size()), images.shape[1], images.shape[2], images.shape[3]});
  for (std::size_t i = 0; i < items.size(); ++i)
    out.data.segment(static_cast<Index>(i) * per, per) = images.data.segment(items[i] * per, per).template cast<Scalar>();
  return out;
}

template Tensor<float> LabeledDataset::gather_items<float>(const std::vector<Index>&) const;
template Tensor<double> LabeledDataset::gather_items<double>(const std::vector<Index>&) const;

void LabeledDataset::check_consistency() const {
  std::map<int, std::vector<Index>> rebuilt;
  for (Index i = 0; i < num_items(); ++i) rebuilt[labels[static_cast<std::size_t>(i)]].push_back(i);
  if (rebuilt != class_index) throw InternalError("dataset " + dataset_id + ": class_index disagrees with labels");
}

namespace {

LabeledDataset assemble(std::vector<float> pixels, std::vector<int> labels, std::vector<std::string> names,
                        const Shape& shape, std::string id) {
  LabeledDataset ds;
  const Index n = static_cast<Index>(labels.size());
  ds.images = Tensor<float>({n, shape[0], shape[1], shape[2]},
                            Eigen::Map<Eigen::VectorXf>(pixels.data(), static_cast<Index>(pixels.size())));
  ds.labels = std::move(labels);
  for (Index i = 0; i < n; ++i) ds.class_index[ds.labels[static_cast<std::size_t>(i)]].push_back(i);
  ds.class_names = std::move(names);
  ds.dataset_id = std::move(id);
  return ds;
}

}  // namespace

LabeledDataset load_dataset(const std::string& root, const Shape& expected_shape) {
  if (expected_shape.size() != 3) throw InputError("load_dataset: expected shape must be (C, H, W)");
  const Index c = expected_shape[0], h = expected_shape[1], w = expected_shape[2];
  if (c != 1 && c != 3) throw InputError("load_dataset: only 1 or 3 channels are supported");
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root);

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());

  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::string> names;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    const int id = static_cast<int>(names.size());
    names.push_back(dir.filename().string());
    for (const auto& file : files) {
      Image8 img = read_png(file.string(), static_cast<int>(c));
      if (img.height != h || img.width != w)
        throw InputError("image " + file.string() + " is " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + ", expected " + std::to_string(h) + "x" + std::to_string(w));
      // interleaved HWC -> planar CHW
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x)
            pixels.push_back(static_cast<float>(img.pixels[static_cast<std::size_t>((y * w + x) * c + ch)]) / 255.0f);
      labels.push_back(id);
    }
  }
  if (labels.empty()) throw IoError("no PNG images found under " + root);
  return assemble(std::move(pixels), std::move(labels), std::move(names), expected_shape,
                  fs::path(root).filename().string());
}

LabeledDataset make_synthetic_blobs(int num_classes, int per_class, const Shape& shape, std::uint64_t seed) {
  if (per_class < 2) throw InputError("make_synthetic_blobs: per_class must be >= 2");
  if (num_classes < 4) throw InputError("make_synthetic_blobs: num_classes must be >= 4");
  if (shape.size() != 3) throw InputError("make_synthetic_blobs: shape must be (C, H, W)");
  const Index c = shape[0], h = shape[1], w = shape[2];
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Class identity is the grating's orientation and frequency, on a grid of
  // ceil(n/3) angles x 3 frequencies (4 x 3 for 12 classes). Hue, phase, brightness and contrast are drawn per
  // item, so untrained features see mostly nuisance.
  const int angles = std::max(4, (num_classes + 2) / 3);
  const double angle_offset = std::numbers::pi * unit(rng);
  std::vector<double> class_hue;
  for (int k = 0; k < num_classes; ++k) class_hue.push_back(unit(rng));

  std::vector<float> pixels;
  pixels.reserve(static_cast<std::size_t>(num_classes) * per_class * c * h * w);
  std::vector<int> labels;
  for (int k = 0; k < num_classes; ++k) {
    const double angle = angle_offset + std::numbers::pi * static_cast<double>(k % angles) / angles;
    const double frequency = 1.5 + static_cast<double>(k / angles);
    for (int item = 0; item < per_class; ++item) {
      const double hue = class_hue[static_cast<std::size_t>(k)] + (unit(rng) - 0.5);
      const double phase = two_pi * unit(rng);
      const double contrast = 0.4 + 0.6 * unit(rng);
      const double brightness = 0.35 + 0.3 * unit(rng);
      const double a = angle + 0.15 * (unit(rng) - 0.5);
      const double cx = std::cos(a), cy = std::sin(a);
      for (Index ch = 0; ch < c; ++ch) {
        const double color = 0.5 + 0.4 * std::cos(two_pi * (hue + static_cast<double>(ch) / static_cast<double>(c)));
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            const double t = cx * static_cast<double>(x) / static_cast<double>(w) + cy * static_cast<double>(y) / static_cast<double>(h);
            const double wave = std::sin(two_pi * frequency * t + phase);
            const double v = brightness + 0.4 * contrast * color * wave + 0.15 * (2.0 * unit(rng) - 1.0);
            pixels.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
          }
      }
      labels.push_back(k);
    }
  }
  std::vector<std::string> names;
  for (int k = 0; k < num_classes; ++k) names.push_back("blob" + std::to_string(k));
  return assemble(std::move(pixels), std::move(labels), std::move(names), shape,
                  "synthetic-blobs-" + std::to_string(seed));
}

void SplitSpec::validate(const LabeledDataset& ds) const {
  std::set<int> seen;
  for (const auto* part : {&train_classes, &val_classes, &test_classes})
    for (int id : *part) {
      if (!ds.class_index.count(id)) throw InputError("split references unknown class " + std::to_string(id));
      if (!seen.insert(id).second) throw InputError("split is not disjoint: class " + std::to_string(id));
    }
}

std::vector<int> sample_without_replacement(const std::vector<int>& pool, int k, Rng& rng) {
  if (k < 0 || k > static_cast<int>(pool.size())) throw InputError("cannot draw " + std::to_string(k) + " of " + std::to_string(pool.size()));
  std::vector<int> work = pool;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), work.size() - 1);
    std::swap(work[static_cast<std::size_t>(i)], work[pick(rng)]);
  }
  work.resize(static_cast<std::size_t>(k));
  return work;
}

SplitSpec make_split(const LabeledDataset& ds, int num_train, int num_val, int num_test, Rng& rng) {
  auto ids = ds.class_ids();
  if (num_train + num_val + num_test > static_cast<int>(ids.size()))
    throw InputError("split sizes exceed the number of classes");
  auto order = sample_without_replacement(ids, num_train + num_val + num_test, rng);
  SplitSpec s;
  s.train_classes.assign(order.begin(), order.begin() + num_train);
  s.val_classes.assign(order.begin() + num_train, order.begin() + num_train + num_val);
  s.test_classes.assign(order.begin() + num_train + num_val, order.end());
  for (auto* part : {&s.train_classes, &s.val_classes, &s.test_classes}) std::sort(part->begin(), part->end());
  return s;
}

SplitSpec standard_split(const LabeledDataset& ds, Rng& rng) { return make_split(ds, 64, 16, 20, rng); }

SplitSpec read_split_file(const std::string& path, const LabeledDataset& ds) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split file " + path);
  std::map<std::string, int> by_name;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) by_name[ds.class_names[i]] = static_cast<int>(i);
  SplitSpec s;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError("expected 'train:', 'val:' or 'test:'", lineno);
    std::string key = line.substr(0, colon);
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    std::vector<int>* part = key == "train" ? &s.train_classes : key == "val" ? &s.val_classes : key == "test" ? &s.test_classes : nullptr;
    if (!part) throw ParseError("unknown split '" + key + "'", lineno);
    std::stringstream rest(line.substr(colon + 1));
    std::string name;
    while (std::getline(rest, name, ',')) {
      name.erase(0, name.find_first_not_of(" \t\r"));
      name.erase(name.find_last_not_of(" \t\r") + 1);
      if (name.empty()) continue;
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ParseError("unknown class '" + name + "'", lineno);
      part->push_back(it->second);
    }
  }
  s.validate(ds);
  return s;
}

void write_split_file(const std::string& path, const SplitSpec& split, const LabeledDataset& ds) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  auto emit = [&](const char* key, const std::vector<int>& ids) {
    out << key << ":";
    for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? "," : " ") << ds.class_names.at(static_cast<std::size_t>(ids[i]));
    out << "\n";
  };
  emit("train", split.train_classes);
  emit("val", split.val_classes);
  emit("test", split.test_classes);
}

template <typename Scalar>
Episode<Scalar> sample_episode_from_dataset(const LabeledDataset& ds, const std::vector<int>& classes, int way,
                                            int shots, int queries, Rng& rng) {
  if (way < 1 || shots < 1 || queries < 1) throw InputError("episode needs N, K, M >= 1");
  if (static_cast<int>(classes.size()) < way) throw InputError("not enough classes for a " + std::to_string(way) + "-way episode");
  for (int id : classes) {
    auto it = ds.class_index.find(id);
    if (it == ds.class_index.end()) throw InputError("unknown class " + std::to_string(id));
  }
  Episode<Scalar> ep;
  ep.way = way;
  ep.shots = shots;
  ep.queries_per_class = queries;
  ep.origin = EpisodeOrigin::kReal;
  ep.source_classes = sample_without_replacement(classes, way, rng);
  for (int label = 0; label < way; ++label) {
    const auto& items = ds.class_index.at(ep.source_classes[static_cast<std::size_t>(label)]);
    if (static_cast<int>(items.size()) < shots + queries)
      throw InputError("class " + std::to_string(ep.source_classes[static_cast<std::size_t>(label)]) + " has only " +
                       std::to_string(items.size()) + " items, need " + std::to_string(shots + queries));
    std::vector<int> positions(items.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    auto drawn = sample_without_replacement(positions, shots + queries, rng);
    for (int j = 0; j < shots + queries; ++j) {
      const Index item = items[static_cast<std::size_t>(drawn[static_cast<std::size_t>(j)])];
      if (j < shots) {
        ep.support_items.push_back(item);
        ep.support_labels.push_back(label);
      } else {
        ep.query_items.push_back(item);
        ep.query_labels.push_back(label);
      }
    }
  }
  ep.support_images = ad::Var<Scalar>::constant(ds.gather_items<Scalar>(ep.support_items));
  ep.query_images = ad::Var<Scalar>::constant(ds.gather_items<Scalar>(ep.query_items));
  return ep;
}

template Episode<float> sample_episode_from_dataset<float>(const LabeledDataset&, const std::vector<int>&, int, int,
                                                           int, Rng&);
template Episode<double> sample_episode_from_dataset<double>(const LabeledDataset&, const std::vector<int>&, int,
                                                             int, int, Rng&);

}  // namespace purer
