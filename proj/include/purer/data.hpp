#pragma once

#include "purer/autodiff.hpp"
#include "purer/nets.hpp"
#include "purer/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace purer {

/// Images in [0, 1] with integer class labels.
struct LabeledDataset {
  Tensor<float> images;  // [num_items, C, H, W]
  std::vector<int> labels;
  std::map<int, std::vector<Index>> class_index;
  std::vector<std::string> class_names;  // indexed by class id
  std::string dataset_id;

  Index num_items() const { return static_cast<Index>(labels.size()); }
  Shape item_shape() const { return {images.shape[1], images.shape[2], images.shape[3]}; }
  std::vector<int> class_ids() const;
  /// Copy of the listed items as a [n, C, H, W] tensor.
  template <typename Scalar>
  Tensor<Scalar> gather_items(const std::vector<Index>& items) const;
  /// Throws InternalError when labels and class_index disagree.
  void check_consistency() const;
};

/// Reads `<root>/<class_name>/<item>.png`; classes and items in lexicographic order.
LabeledDataset load_dataset(const std::string& root, const Shape& expected_shape);

/// Procedural stand-in for a small image dataset: each class is a sinusoidal
/// grating with its own orientation and frequency. Items draw phase, hue
/// (around a class hue), brightness and contrast at random, jitter the angle
/// slightly and carry uniform noise of amplitude 0.15.
LabeledDataset make_synthetic_blobs(int num_classes, int per_class, const Shape& shape, std::uint64_t seed);

struct SplitSpec {
  std::vector<int> train_classes;
  std::vector<int> val_classes;
  std::vector<int> test_classes;

  /// Throws InputError unless the three sets are pairwise disjoint and drawn from `ds`.
  void validate(const LabeledDataset& ds) const;
};

/// Random disjoint split of the dataset's classes into the given sizes.
SplitSpec make_split(const LabeledDataset& ds, int num_train, int num_val, int num_test, Rng& rng);
/// The 64/16/20 class split used for 100-class datasets.
SplitSpec standard_split(const LabeledDataset& ds, Rng& rng);

/// `train: a,b,c` / `val: ...` / `test: ...` with class names.
SplitSpec read_split_file(const std::string& path, const LabeledDataset& ds);
void write_split_file(const std::string& path, const SplitSpec& split, const LabeledDataset& ds);

enum class EpisodeOrigin { kReal, kPseudo };

/// An N-way K-shot task. Labels are remapped to 0..N-1 in the order of
/// `source_classes`; items of each class are contiguous.
template <typename Scalar>
struct Episode {
  ad::Var<Scalar> support_images;  // [N*K, C, H, W]
  std::vector<int> support_labels;
  ad::Var<Scalar> query_images;  // [N*M, C, H, W]
  std::vector<int> query_labels;
  int way = 0;
  int shots = 0;
  int queries_per_class = 0;
  EpisodeOrigin origin = EpisodeOrigin::kReal;
  std::vector<int> source_classes;
  // Underlying item ids: dataset item indices, or flat dynamic-dataset instance indices.
  std::vector<Index> support_items;
  std::vector<Index> query_items;
};

/// Draws N of `classes` and, within each, K support and M query items without replacement.
template <typename Scalar>
Episode<Scalar> sample_episode_from_dataset(const LabeledDataset& ds, const std::vector<int>& classes, int way,
                                            int shots, int queries, Rng& rng);

/// k distinct values of `pool`, uniformly, in draw order.
std::vector<int> sample_without_replacement(const std::vector<int>& pool, int k, Rng& rng);

}  // namespace purer
