#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/rng.hpp"
#include "capsnet/tensor.hpp"

namespace capsnet {

// Labeled grayscale image collection. Pixels are stored as floats in [0,1]
// (byte value / 255); immutable after loading.
struct Dataset {
  Tensor images;  // [N,1,H,W]
  std::vector<int> labels;
  int class_count = 0;
  std::string split_tag = "full";

  int size() const { return images.rank() ? images.dim(0) : 0; }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  Tensor gather_images(const std::vector<int>& idx) const;
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
  uint64_t fingerprint() const;  // FNV-1a over pixels and labels
  void validate() const;
};

// IDX (MNIST-style) byte format: big-endian magic 0x00000803 for images /
// 0x00000801 for labels, big-endian dimension sizes, then raw bytes.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

// Folder-per-class corpora: manifest.csv lines are `relative_path,label`;
// images are 8-bit grayscale PGM (P5). Images are center-padded/cropped or
// bilinearly resized to target_h x target_w according to resize_policy
// ("pad" | "resize").
Dataset load_image_dir(const std::string& root, const std::string& manifest_name, int target_h,
                       int target_w, const std::string& resize_policy);

// Deterministic stratified split; train gets round(ratio * count) of each
// class. An empty side for some class prints a warning, it is not an error.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_ratio, uint64_t seed);

// Pure function of (seed, epoch): Fisher-Yates shuffle of 0..n-1 driven by
// the documented xorshift64* generator seeded with seed + GOLDEN*(epoch+1).
std::vector<int> epoch_permutation(int n, uint64_t seed, int epoch);

// Visits every sample exactly once per epoch in permuted order.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int batch_size, uint64_t seed, int epoch);
  // fills one batch; returns false when the epoch is exhausted
  bool next(Tensor& images, std::vector<int>& labels);

 private:
  const Dataset& ds_;
  std::vector<int> order_;
  int batch_size_;
  size_t cursor_ = 0;
};

}  // namespace capsnet
