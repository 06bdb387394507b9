#ifndef TRAT_DATA_HPP
#define TRAT_DATA_HPP

#include <string>
#include <utility>
#include <vector>

#include "trat/tensor.hpp"

namespace trat {

struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;

  size_t size() const { return inputs.size(); }
};

// Interleaved half-circles: class 0 on the upper unit arc (cos t, sin t),
// class 1 on the shifted lower arc (1 - cos t, 0.5 - sin t), t in [0, pi],
// with isotropic gaussian jitter of the given standard deviation. Classes are
// balanced to within one sample.
Dataset two_moons(int n, double noise_std, std::uint64_t seed);

// IDX ingestion (big-endian magic 0x803 for image files, 0x801 for label
// files); gzip-compressed files are accepted by magic sniffing. Pixels come
// back as [1, rows, cols] tensors scaled to [0, 1].
Dataset idx_load(const std::string& images_path, const std::string& labels_path);

// Zero-pad by `pad` on every side, then crop back to the original size at
// offset (dy, dx) from the padded origin.
Tensor shift_crop(const Tensor& img, int pad, int dy, int dx);
Tensor hflip(const Tensor& img);

// Random-crop-and-flip augmentation applied in place; labels are untouched.
// Per image the draw order is fixed: crop dy, crop dx, flip uniform.
void augment(std::vector<Tensor>& batch, int pad, double hflip_p, Rng& rng);

// Seeded Fisher-Yates permutation of the sample order.
Dataset shuffled(const Dataset& ds, Rng& rng);
// Seeded permutation split; fractions refer to the train side.
std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double train_frac, std::uint64_t seed);

}  // namespace trat

#endif  // TRAT_DATA_HPP
