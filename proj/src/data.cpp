#include "trat/data.hpp"

#include <zlib.h>

#include <cmath>
#include <fstream>
#include <iterator>

namespace trat {

Dataset two_moons(int n, double noise_std, std::uint64_t seed) {
  if (n < 2) fail(Errc::invalid_argument, "two_moons needs at least 2 samples");
  if (noise_std < 0) fail(Errc::invalid_argument, "two_moons noise_std must be nonnegative");
  Rng rng(seed);
  Dataset ds;
  ds.num_classes = 2;
  int n0 = n / 2 + (n % 2);
  int n1 = n / 2;
  auto arc_t = [](int i, int count) {
    return count == 1 ? 0.0 : M_PI * static_cast<double>(i) / (count - 1);
  };
  for (int i = 0; i < n0; ++i) {
    double t = arc_t(i, n0);
    double x = std::cos(t) + rng.gaussian(0.0, noise_std);
    double y = std::sin(t) + rng.gaussian(0.0, noise_std);
    ds.inputs.push_back(Tensor::vec({x, y}));
    ds.labels.push_back(0);
  }
  for (int i = 0; i < n1; ++i) {
    double t = arc_t(i, n1);
    double x = 1.0 - std::cos(t) + rng.gaussian(0.0, noise_std);
    double y = 0.5 - std::sin(t) + rng.gaussian(0.0, noise_std);
    ds.inputs.push_back(Tensor::vec({x, y}));
    ds.labels.push_back(1);
  }
  return ds;
}

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string gunzip(const std::string& in) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 16) != Z_OK) fail(Errc::io_error, "zlib init failed");
  std::string out;
  out.resize(std::max<size_t>(in.size() * 4, 1 << 16));
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  size_t written = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
    zs.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(Errc::truncated, "gzip stream damaged or truncated");
    }
    written = out.size() - zs.avail_out;
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

struct IdxReader {
  std::string bytes;
  size_t pos = 0;
  std::string path;

  explicit IdxReader(const std::string& p) : path(p) {
    bytes = read_bytes(p);
    if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
        static_cast<unsigned char>(bytes[1]) == 0x8b)
      bytes = gunzip(bytes);
  }
  std::uint32_t u32be() {
    if (pos + 4 > bytes.size()) fail(Errc::truncated, "'" + path + "' truncated in header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[pos++]);
    return v;
  }
  const unsigned char* body(size_t n) {
    if (pos + n > bytes.size())
      fail(Errc::truncated, "'" + path + "' holds " + std::to_string(bytes.size() - pos) +
                                " data bytes, header promises " + std::to_string(n));
    return reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  }
};

}  // namespace

Dataset idx_load(const std::string& images_path, const std::string& labels_path) {
  IdxReader img(images_path);
  if (img.u32be() != 0x00000803u)
    fail(Errc::bad_magic, "'" + images_path + "' lacks the IDX image magic 0x00000803");
  std::uint32_t count = img.u32be();
  std::uint32_t rows = img.u32be();
  std::uint32_t cols = img.u32be();
  const unsigned char* px = img.body(static_cast<size_t>(count) * rows * cols);

  IdxReader lab(labels_path);
  if (lab.u32be() != 0x00000801u)
    fail(Errc::bad_magic, "'" + labels_path + "' lacks the IDX label magic 0x00000801");
  std::uint32_t lcount = lab.u32be();
  if (lcount != count)
    fail(Errc::count_mismatch, "label count " + std::to_string(lcount) + " != image count " +
                                   std::to_string(count));
  const unsigned char* lb = lab.body(lcount);

  Dataset ds;
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t(Shape{1, static_cast<int>(rows), static_cast<int>(cols)});
    for (size_t j = 0; j < t.data.size(); ++j)
      t.data[j] = px[static_cast<size_t>(i) * rows * cols + j] / 255.0;
    ds.inputs.push_back(std::move(t));
    ds.labels.push_back(lb[i]);
    max_label = std::max(max_label, static_cast<int>(lb[i]));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

Tensor shift_crop(const Tensor& img, int pad, int dy, int dx) {
  if (img.shape.nd != 3) fail(Errc::shape_mismatch, "shift_crop expects an image, got " + img.shape.str());
  if (pad < 0 || dy < 0 || dx < 0 || dy > 2 * pad || dx > 2 * pad)
    fail(Errc::invalid_argument, "shift_crop offset outside the padded range");
  int c = img.shape.d[0], h = img.shape.d[1], w = img.shape.d[2];
  Tensor out(img.shape);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y + dy - pad;
        int sx = x + dx - pad;
        double v = (sy < 0 || sy >= h || sx < 0 || sx >= w)
                       ? 0.0
                       : img.data[(static_cast<size_t>(ch) * h + sy) * w + sx];
        out.data[(static_cast<size_t>(ch) * h + y) * w + x] = v;
      }
  return out;
}

Tensor hflip(const Tensor& img) {
  if (img.shape.nd != 3) fail(Errc::shape_mismatch, "hflip expects an image, got " + img.shape.str());
  int c = img.shape.d[0], h = img.shape.d[1], w = img.shape.d[2];
  Tensor out(img.shape);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data[(static_cast<size_t>(ch) * h + y) * w + x] =
            img.data[(static_cast<size_t>(ch) * h + y) * w + (w - 1 - x)];
  return out;
}

void augment(std::vector<Tensor>& batch, int pad, double hflip_p, Rng& rng) {
  for (Tensor& img : batch) {
    if (img.shape.nd != 3) fail(Errc::shape_mismatch, "augment expects images, got " + img.shape.str());
    int dy = static_cast<int>(rng.below(2 * pad + 1));
    int dx = static_cast<int>(rng.below(2 * pad + 1));
    double u = rng.uniform01();
    img = shift_crop(img, pad, dy, dx);
    if (u < hflip_p) img = hflip(img);
  }
}

Dataset shuffled(const Dataset& ds, Rng& rng) {
  std::vector<size_t> order(ds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  Dataset out;
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  for (size_t i : order) {
    out.inputs.push_back(ds.inputs[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& ds, double train_frac, std::uint64_t seed) {
  if (train_frac <= 0.0 || train_frac >= 1.0)
    fail(Errc::invalid_argument, "train fraction must lie strictly between 0 and 1");
  Rng rng(seed);
  Dataset mixed = shuffled(ds, rng);
  size_t ntrain = static_cast<size_t>(std::llround(train_frac * static_cast<double>(ds.size())));
  ntrain = std::min(std::max<size_t>(ntrain, 1), ds.size() - 1);
  Dataset train, test;
  train.num_classes = test.num_classes = ds.num_classes;
  train.split = "train";
  test.split = "test";
  for (size_t i = 0; i < mixed.size(); ++i) {
    Dataset& dst = i < ntrain ? train : test;
    dst.inputs.push_back(mixed.inputs[i]);
    dst.labels.push_back(mixed.labels[i]);
  }
  return {train, test};
}

}  // namespace trat
