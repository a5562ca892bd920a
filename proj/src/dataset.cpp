#include "racnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>

namespace racnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace

LabeledDataset make_synthetic(const SyntheticSpec& spec, int n, const std::string& tag,
                              std::uint64_t salt) {
  if (spec.classes < 2) throw std::invalid_argument("synthetic: need >= 2 classes");
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + salt);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uphase(0.0, 2.0 * kPi);
  std::uniform_real_distribution<double> ujit(-2.0, 2.0);

  LabeledDataset ds;
  ds.num_classes = spec.classes;
  ds.tag = tag;
  const Index S = spec.size;
  // Round-robin labels: every prefix of the dataset is class-balanced.
  for (int i = 0; i < n; ++i) {
    const int y = i % spec.classes;
    const double theta = kPi * double(y) / double(spec.classes);
    const double freq = 2.0 + double(y % 3);
    const double phase = uphase(rng);
    const double jx = ujit(rng), jy = ujit(rng);
    Tensor img({spec.channels, S, S});
    for (Index c = 0; c < spec.channels; ++c)
      for (Index yy = 0; yy < S; ++yy)
        for (Index xx = 0; xx < S; ++xx) {
          const double u = (double(xx) + jx) / double(S);
          const double v = (double(yy) + jy) / double(S);
          const double wave =
              std::sin(2.0 * kPi * freq * (u * std::cos(theta) + v * std::sin(theta)) +
                       phase);
          // Clamp to [0, 1] so samples live in the same box as real images.
          img.data[(c * S + yy) * S + xx] = std::clamp(
              0.5 + 0.4 * wave + spec.noise_sigma * gauss(rng), 0.0, 1.0);
        }
    ds.inputs.push_back(std::move(img));
    ds.labels.push_back(y);
  }
  return ds;
}

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& tag) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw std::runtime_error("idx: cannot open " + images_path);
  if (read_be32(imf) != 0x00000803u)
    throw std::runtime_error("idx: bad magic in " + images_path);
  const std::uint32_t n = read_be32(imf), rows = read_be32(imf), cols = read_be32(imf);

  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw std::runtime_error("idx: cannot open " + labels_path);
  if (read_be32(lbf) != 0x00000801u)
    throw std::runtime_error("idx: bad magic in " + labels_path);
  if (read_be32(lbf) != n) throw std::runtime_error("idx: image/label count mismatch");

  LabeledDataset ds;
  ds.tag = tag;
  std::vector<unsigned char> buf(size_t(rows) * cols);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    imf.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    char lb = 0;
    lbf.read(&lb, 1);
    if (!imf || !lbf) throw std::runtime_error("idx: truncated data");
    Tensor img({1, Index(rows), Index(cols)});
    for (size_t p = 0; p < buf.size(); ++p) img.data[Index(p)] = double(buf[p]) / 255.0;
    ds.inputs.push_back(std::move(img));
    ds.labels.push_back(int(static_cast<unsigned char>(lb)));
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = max_label + 1;
  return ds;
}

LabeledDataset load_cifar10(const std::vector<std::string>& batch_paths,
                            const std::string& tag) {
  LabeledDataset ds;
  ds.num_classes = 10;
  ds.tag = tag;
  for (const std::string& path : batch_paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cifar10: cannot open " + path);
    std::vector<unsigned char> rec(3073);
    while (in.read(reinterpret_cast<char*>(rec.data()), 3073)) {
      if (rec[0] > 9) throw std::runtime_error("cifar10: bad label in " + path);
      Tensor img({3, 32, 32});
      for (Index p = 0; p < 3072; ++p) img.data[p] = double(rec[size_t(p) + 1]) / 255.0;
      ds.inputs.push_back(std::move(img));
      ds.labels.push_back(int(rec[0]));
    }
    if (in.gcount() != 0) throw std::runtime_error("cifar10: truncated record in " + path);
  }
  return ds;
}

std::vector<Tensor> make_noise_inputs(const Shape& shape, int n, bool gaussian,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.5, 0.5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Tensor> out;
  for (int i = 0; i < n; ++i) {
    Tensor t(shape);
    for (Index j = 0; j < t.size(); ++j) t.data[j] = gaussian ? g(rng) : u(rng);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace racnet
