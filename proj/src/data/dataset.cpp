#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "equirobust/data.hpp"
#include "equirobust/digest.hpp"
#include "equirobust/ops.hpp"

namespace equirobust {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("Dataset::slice: bad range");
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return select(rows);
}

Dataset Dataset::select(const std::vector<std::size_t>& rows) const {
  const std::size_t per = size() ? images.numel() / size() : 0;
  std::vector<double> px;
  px.reserve(rows.size() * per);
  std::vector<int> lab;
  lab.reserve(rows.size());
  auto d = images.data();
  for (std::size_t r : rows) {
    if (r >= size()) throw std::out_of_range("Dataset::select: row " + std::to_string(r) + " out of range");
    px.insert(px.end(), d.begin() + static_cast<long>(r * per), d.begin() + static_cast<long>((r + 1) * per));
    lab.push_back(labels[r]);
  }
  Dataset out;
  out.images = Tensor({rows.size(), channels(), height(), width()}, std::move(px));
  out.labels = std::move(lab);
  out.num_classes = num_classes;
  out.split = split;
  out.provenance = provenance;
  return out;
}

Tensor Dataset::batch(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("Dataset::batch: bad range");
  const std::size_t per = images.numel() / size();
  auto d = images.data();
  return Tensor({end - begin, channels(), height(), width()},
                std::vector<double>(d.begin() + static_cast<long>(begin * per), d.begin() + static_cast<long>(end * per)));
}

std::vector<int> Dataset::batch_labels(std::size_t begin, std::size_t end) const {
  return {labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end)};
}

std::string Dataset::digest() const {
  Sha256 h;
  const std::string dims = shape_str(images.shape()) + " k=" + std::to_string(num_classes);
  h.update(dims);
  h.update_doubles(images.data());
  std::vector<std::uint8_t> lab(labels.size() * 4);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (int b = 0; b < 4; ++b) lab[i * 4 + b] = static_cast<std::uint8_t>(static_cast<std::uint32_t>(labels[i]) >> (8 * b));
  h.update(lab);
  return h.finish_hex();
}

void Dataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset: no samples");
  if (images.dim() != 4 || images.size(0) != labels.size()) {
    throw std::invalid_argument("dataset: images " + shape_str(images.shape()) + " do not match " +
                                std::to_string(labels.size()) + " labels");
  }
  for (double v : images.data())
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel outside [0, 1]");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
}

Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths, std::size_t num_classes,
                          std::size_t channels, std::size_t height, std::size_t width) {
  if (paths.empty()) throw std::invalid_argument("load_cifar_binary: no files given");
  const std::size_t pixels = channels * height * width;
  const std::size_t record = 1 + pixels;
  std::vector<double> px;
  std::vector<int> lab;
  Sha256 h;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("load_cifar_binary: cannot open '" + p.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw std::runtime_error("load_cifar_binary: '" + p.string() + "' is empty");
    if (bytes.size() % record != 0) {
      throw std::runtime_error("load_cifar_binary: '" + p.string() + "' has " + std::to_string(bytes.size()) +
                               " bytes, not a multiple of the " + std::to_string(record) + "-byte record");
    }
    h.update(bytes);
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      const std::size_t label = bytes[off];
      if (label >= num_classes) {
        throw std::runtime_error("load_cifar_binary: record " + std::to_string(off / record) + " of '" + p.string() +
                                 "' has label " + std::to_string(label) + " >= " + std::to_string(num_classes));
      }
      lab.push_back(static_cast<int>(label));
      for (std::size_t i = 0; i < pixels; ++i) px.push_back(bytes[off + 1 + i] / 255.0);
    }
  }
  Dataset ds;
  ds.images = Tensor({lab.size(), channels, height, width}, std::move(px));
  ds.labels = std::move(lab);
  ds.num_classes = num_classes;
  ds.split = "cifar";
  ds.provenance = "sha256:" + h.finish_hex();
  return ds;
}

void save_cifar_binary(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_cifar_binary: cannot open '" + path.string() + "'");
  const std::size_t per = ds.images.numel() / std::max<std::size_t>(ds.size(), 1);
  auto d = ds.images.data();
  std::vector<char> rec(1 + per);
  for (std::size_t n = 0; n < ds.size(); ++n) {
    if (ds.labels[n] < 0 || ds.labels[n] > 255) throw std::runtime_error("save_cifar_binary: label does not fit a byte");
    rec[0] = static_cast<char>(ds.labels[n]);
    for (std::size_t i = 0; i < per; ++i) {
      const double v = std::clamp(d[n * per + i], 0.0, 1.0);
      rec[1 + i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw std::runtime_error("save_cifar_binary: write failed");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order is stable across standard libraries.
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

Dataset subsample(const Dataset& ds, std::size_t n_per_class, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& rows = by_class[c];
    if (rows.size() < n_per_class) {
      throw std::invalid_argument("subsample: class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                                  " rows, fewer than " + std::to_string(n_per_class));
    }
    const auto order = shuffled_indices(rows.size(), seed + c);
    for (std::size_t i = 0; i < n_per_class; ++i) keep.push_back(rows[order[i]]);
  }
  std::sort(keep.begin(), keep.end());
  Dataset out = ds.select(keep);
  out.provenance = ds.provenance + " | subsample " + std::to_string(n_per_class) + "/class seed " + std::to_string(seed);
  return out;
}

}  // namespace equirobust
