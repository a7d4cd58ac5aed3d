#include "equirobust/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "equirobust/digest.hpp"

namespace equirobust {

using namespace nn;

namespace {

std::size_t part(std::size_t w, std::size_t div) { return std::max<std::size_t>(1, w / div); }

std::unique_ptr<Sequential> conv_branch(std::size_t in, std::size_t out) {
  auto s = std::make_unique<Sequential>();
  s->emplace<Conv2d>(in, out);
  return s;
}

// Lift, group batch norm, ReLU, group convolution and orientation pooling;
// emits `out` plain channels.
std::unique_ptr<Sequential> rotation_branch(std::size_t in, std::size_t out) {
  const std::size_t mid = part(out, 4);
  auto s = std::make_unique<Sequential>();
  s->emplace<P4Lift>(in, mid);
  s->emplace<BatchNorm>(mid, true);
  s->emplace<ReLU>();
  s->emplace<P4GroupConv>(mid, out);
  s->emplace<GroupPool>(p4::PoolMode::max);
  return s;
}

}  // namespace

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  build();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->collect("layer" + std::to_string(i) + ".", params_, buffers_);
  }
  initialize();
}

void Model::build() {
  const std::size_t C = spec_.in_channels, k = spec_.num_classes;
  if (spec_.arch == Architecture::linear) {
    layers_.push_back(std::make_unique<Flatten>());
    layers_.push_back(std::make_unique<Dense>(C * spec_.image_size * spec_.image_size, k));
    return;
  }
  const auto plan = spec_.resolved_plan();
  const bool equivariant = spec_.arch == Architecture::fully_equivariant;
  std::size_t spatial = spec_.image_size;
  std::size_t width = 0;  // channels (or P4 filters) entering the next block

  auto maybe_pool = [&](std::size_t block) {
    if ((block + 1) % 2 == 0 && spatial >= 4 && spatial % 2 == 0) {
      layers_.push_back(std::make_unique<MaxPool>());
      spatial /= 2;
    }
  };
  auto norm_relu = [&](std::size_t ch, bool group) {
    layers_.push_back(std::make_unique<BatchNorm>(ch, group));
    layers_.push_back(std::make_unique<ReLU>());
  };

  // First stage.
  const std::size_t w0 = plan[0];
  switch (spec_.arch) {
    case Architecture::baseline:
      layers_.push_back(std::make_unique<Conv2d>(C, w0));
      width = w0;
      norm_relu(width, false);
      break;
    case Architecture::parallel_rot: {
      std::vector<std::unique_ptr<Sequential>> b;
      b.push_back(conv_branch(C, part(w0, 2)));
      b.push_back(rotation_branch(C, w0 - part(w0, 2)));
      layers_.push_back(std::make_unique<Parallel>(std::move(b), FuseMode::concat));
      width = w0;
      norm_relu(width, false);
      break;
    }
    case Architecture::parallel_rot_scale: {
      std::vector<std::unique_ptr<Sequential>> b;
      b.push_back(conv_branch(C, part(w0, 2)));
      b.push_back(rotation_branch(C, part(w0, 4)));
      auto scale = std::make_unique<Sequential>();
      auto sc = std::make_unique<ScaleConv>(C, part(w0, 4), spec_.scale_set);
      const std::size_t scale_out = sc->out_channels();
      scale->add(std::move(sc));
      b.push_back(std::move(scale));
      layers_.push_back(std::make_unique<Parallel>(std::move(b), FuseMode::concat));
      width = part(w0, 2) + part(w0, 4) + scale_out;
      norm_relu(width, false);
      break;
    }
    case Architecture::weighted_parallel: {
      ScaleSet avg = spec_.scale_set;
      avg.aggregation = Aggregation::average;
      std::vector<std::unique_ptr<Sequential>> b;
      b.push_back(conv_branch(C, w0));
      b.push_back(rotation_branch(C, w0));
      auto scale = std::make_unique<Sequential>();
      scale->emplace<ScaleConv>(C, w0, avg);
      b.push_back(std::move(scale));
      layers_.push_back(std::make_unique<Parallel>(std::move(b), FuseMode::weighted_sum));
      width = w0;
      norm_relu(width, false);
      break;
    }
    case Architecture::cascaded: {
      ScaleSet avg = spec_.scale_set;
      avg.aggregation = Aggregation::average;
      const std::size_t half = part(w0, 2);
      layers_.push_back(std::make_unique<Conv2d>(C, half));
      norm_relu(half, false);
      layers_.push_back(rotation_branch(half, half));
      layers_.push_back(std::make_unique<ScaleConv>(half, w0, avg));
      width = w0;
      norm_relu(width, false);
      break;
    }
    case Architecture::fully_equivariant:
      width = part(w0, 2);
      layers_.push_back(std::make_unique<P4Lift>(C, width));
      norm_relu(width, true);
      break;
    case Architecture::linear:
      break;
  }
  maybe_pool(0);

  for (std::size_t i = 1; i < plan.size(); ++i) {
    if (equivariant) {
      const std::size_t f = part(plan[i], 2);
      layers_.push_back(std::make_unique<P4GroupConv>(width, f));
      width = f;
      norm_relu(width, true);
    } else {
      layers_.push_back(std::make_unique<Conv2d>(width, plan[i]));
      width = plan[i];
      norm_relu(width, false);
    }
    maybe_pool(i);
  }
  if (equivariant) layers_.push_back(std::make_unique<GroupPool>(p4::PoolMode::max));
  layers_.push_back(std::make_unique<GlobalAvgPool>());
  layers_.push_back(std::make_unique<Dense>(width, k));
}

void Model::initialize() {
  std::mt19937_64 rng(spec_.seed);
  for (auto& p : params_) {
    auto d = p.value.mutable_data();
    switch (p.role) {
      case ParamRole::weight: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
        for (double& v : d) v = dist(rng);
        break;
      }
      case ParamRole::bias:
      case ParamRole::bn_beta:
      case ParamRole::fusion_logits:
        std::fill(d.begin(), d.end(), 0.0);
        break;
      case ParamRole::bn_gamma:
        std::fill(d.begin(), d.end(), 1.0);
        break;
      case ParamRole::branch_weights:
        break;  // initial values come from the scale set
    }
  }
}

Tensor Model::forward(const Tensor& x, Mode mode) {
  const std::size_t S = spec_.image_size;
  if (x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) != S || x.size(3) != S) {
    throw ShapeError("Model::forward: expected input (N, " + std::to_string(spec_.in_channels) + ", " +
                     std::to_string(S) + ", " + std::to_string(S) + "), got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h, mode);
    if (!h.all_finite()) {
      throw NumericError("Model::forward: non-finite activation after layer " + std::to_string(i) + " (" +
                         layers_[i]->kind() + ")");
    }
  }
  return h;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

bool Model::has_standard_conv() const {
  bool found = false;
  for (const auto& l : layers_) visit(*l, [&](const Layer& x) { found = found || x.kind() == "conv2d"; });
  return found;
}

std::vector<double> Model::fusion_weights() const {
  for (const auto& l : layers_)
    if (const auto* p = dynamic_cast<const Parallel*>(l.get())) {
      auto w = p->fusion_weights();
      if (!w.empty()) return w;
    }
  return {};
}

void Model::copy_state_to(Model& other) const {
  if (other.spec_.to_text() != spec_.to_text()) throw std::invalid_argument("copy_state_to: specs differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].value.data();
    auto dst = other.params_[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    auto src = buffers_[i].value.data();
    auto dst = other.buffers_[i].value.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   "EQRBCKPT" | u32 version | u64 len, spec text | 32-byte SHA-256 of spec text
//   | u64 entry count | entries | 32-byte SHA-256 of all preceding bytes.
// Entry: u32 name length, name, u8 kind (0 parameter, 1 buffer), u32 rank,
//   u64 dims, then the values as little-endian IEEE-754 doubles.

namespace {

constexpr char kMagic[8] = {'E', 'Q', 'R', 'B', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <class T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw CheckpointError("checkpoint: unexpected end of data");
  }
  const std::uint8_t* take(std::size_t k) {
    need(k);
    const auto* r = p_ + pos_;
    pos_ += k;
    return r;
  }
  template <class T>
  T uint() {
    const auto* b = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str(std::size_t max_len) {
    const auto n = uint<std::uint64_t>();
    if (n > max_len) throw CheckpointError("checkpoint: implausible string length");
    const auto* b = take(n);
    return {reinterpret_cast<const char*>(b), n};
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

void write_entry(Writer& w, const std::string& name, std::uint8_t kind, const Tensor& t) {
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.uint<std::uint8_t>(kind);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
  for (std::size_t d : t.shape()) w.uint<std::uint64_t>(d);
  for (double v : t.data()) w.f64(v);
}

}  // namespace

std::vector<std::uint8_t> Model::serialize() const {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(kCheckpointVersion);
  const std::string text = spec_.to_text();
  w.str(text);
  const auto spec_hash = Sha256().update(text).finish();
  w.bytes(spec_hash.data(), spec_hash.size());
  w.uint<std::uint64_t>(params_.size() + buffers_.size());
  for (const auto& p : params_) write_entry(w, p.name, 0, p.value);
  for (const auto& b : buffers_) write_entry(w, b.name, 1, b.value);
  const auto sum = Sha256().update(w.out).finish();
  w.bytes(sum.data(), sum.size());
  return std::move(w.out);
}

std::string Model::digest() const { return sha256_hex(serialize()); }

void Model::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write to '" + path.string() + "' failed");
}

Model Model::load(const std::filesystem::path& path, const std::optional<ModelSpec>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, expected);
}

Model Model::deserialize(const std::vector<std::uint8_t>& bytes, const std::optional<ModelSpec>& expected) {
  if (bytes.size() < sizeof kMagic + 4 + 32) throw CheckpointError("checkpoint: truncated (checksum missing)");
  const std::size_t body = bytes.size() - 32;
  const auto sum = Sha256().update(std::span(bytes.data(), body)).finish();
  if (std::memcmp(sum.data(), bytes.data() + body, 32) != 0) {
    throw CheckpointError("checkpoint: checksum mismatch (file truncated or corrupted)");
  }
  Reader r(bytes.data(), body);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("checkpoint: bad magic bytes");
  }
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::string text = r.str(1 << 20);
  const auto* stored_hash = r.take(32);
  const auto text_hash = Sha256().update(text).finish();
  if (std::memcmp(stored_hash, text_hash.data(), 32) != 0) throw CheckpointError("checkpoint: spec digest mismatch");
  ModelSpec spec = ModelSpec::parse(text);
  if (expected && expected->digest() != spec.digest()) {
    throw CheckpointError("checkpoint: spec-hash mismatch (file " + spec.digest().substr(0, 16) + ", expected " +
                          expected->digest().substr(0, 16) + ")");
  }
  Model m(std::move(spec));
  const auto count = r.uint<std::uint64_t>();
  if (count != m.params_.size() + m.buffers_.size()) {
    throw CheckpointError("checkpoint: entry count does not match the architecture");
  }
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = r.uint<std::uint32_t>();
    const std::string name(reinterpret_cast<const char*>(r.take(name_len)), name_len);
    const auto kind = r.uint<std::uint8_t>();
    const auto rank = r.uint<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.uint<std::uint64_t>();
    Tensor* target = nullptr;
    if (kind == 0) {
      for (auto& p : m.params_)
        if (p.name == name) target = &p.value;
    } else {
      for (auto& b : m.buffers_)
        if (b.name == name) target = &b.value;
    }
    if (!target) throw CheckpointError("checkpoint: unknown entry '" + name + "'");
    if (target->shape() != shape) {
      throw CheckpointError("checkpoint: entry '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(target->shape()));
    }
    auto d = target->mutable_data();
    for (double& v : d) v = r.f64();
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after the last entry");
  return m;
}

}  // namespace equirobust
