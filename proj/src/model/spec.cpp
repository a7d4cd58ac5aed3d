#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

#include "equirobust/digest.hpp"
#include "equirobust/model.hpp"

namespace equirobust {

namespace {

const std::map<std::string, Architecture>& arch_names() {
  static const std::map<std::string, Architecture> m{
      {"baseline", Architecture::baseline},
      {"parallel_rot", Architecture::parallel_rot},
      {"parallel_rot_scale", Architecture::parallel_rot_scale},
      {"cascaded", Architecture::cascaded},
      {"weighted_parallel", Architecture::weighted_parallel},
      {"fully_equivariant", Architecture::fully_equivariant},
      {"linear", Architecture::linear},
  };
  return m;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& fmt) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += fmt(v[i]);
  }
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') {
    throw std::invalid_argument("model spec: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(n);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) {
    throw std::invalid_argument("model spec: '" + key + "' expects a number, got '" + v + "'");
  }
  return d;
}

}  // namespace

std::string to_string(Architecture a) {
  for (const auto& [name, value] : arch_names())
    if (value == a) return name;
  return "unknown";
}

Architecture architecture_from_string(const std::string& s) {
  const auto it = arch_names().find(s);
  if (it == arch_names().end()) {
    std::string known;
    for (const auto& [name, value] : arch_names()) known += (known.empty() ? "" : ", ") + name;
    throw std::invalid_argument("unknown architecture '" + s + "' (known: " + known + ")");
  }
  return it->second;
}

std::vector<std::size_t> default_channel_plan(int depth) {
  if (depth == 4) return {32, 64, 128, 128};
  if (depth == 10) return {32, 32, 64, 64, 128, 128, 256, 256, 256, 256};
  throw std::invalid_argument("depth must be 4 or 10, got " + std::to_string(depth));
}

std::vector<std::size_t> ModelSpec::resolved_plan() const {
  if (arch == Architecture::linear) return channel_plan;
  return channel_plan.empty() ? default_channel_plan(depth) : channel_plan;
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("model spec: num_classes must be at least 2");
  if (in_channels == 0) throw std::invalid_argument("model spec: in_channels must be positive");
  if (image_size < 4) throw std::invalid_argument("model spec: image_size must be at least 4");
  scale_set.validate();
  if (arch == Architecture::linear) return;
  if (depth != 4 && depth != 10) throw std::invalid_argument("model spec: depth must be 4 or 10");
  const auto plan = resolved_plan();
  if (plan.size() != static_cast<std::size_t>(depth)) {
    throw std::invalid_argument("model spec: channel_plan has " + std::to_string(plan.size()) +
                                " widths for depth " + std::to_string(depth));
  }
  for (std::size_t w : plan)
    if (w < 2) throw std::invalid_argument("model spec: every width must be at least 2");
}

std::string ModelSpec::to_text() const {
  std::ostringstream os;
  os << "arch = " << to_string(arch) << "\n";
  os << "depth = " << depth << "\n";
  os << "num_classes = " << num_classes << "\n";
  os << "in_channels = " << in_channels << "\n";
  os << "image_size = " << image_size << "\n";
  os << "channel_plan = " << join(channel_plan, [](std::size_t v) { return std::to_string(v); }) << "\n";
  os << "scale_factors = " << join(scale_set.factors, fmt_double) << "\n";
  os << "scale_aggregation = " << to_string(scale_set.aggregation) << "\n";
  os << "scale_branch_weights = " << join(scale_set.branch_weights, fmt_double) << "\n";
  os << "seed = " << seed << "\n";
  return os.str();
}

ModelSpec ModelSpec::parse(const std::string& text) {
  ModelSpec s;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("model spec: expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "arch") {
      s.arch = architecture_from_string(value);
    } else if (key == "depth") {
      s.depth = static_cast<int>(to_size(key, value));
    } else if (key == "num_classes") {
      s.num_classes = to_size(key, value);
    } else if (key == "in_channels") {
      s.in_channels = to_size(key, value);
    } else if (key == "image_size") {
      s.image_size = to_size(key, value);
    } else if (key == "channel_plan") {
      s.channel_plan.clear();
      for (const auto& v : split_list(value)) s.channel_plan.push_back(to_size(key, trim(v)));
    } else if (key == "scale_factors") {
      s.scale_set.factors.clear();
      for (const auto& v : split_list(value)) s.scale_set.factors.push_back(to_double(key, trim(v)));
    } else if (key == "scale_aggregation") {
      s.scale_set.aggregation = aggregation_from_string(value);
    } else if (key == "scale_branch_weights") {
      s.scale_set.branch_weights.clear();
      for (const auto& v : split_list(value)) s.scale_set.branch_weights.push_back(to_double(key, trim(v)));
    } else if (key == "seed") {
      s.seed = to_size(key, value);
    } else {
      throw std::invalid_argument("model spec: unknown key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

std::string ModelSpec::digest() const { return sha256_hex(to_text()); }

}  // namespace equirobust
