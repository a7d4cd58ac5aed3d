#include "equirobust/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "equirobust/report.hpp"

namespace equirobust::config {

namespace fs = std::filesystem;

ConfigError::ConfigError(const std::string& source, std::size_t line, std::size_t column, const std::string& message)
    : std::runtime_error(source + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + message),
      line_(line),
      column_(column) {}

namespace {

bool is_key_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
bool is_section_char(char c) { return is_key_char(c) || c == '.' || c == '-'; }

std::size_t first_non_space(const std::string& s, std::size_t from = 0) {
  while (from < s.size() && std::isspace(static_cast<unsigned char>(s[from]))) ++from;
  return from;
}

std::string rtrim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

// Drops a trailing comment; '#' inside double quotes is kept.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

}  // namespace

std::vector<Section> parse_document(const std::string& text, const std::string& source) {
  std::vector<Section> out;
  std::set<std::string> seen_sections;
  std::set<std::string> seen_keys;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const std::string line = rtrim(strip_comment(raw));
    const std::size_t c = first_non_space(line);
    if (c == line.size()) continue;
    const std::size_t col = c + 1;
    if (line[c] == '[') {
      if (line.back() != ']') throw ConfigError(source, lineno, col, "unterminated section header");
      std::string name = line.substr(c + 1, line.size() - c - 2);
      const std::size_t lead = first_non_space(name);
      name = rtrim(name.substr(lead));
      if (name.empty()) throw ConfigError(source, lineno, col, "empty section name");
      for (std::size_t i = 0; i < name.size(); ++i) {
        if (!is_section_char(name[i])) {
          throw ConfigError(source, lineno, col + 1 + lead + i, std::string("invalid character '") + name[i] +
                                                                    "' in section name");
        }
      }
      if (!seen_sections.insert(name).second) {
        throw ConfigError(source, lineno, col, "duplicate section [" + name + "]");
      }
      out.push_back(Section{name, lineno, col, {}});
      seen_keys.clear();
      continue;
    }
    const std::size_t eq = line.find('=', c);
    if (eq == std::string::npos) throw ConfigError(source, lineno, col, "expected 'key = value' or '[section]'");
    const std::string key = rtrim(line.substr(c, eq - c));
    if (key.empty()) throw ConfigError(source, lineno, col, "missing key before '='");
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (!is_key_char(key[i])) {
        throw ConfigError(source, lineno, col + i, std::string("invalid character '") + key[i] + "' in key");
      }
    }
    if (out.empty()) throw ConfigError(source, lineno, col, "key '" + key + "' appears before any [section]");
    if (!seen_keys.insert(key).second) {
      throw ConfigError(source, lineno, col, "duplicate key '" + key + "' in [" + out.back().name + "]");
    }
    Entry e;
    e.key = key;
    e.line = lineno;
    e.key_column = col;
    const std::size_t v = first_non_space(line, eq + 1);
    e.value_column = v + 1;
    e.value = line.substr(v);
    if (!e.value.empty() && e.value.front() == '"') {
      if (e.value.size() < 2 || e.value.back() != '"') {
        throw ConfigError(source, lineno, e.value_column, "unterminated string");
      }
      e.value = e.value.substr(1, e.value.size() - 2);
      e.quoted = true;
    }
    out.back().entries.push_back(std::move(e));
  }
  return out;
}

namespace {

struct Item {
  std::string text;
  std::size_t column;
};

// Typed access to one section. Every lookup marks the key as used; finish()
// rejects whatever was not looked up.
class Binder {
 public:
  Binder(const Section* s, std::string source) : s_(s), source_(std::move(source)) {}

  bool present() const { return s_ != nullptr; }
  bool has(const std::string& key) const { return find(key) != nullptr; }

  std::string str(const std::string& key, const std::string& def) {
    const Entry* e = use(key);
    return e ? e->value : def;
  }

  double real(const std::string& key, double def) {
    const Entry* e = use(key);
    return e ? to_real({e->value, e->value_column}, *e) : def;
  }

  template <class T>
  T integer(const std::string& key, T def) {
    const Entry* e = use(key);
    return e ? to_integer<T>({e->value, e->value_column}, *e) : def;
  }

  bool boolean(const std::string& key, bool def) {
    const Entry* e = use(key);
    if (!e) return def;
    if (e->value == "true") return true;
    if (e->value == "false") return false;
    throw at(*e, e->value_column, "expected true or false, got '" + e->value + "'");
  }

  std::vector<Item> list(const std::string& key, const std::vector<std::string>& def, bool* given = nullptr) {
    const Entry* e = use(key);
    if (given) *given = e != nullptr;
    std::vector<Item> items;
    if (!e) {
      for (const auto& d : def) items.push_back({d, 0});
      return items;
    }
    if (e->quoted) return {{e->value, e->value_column}};
    std::size_t start = 0;
    const std::string& v = e->value;
    if (rtrim(v).empty()) return items;
    while (true) {
      const std::size_t comma = v.find(',', start);
      const std::string part = v.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      const std::size_t lead = first_non_space(part);
      const std::string item = rtrim(part.substr(lead));
      if (item.empty()) throw at(*e, e->value_column + start, "empty list item");
      items.push_back({item, e->value_column + start + lead});
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return items;
  }

  std::vector<double> reals(const std::string& key, const std::vector<double>& def) {
    const Entry* e = find(key);
    if (!e) {
      use(key);
      return def;
    }
    std::vector<double> out;
    for (const auto& item : list(key, {})) out.push_back(to_real(item, *e));
    return out;
  }

  template <class T>
  std::vector<T> integers(const std::string& key, const std::vector<T>& def) {
    const Entry* e = find(key);
    if (!e) {
      use(key);
      return def;
    }
    std::vector<T> out;
    for (const auto& item : list(key, {})) out.push_back(to_integer<T>(item, *e));
    return out;
  }

  // Converts with a from-string function, reporting its message at the value.
  template <class F>
  auto choice(const std::string& key, decltype(std::declval<F>()(std::string())) def, F parse) {
    const Entry* e = use(key);
    if (!e) return def;
    try {
      return parse(e->value);
    } catch (const std::invalid_argument& ex) {
      throw at(*e, e->value_column, ex.what());
    }
  }

  template <class F>
  auto choice_item(const Item& item, const std::string& key, F parse) {
    try {
      return parse(item.text);
    } catch (const std::invalid_argument& ex) {
      const Entry* e = find(key);
      throw ConfigError(source_, e ? e->line : s_->line, item.column ? item.column : 1, ex.what());
    }
  }

  ConfigError at(const Entry& e, std::size_t column, const std::string& msg) const {
    return ConfigError(source_, e.line, column, "[" + s_->name + "] " + e.key + ": " + msg);
  }

  // Error attributed to a key if present, else to the section header.
  ConfigError error(const std::string& key, const std::string& msg) const {
    if (const Entry* e = find(key)) return at(*e, e->value_column, msg);
    if (s_) return ConfigError(source_, s_->line, s_->column, "[" + s_->name + "] " + msg);
    return ConfigError(source_, 1, 1, msg);
  }

  template <class F>
  void check(F validate, const std::string& key = "") const {
    try {
      validate();
    } catch (const std::invalid_argument& ex) {
      throw error(key, ex.what());
    }
  }

  void finish() const {
    if (!s_) return;
    for (const auto& e : s_->entries) {
      if (!used_.count(e.key)) {
        throw ConfigError(source_, e.line, e.key_column, "unknown key '" + e.key + "' in [" + s_->name + "]");
      }
    }
  }

 private:
  const Entry* find(const std::string& key) const {
    if (!s_) return nullptr;
    for (const auto& e : s_->entries) {
      if (e.key == key) return &e;
    }
    return nullptr;
  }
  const Entry* use(const std::string& key) {
    used_.insert(key);
    return find(key);
  }

  double to_real(const Item& item, const Entry& e) const {
    double v = 0.0;
    const char* end = item.text.data() + item.text.size();
    auto r = std::from_chars(item.text.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end) throw at(e, item.column, "expected a number, got '" + item.text + "'");
    return v;
  }

  template <class T>
  T to_integer(const Item& item, const Entry& e) const {
    T v{};
    const char* end = item.text.data() + item.text.size();
    auto r = std::from_chars(item.text.data(), end, v);
    if (r.ec != std::errc() || r.ptr != end) {
      throw at(e, item.column, "expected a non-negative integer, got '" + item.text + "'");
    }
    return v;
  }

  const Section* s_;
  std::string source_;
  std::set<std::string> used_;
};

const std::set<std::string> kSections = {"run",    "data",     "model",      "train",     "attack",
                                         "certify", "diagnose", "corruption", "checkpoint"};

const std::vector<std::string> kDefaultArchs = {"baseline", "parallel_rot", "parallel_rot_scale", "cascaded",
                                                "fully_equivariant"};

struct ModelFields {
  int depth = 4;
  std::vector<std::size_t> channel_plan;
  ScaleSet scale_set;
};

ModelFields bind_model_fields(Binder& b, const ModelFields& def) {
  ModelFields m;
  m.depth = b.integer<int>("depth", def.depth);
  m.channel_plan = b.integers<std::size_t>("channel_plan", def.channel_plan);
  m.scale_set.factors = b.reals("scale_factors", def.scale_set.factors);
  m.scale_set.aggregation = b.choice("scale_aggregation", def.scale_set.aggregation, aggregation_from_string);
  m.scale_set.branch_weights = b.reals("scale_branch_weights", def.scale_set.branch_weights);
  return m;
}

attacks::AttackConfig attack_of_kind(const attacks::AttackConfig& proto, attacks::AttackKind kind) {
  attacks::AttackConfig a = proto;
  a.kind = kind;
  return a;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>) {
      s += report::format_double(v[i]);
    } else if constexpr (std::is_same_v<T, std::string>) {
      s += v[i];
    } else {
      s += std::to_string(v[i]);
    }
  }
  return s;
}

std::string quote(const std::string& s) { return "\"" + s + "\""; }

}  // namespace

RunConfig parse(const std::string& text, const std::string& source) {
  const auto doc = parse_document(text, source);
  std::map<std::string, const Section*> by_name;
  std::vector<const Section*> named_models;
  for (const auto& s : doc) {
    const auto dot = s.name.find('.');
    const std::string head = s.name.substr(0, dot);
    if (!kSections.count(head) || (dot != std::string::npos && head != "model")) {
      throw ConfigError(source, s.line, s.column, "unknown section [" + s.name + "]");
    }
    if (dot != std::string::npos) {
      if (dot + 1 == s.name.size()) throw ConfigError(source, s.line, s.column, "empty model name");
      named_models.push_back(&s);
    } else {
      by_name[s.name] = &s;
    }
  }
  auto section = [&](const std::string& name) {
    auto it = by_name.find(name);
    return Binder(it == by_name.end() ? nullptr : it->second, source);
  };

  RunConfig c;

  Binder run = section("run");
  c.name = run.str("name", c.name);
  c.out = run.str("out", "runs/" + c.name);
  c.threads = run.integer<std::size_t>("threads", c.threads);
  if (c.threads < 1) throw run.error("threads", "threads must be at least 1");
  c.train.seeds = run.integers<std::uint64_t>("seeds", c.train.seeds);
  if (c.train.seeds.empty()) throw run.error("seeds", "at least one seed is required");
  run.finish();

  Binder data = section("data");
  c.data.source = data.str("source", c.data.source);
  if (c.data.source != "synthetic" && c.data.source != "cifar") {
    throw data.error("source", "source must be synthetic or cifar, got '" + c.data.source + "'");
  }
  const bool cifar = c.data.source == "cifar";
  c.data.kind = data.choice("kind", c.data.kind, synthetic_from_string);
  c.data.n_train = data.integer<std::size_t>("n_train", c.data.n_train);
  c.data.n_test = data.integer<std::size_t>("n_test", c.data.n_test);
  c.data.image_size = data.integer<std::size_t>("image_size", cifar ? 32 : c.data.image_size);
  c.data.num_classes = data.integer<std::size_t>("num_classes", cifar ? 10 : c.data.num_classes);
  c.data.channels = data.integer<std::size_t>("channels", cifar ? 3 : c.data.channels);
  c.data.seed = data.integer<std::uint64_t>("seed", c.data.seed);
  c.data.n_per_class = data.integer<std::size_t>("n_per_class", c.data.n_per_class);
  c.data.test_per_class = data.integer<std::size_t>("test_per_class", c.data.test_per_class);
  if (cifar && (c.data.image_size != 32 || c.data.num_classes != 10 || c.data.channels != 3)) {
    throw data.error("image_size", "cifar data is 32x32 with 3 channels and 10 classes");
  }
  if (c.data.n_train == 0 || c.data.n_test == 0) throw data.error("n_train", "n_train and n_test must be positive");
  if (c.data.num_classes < 2) throw data.error("num_classes", "at least two classes are required");
  data.finish();

  Binder model = section("model");
  bool archs_given = false;
  const auto arch_items = model.list("archs", kDefaultArchs, &archs_given);
  const ModelFields defaults = bind_model_fields(model, ModelFields{});
  model.finish();
  auto make_spec = [&](Architecture arch, const ModelFields& f) {
    ModelSpec s;
    s.arch = arch;
    s.depth = f.depth;
    s.channel_plan = f.channel_plan;
    s.scale_set = f.scale_set;
    s.num_classes = c.data.num_classes;
    s.in_channels = c.data.channels;
    s.image_size = c.data.image_size;
    return s;
  };
  if (archs_given || named_models.empty()) {
    for (const auto& item : arch_items) {
      const Architecture a = model.choice_item(item, "archs", architecture_from_string);
      ModelSpec s = make_spec(a, defaults);
      model.check([&] { s.validate(); }, "archs");
      c.models.push_back({to_string(a), s});
    }
  }
  for (const Section* s : named_models) {
    Binder b(s, source);
    const std::string label = s->name.substr(s->name.find('.') + 1);
    Architecture arch{};
    if (b.has("arch")) {
      arch = b.choice("arch", Architecture::baseline, architecture_from_string);
    } else {
      try {
        arch = architecture_from_string(label);
      } catch (const std::invalid_argument&) {
        throw b.error("arch", "no 'arch' key and '" + label + "' is not an architecture name");
      }
    }
    ModelSpec spec = make_spec(arch, bind_model_fields(b, defaults));
    b.check([&] { spec.validate(); });
    b.finish();
    c.models.push_back({label, spec});
  }
  if (c.models.empty()) throw model.error("archs", "no models configured");
  {
    std::set<std::string> labels;
    for (const auto& m : c.models) {
      if (!labels.insert(m.label).second) throw model.error("archs", "duplicate model label '" + m.label + "'");
    }
  }

  Binder tr = section("train");
  auto& t = c.train;
  t.optimizer = tr.choice("optimizer", t.optimizer, train::optimizer_from_string);
  t.learning_rate = tr.real("lr", t.learning_rate);
  t.schedule = tr.choice("schedule", t.schedule, train::schedule_from_string);
  t.momentum = tr.real("momentum", t.momentum);
  t.adam_beta1 = tr.real("adam_beta1", t.adam_beta1);
  t.adam_beta2 = tr.real("adam_beta2", t.adam_beta2);
  t.batch_size = tr.integer<std::size_t>("batch_size", t.batch_size);
  t.epochs = tr.integer<std::size_t>("epochs", t.epochs);
  t.weight_decay = tr.real("weight_decay", t.weight_decay);
  t.checkpoint_every = tr.integer<std::size_t>("checkpoint_every", t.checkpoint_every);
  if (tr.boolean("adversarial", false)) {
    auto a = train::default_adversarial_attack();
    a.epsilon = tr.real("adv_epsilon", a.epsilon);
    a.steps = tr.integer<int>("adv_steps", a.steps);
    a.step_ratio = tr.real("adv_step_ratio", a.step_ratio);
    a.random_start = tr.boolean("adv_random_start", a.random_start);
    t.adversarial = a;
  } else {
    for (const char* k : {"adv_epsilon", "adv_steps", "adv_step_ratio", "adv_random_start"}) {
      if (tr.has(k)) throw tr.error(k, std::string(k) + " requires adversarial = true");
    }
  }
  tr.check([&] { t.validate(); });
  tr.finish();

  Binder at = section("attack");
  attacks::AttackConfig proto;
  proto.steps = at.integer<int>("steps", proto.steps);
  proto.step_ratio = at.real("step_ratio", proto.step_ratio);
  if (at.has("step_size")) proto.step_size = at.real("step_size", 0.0);
  proto.random_start = at.boolean("random_start", proto.random_start);
  proto.seed = at.integer<std::uint64_t>("seed", proto.seed);
  c.n_eval = at.integer<std::size_t>("n_eval", c.n_eval);
  c.epsilons = at.reals("epsilons", attacks::default_epsilon_grid());
  for (const auto& item : at.list("kinds", {"fgsm", "pgd"})) {
    const auto kind = at.choice_item(item, "kinds", attacks::attack_from_string);
    for (const auto& existing : c.attacks) {
      if (existing.kind == kind) throw at.error("kinds", "attack kind listed twice");
    }
    c.attacks.push_back(attack_of_kind(proto, kind));
  }
  at.check([&] {
    if (c.attacks.empty()) throw std::invalid_argument("at least one attack kind is required");
  }, "kinds");
  at.check([&] { attack_of_kind(proto, attacks::AttackKind::pgd).validate(); },
           at.has("step_size") ? "step_size" : at.has("step_ratio") && proto.steps >= 1 ? "step_ratio" : "steps");
  at.check([&] {
    if (c.epsilons.empty()) throw std::invalid_argument("epsilon grid is empty");
    for (std::size_t i = 0; i < c.epsilons.size(); ++i) {
      if (!(c.epsilons[i] >= 0.0 && c.epsilons[i] <= 1.0)) throw std::invalid_argument("epsilons must lie in [0, 1]");
      if (i && !(c.epsilons[i] > c.epsilons[i - 1])) throw std::invalid_argument("epsilons must be strictly ascending");
    }
  }, "epsilons");
  at.finish();

  Binder ce = section("certify");
  c.certify.radius = ce.real("radius", c.certify.radius);
  c.certify.batches = ce.integer<std::size_t>("batches", c.certify.batches);
  c.certify.samples_per_batch = ce.integer<std::size_t>("samples_per_batch", c.certify.samples_per_batch);
  c.certify.estimator = ce.choice("estimator", c.certify.estimator, certify::estimator_from_string);
  c.certify.seed = ce.integer<std::uint64_t>("seed", c.certify.seed);
  c.certify_samples = ce.integer<std::size_t>("n_samples", c.certify_samples);
  c.invariant_attack = attack_of_kind(proto, ce.choice("attack", attacks::AttackKind::pgd, attacks::attack_from_string));
  c.eps_hi = ce.real("eps_hi", c.eps_hi);
  c.eps_tol = ce.real("tol", c.eps_tol);
  ce.check([&] {
    c.certify.validate();
    if (!(c.eps_hi > 0.0 && c.eps_hi <= 1.0)) throw std::invalid_argument("eps_hi must be in (0, 1]");
    if (!(c.eps_tol > 0.0)) throw std::invalid_argument("tol must be positive");
  });
  ce.finish();

  Binder di = section("diagnose");
  c.diagnose.n_probe = di.integer<std::size_t>("n_probe", c.diagnose.n_probe);
  c.diagnose.suppression.angle_degrees = di.real("angle", c.diagnose.suppression.angle_degrees);
  c.diagnose.suppression.trials = di.integer<std::size_t>("trials", c.diagnose.suppression.trials);
  c.diagnose.suppression.step = di.real("step", c.diagnose.suppression.step);
  c.diagnose.suppression.seed = di.integer<std::uint64_t>("seed", c.diagnose.suppression.seed);
  c.diagnose.tolerance = di.real("tolerance", c.diagnose.tolerance);
  c.diagnose.scale_factors = di.reals("scale_factors", c.diagnose.scale_factors);
  di.check([&] {
    if (c.diagnose.suppression.trials == 0) throw std::invalid_argument("trials must be at least 1");
    if (!(c.diagnose.tolerance > 0.0)) throw std::invalid_argument("tolerance must be positive");
  });
  di.finish();

  Binder co = section("corruption");
  std::vector<CorruptionKind> kinds;
  std::vector<std::string> all;
  for (auto k : kAllCorruptions) all.push_back(to_string(k));
  for (const auto& item : co.list("kinds", all)) {
    if (item.text == "all") {
      kinds.assign(kAllCorruptions.begin(), kAllCorruptions.end());
      continue;
    }
    kinds.push_back(co.choice_item(item, "kinds", corruption_from_string));
  }
  const auto severities = co.integers<int>("severities", {3});
  const auto cseed = co.integer<std::uint64_t>("seed", 0);
  for (auto k : kinds) {
    for (int s : severities) {
      if (s < 1 || s > 5) throw co.error("severities", "severity must be in 1..5");
      c.corruptions.push_back(CorruptionSpec{k, s, cseed, std::nullopt});
    }
  }
  c.corruption_attack = attack_of_kind(proto, co.choice("attack", attacks::AttackKind::fgsm, attacks::attack_from_string));
  c.corruption_epsilons = co.reals("epsilons", {0.01, 0.02, 0.03, 0.04});
  co.check([&] {
    for (std::size_t i = 0; i < c.corruption_epsilons.size(); ++i) {
      if (!(c.corruption_epsilons[i] >= 0.0 && c.corruption_epsilons[i] <= 1.0)) {
        throw std::invalid_argument("epsilons must lie in [0, 1]");
      }
      if (i && !(c.corruption_epsilons[i] > c.corruption_epsilons[i - 1])) {
        throw std::invalid_argument("epsilons must be strictly ascending");
      }
    }
    if (!c.corruptions.empty() && c.corruption_epsilons.empty()) throw std::invalid_argument("epsilons is empty");
  }, "epsilons");
  co.finish();

  Binder ck = section("checkpoint");
  if (ck.has("path")) c.checkpoint = fs::path(ck.str("path", ""));
  ck.finish();
  return c;
}

RunConfig load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), 0, 0, "cannot read config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::snapshot(bool with_out) const {
  std::ostringstream os;
  const auto fd = report::format_double;
  os << "# " << kConfigSchema << " (resolved)\n";
  os << "[run]\nname = " << quote(name) << "\n";
  if (with_out) os << "out = " << quote(out.string()) << "\n";
  os << "threads = " << threads
     << "\nseeds = " << join(train.seeds) << "\n\n";
  os << "[data]\nsource = " << data.source << "\nkind = " << to_string(data.kind) << "\nn_train = " << data.n_train
     << "\nn_test = " << data.n_test << "\nimage_size = " << data.image_size << "\nnum_classes = " << data.num_classes
     << "\nchannels = " << data.channels << "\nseed = " << data.seed << "\nn_per_class = " << data.n_per_class
     << "\ntest_per_class = " << data.test_per_class << "\n\n";
  for (const auto& m : models) {
    os << "[model." << m.label << "]\narch = " << to_string(m.spec.arch) << "\ndepth = " << m.spec.depth
       << "\nchannel_plan = " << join(m.spec.channel_plan) << "\nscale_factors = " << join(m.spec.scale_set.factors)
       << "\nscale_aggregation = " << to_string(m.spec.scale_set.aggregation)
       << "\nscale_branch_weights = " << join(m.spec.scale_set.branch_weights) << "\n\n";
  }
  os << "[train]\noptimizer = " << train::to_string(train.optimizer) << "\nlr = " << fd(train.learning_rate)
     << "\nschedule = " << train::to_string(train.schedule) << "\nmomentum = " << fd(train.momentum)
     << "\nadam_beta1 = " << fd(train.adam_beta1) << "\nadam_beta2 = " << fd(train.adam_beta2)
     << "\nbatch_size = " << train.batch_size << "\nepochs = " << train.epochs
     << "\nweight_decay = " << fd(train.weight_decay) << "\ncheckpoint_every = " << train.checkpoint_every
     << "\nadversarial = " << (train.adversarial ? "true" : "false") << "\n";
  if (train.adversarial) {
    os << "adv_epsilon = " << fd(train.adversarial->epsilon) << "\nadv_steps = " << train.adversarial->steps
       << "\nadv_step_ratio = " << fd(train.adversarial->step_ratio)
       << "\nadv_random_start = " << (train.adversarial->random_start ? "true" : "false") << "\n";
  }
  const auto& p = attacks.front();
  std::vector<std::string> kinds;
  for (const auto& a : attacks) kinds.push_back(attacks::to_string(a.kind));
  os << "\n[attack]\nkinds = " << join(kinds) << "\nepsilons = " << join(epsilons) << "\nsteps = " << p.steps
     << "\nstep_ratio = " << fd(p.step_ratio) << "\n";
  if (p.step_size) os << "step_size = " << fd(*p.step_size) << "\n";
  os << "random_start = " << (p.random_start ? "true" : "false") << "\nseed = " << p.seed << "\nn_eval = " << n_eval
     << "\n\n";
  os << "[certify]\nradius = " << fd(certify.radius) << "\nbatches = " << certify.batches
     << "\nsamples_per_batch = " << certify.samples_per_batch
     << "\nestimator = " << certify::to_string(certify.estimator) << "\nseed = " << certify.seed
     << "\nn_samples = " << certify_samples << "\nattack = " << attacks::to_string(invariant_attack.kind)
     << "\neps_hi = " << fd(eps_hi) << "\ntol = " << fd(eps_tol) << "\n\n";
  os << "[diagnose]\nn_probe = " << diagnose.n_probe << "\nangle = " << fd(diagnose.suppression.angle_degrees)
     << "\ntrials = " << diagnose.suppression.trials << "\nstep = " << fd(diagnose.suppression.step)
     << "\nseed = " << diagnose.suppression.seed << "\ntolerance = " << fd(diagnose.tolerance)
     << "\nscale_factors = " << join(diagnose.scale_factors) << "\n\n";
  std::vector<std::string> ckinds;
  std::vector<int> sevs;
  for (const auto& cs : corruptions) {
    if (std::find(ckinds.begin(), ckinds.end(), to_string(cs.kind)) == ckinds.end()) ckinds.push_back(to_string(cs.kind));
    if (std::find(sevs.begin(), sevs.end(), cs.severity) == sevs.end()) sevs.push_back(cs.severity);
  }
  os << "[corruption]\nkinds = " << join(ckinds) << "\nseverities = " << join(sevs)
     << "\nseed = " << (corruptions.empty() ? 0 : corruptions.front().seed)
     << "\nattack = " << attacks::to_string(corruption_attack.kind) << "\nepsilons = " << join(corruption_epsilons)
     << "\n";
  if (checkpoint) os << "\n[checkpoint]\npath = " << quote(checkpoint->string()) << "\n";
  return os.str();
}

train::MatrixConfig RunConfig::matrix() const {
  train::MatrixConfig m;
  m.specs = models;
  m.train = train;
  m.attacks = attacks;
  m.epsilons = epsilons;
  m.corruptions = corruptions;
  m.corruption_attack = corruption_attack;
  m.corruption_epsilons = corruption_epsilons;
  m.clever_samples = certify_samples;
  m.certify = certify;
  m.checkpoint_root = out / "checkpoints";
  return m;
}

}  // namespace equirobust::config
