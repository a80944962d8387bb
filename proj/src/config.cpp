#include "stabmoe/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace stabmoe {

namespace {

using nlohmann::json;

std::string join_issues(const std::vector<std::string>& issues) {
  std::string out = "invalid config";
  for (const auto& s : issues) out += "\n  " + s;
  return out;
}

// Reads one object block, remembering which keys were consumed.
class Block {
 public:
  Block(const json* node, std::string path, std::vector<std::string>& issues)
      : node_(node), path_(std::move(path)), issues_(issues) {
    if (node_ != nullptr && !node_->is_object()) {
      fail("", "expected an object");
      node_ = nullptr;
    }
  }

  void real(const char* key, double& target, const std::function<bool(double)>& ok,
            const char* rule) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_number()) return fail(key, "expected a number");
    const double x = v->get<double>();
    if (!std::isfinite(x) || !ok(x)) return fail(key, std::string(rule) + ", got " + v->dump());
    target = x;
  }

  template <class Int>
  void integer(const char* key, Int& target, std::uint64_t lo, std::uint64_t hi) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
      return fail(key, "expected a non-negative integer, got " + v->dump());
    const auto x = v->get<std::uint64_t>();
    if (x < lo || x > hi)
      return fail(key, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " +
                           v->dump());
    target = static_cast<Int>(x);
  }

  void boolean(const char* key, bool& target) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_boolean()) return fail(key, "expected true or false, got " + v->dump());
    target = v->get<bool>();
  }

  void text(const char* key, std::string& target) {
    const json* v = take(key);
    if (v == nullptr) return;
    if (!v->is_string() || v->get<std::string>().empty())
      return fail(key, "expected a non-empty string, got " + v->dump());
    target = v->get<std::string>();
  }

  const json* child(const char* key) { return take(key); }

  [[nodiscard]] std::string path(const char* key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void fail(const std::string& key, const std::string& message) {
    const std::string where = key.empty() ? path_ : path(key.c_str());
    issues_.push_back((where.empty() ? std::string("<root>") : where) + ": " + message);
  }

  void finish() {
    if (node_ == nullptr) return;
    for (const auto& item : node_->items())
      if (!seen_.count(item.key())) fail(item.key(), "unknown key");
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    if (node_ == nullptr) return nullptr;
    const auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

  const json* node_;
  std::string path_;
  std::vector<std::string>& issues_;
  std::set<std::string> seen_;
};

bool positive(double x) { return x > 0.0; }
bool non_negative(double x) { return x >= 0.0; }

constexpr std::uint64_t kMaxDim = 512;

void read_stream(Block& b, StreamConfig& s) {
  b.integer("n_tasks", s.n_tasks, 1, 64);
  b.integer("input_dim", s.input_dim, 1, kMaxDim);
  b.integer("classes", s.classes, 2, 256);
  b.real("shift_strength", s.shift_strength, [](double x) { return x >= 0.0 && x <= 1.0; },
         "must lie in [0, 1]");
  b.real("noise_std", s.noise_std, non_negative, "must be >= 0");
  b.integer("train_size", s.train_size, 1, 10'000'000);
  b.integer("test_size", s.test_size, 1, 10'000'000);
  b.real("centroid_radius", s.centroid_radius, positive, "must be > 0");
  b.real("max_angle", s.max_angle, [](double x) { return x >= 0.0 && x < std::numbers::pi; },
         "must lie in [0, pi)");
}

void read_model(Block& b, ModelShape& m) {
  b.integer("d", m.width, 1, kMaxDim);
  b.integer("n_experts", m.n_experts, 1, 256);
  b.integer("rank", m.rank, 1, kMaxDim);
  b.integer("layers", m.layers, 1, 16);
  std::string act(activation_name(m.activation));
  b.text("activation", act);
  try {
    m.activation = parse_activation(act);
  } catch (const std::invalid_argument&) {
    b.fail("activation", "expected \"tanh\" or \"identity\", got \"" + act + "\"");
  }
  b.real("readout_init_std", m.readout_init_std, non_negative, "must be >= 0");
}

void read_train(Block& b, TrainConfig& t, std::vector<std::string>& issues) {
  b.real("eta_peak", t.eta_peak, positive, "must be > 0");
  b.real("warmup_ratio", t.warmup_ratio, [](double x) { return x >= 0.0 && x < 1.0; },
         "must lie in [0, 1)");
  b.real("min_lr_ratio", t.min_lr_ratio, [](double x) { return x >= 0.0 && x <= 1.0; },
         "must lie in [0, 1]");
  b.real("delta", t.delta, [](double x) { return x > 0.0 && x <= 1.0; }, "must lie in (0, 1]");
  b.integer("window", t.window, 1, kMaxDim);
  b.real("mu_rel", t.mu_rel, positive, "must be > 0");
  b.real("tau_score", t.tau_score, [](double x) { return x >= -1.0 && x <= 1.0; },
         "must lie in [-1, 1]");
  b.integer("epochs_per_task", t.epochs_per_task, 1, 1000);
  b.integer("batch_size", t.batch_size, 1, 1'000'000);
  b.real("freeze_warmup_fraction", t.freeze_warmup_fraction,
         [](double x) { return x >= 0.0 && x <= 1.0; }, "must lie in [0, 1]");
  b.boolean("freeze_per_batch", t.freeze_per_batch);
  b.integer("decompose_stride", t.decompose_stride, 1, 1'000'000);
  b.integer("top_k", t.top_k, 0, 256);
  b.integer("probe_epochs", t.probe_epochs, 0, 1000);
  Block toggles(b.child("toggles"), b.path("toggles"), issues);
  toggles.boolean("router_stabilizer", t.toggles.router_stabilizer);
  toggles.boolean("expert_stabilizer", t.toggles.expert_stabilizer);
  toggles.boolean("activation_gate", t.toggles.activation_gate);
  toggles.finish();
}

void read_output(Block& b, OutputConfig& o, std::vector<std::string>& issues) {
  b.text("directory", o.directory);
  b.boolean("snapshots", o.snapshots);
  b.boolean("probe_every_task", o.probe_every_task);
  if (const json* formats = b.child("formats")) {
    if (!formats->is_array() || formats->empty()) {
      b.fail("formats", "expected a non-empty array of \"csv\" / \"json\"");
    } else {
      o.csv = o.json = false;
      for (const auto& f : *formats) {
        if (f == "csv") o.csv = true;
        else if (f == "json") o.json = true;
        else b.fail("formats", "unsupported format " + f.dump());
      }
    }
  }
  (void)issues;
}

}  // namespace

RunSpec RunConfig::run_spec(std::uint64_t seed) const {
  RunSpec spec;
  spec.stream = stream;
  spec.stream.seed = seed;
  spec.model = model;
  spec.model.input_dim = stream.input_dim;
  spec.model.classes = stream.classes;
  spec.train = train;
  spec.train.seed = seed;
  spec.probe_every_task = output.probe_every_task;
  spec.keep_snapshots = output.snapshots;
  return spec;
}

ConfigError::ConfigError(std::vector<std::string> issues)
    : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

RunConfig parse_config(const json& doc) {
  std::vector<std::string> issues;
  RunConfig config;
  Block root(&doc, "", issues);

  Block stream(root.child("stream"), "stream", issues);
  read_stream(stream, config.stream);
  stream.finish();
  Block model(root.child("model"), "model", issues);
  read_model(model, config.model);
  model.finish();
  Block train(root.child("train"), "train", issues);
  read_train(train, config.train, issues);
  train.finish();
  Block output(root.child("output"), "output", issues);
  read_output(output, config.output, issues);
  output.finish();

  if (const json* seeds = root.child("seeds")) {
    if (!seeds->is_array() || seeds->empty()) {
      issues.emplace_back("seeds: expected a non-empty array of non-negative integers");
    } else {
      config.seeds.clear();
      std::set<std::uint64_t> unique;
      for (std::size_t i = 0; i < seeds->size(); ++i) {
        const json& s = (*seeds)[i];
        if (!s.is_number_unsigned()) {
          issues.push_back("seeds[" + std::to_string(i) + "]: expected a non-negative integer, got " +
                           s.dump());
          continue;
        }
        const auto v = s.get<std::uint64_t>();
        if (!unique.insert(v).second)
          issues.push_back("seeds[" + std::to_string(i) + "]: duplicate seed " + std::to_string(v));
        config.seeds.push_back(v);
      }
    }
  }
  root.finish();

  if (issues.empty()) {
    if (config.model.rank > config.model.width)
      issues.push_back("model.rank: must not exceed model.d (" + std::to_string(config.model.width) + ")");
    if (config.train.top_k > config.model.n_experts)
      issues.push_back("train.top_k: must not exceed model.n_experts");
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({path + ": cannot open config file"});
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ConfigError({path + ": malformed JSON (" + e.what() + ")"});
  }
  return parse_config(doc);
}

json config_to_json(const RunConfig& c) {
  json formats = json::array();
  if (c.output.csv) formats.push_back("csv");
  if (c.output.json) formats.push_back("json");
  return json{
      {"stream",
       {{"n_tasks", c.stream.n_tasks},
        {"input_dim", c.stream.input_dim},
        {"classes", c.stream.classes},
        {"shift_strength", c.stream.shift_strength},
        {"noise_std", c.stream.noise_std},
        {"train_size", c.stream.train_size},
        {"test_size", c.stream.test_size},
        {"centroid_radius", c.stream.centroid_radius},
        {"max_angle", c.stream.max_angle}}},
      {"model",
       {{"d", c.model.width},
        {"n_experts", c.model.n_experts},
        {"rank", c.model.rank},
        {"layers", c.model.layers},
        {"activation", std::string(activation_name(c.model.activation))},
        {"readout_init_std", c.model.readout_init_std}}},
      {"train",
       {{"eta_peak", c.train.eta_peak},
        {"warmup_ratio", c.train.warmup_ratio},
        {"min_lr_ratio", c.train.min_lr_ratio},
        {"delta", c.train.delta},
        {"window", c.train.window},
        {"mu_rel", c.train.mu_rel},
        {"tau_score", c.train.tau_score},
        {"epochs_per_task", c.train.epochs_per_task},
        {"batch_size", c.train.batch_size},
        {"freeze_warmup_fraction", c.train.freeze_warmup_fraction},
        {"freeze_per_batch", c.train.freeze_per_batch},
        {"decompose_stride", c.train.decompose_stride},
        {"top_k", c.train.top_k},
        {"probe_epochs", c.train.probe_epochs},
        {"toggles",
         {{"router_stabilizer", c.train.toggles.router_stabilizer},
          {"expert_stabilizer", c.train.toggles.expert_stabilizer},
          {"activation_gate", c.train.toggles.activation_gate}}}}},
      {"output",
       {{"directory", c.output.directory},
        {"snapshots", c.output.snapshots},
        {"probe_every_task", c.output.probe_every_task},
        {"formats", formats}}},
      {"seeds", c.seeds}};
}

void apply_toggle(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const std::string text(assignment);
  if (eq == std::string_view::npos)
    throw ConfigError({"--toggle " + text + ": expected NAME=on|off"});
  const std::string_view name = assignment.substr(0, eq);
  const std::string_view value = assignment.substr(eq + 1);
  bool on = false;
  if (value == "on") on = true;
  else if (value != "off") throw ConfigError({"--toggle " + text + ": value must be on or off"});
  Toggles& t = config.train.toggles;
  if (name == "router_stabilizer") t.router_stabilizer = on;
  else if (name == "expert_stabilizer") t.expert_stabilizer = on;
  else if (name == "activation_gate") t.activation_gate = on;
  else
    throw ConfigError({"--toggle " + text +
                       ": unknown toggle (router_stabilizer, expert_stabilizer, activation_gate)"});
}

std::vector<std::uint64_t> parse_seed_list(std::string_view list) {
  std::vector<std::uint64_t> seeds;
  std::set<std::uint64_t> unique;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const auto comma = std::min(list.find(',', pos), list.size());
    const std::string_view item = list.substr(pos, comma - pos);
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size())
      throw ConfigError({"--seeds: \"" + std::string(item) + "\" is not a non-negative integer"});
    if (!unique.insert(v).second) throw ConfigError({"--seeds: duplicate seed " + std::to_string(v)});
    seeds.push_back(v);
    pos = comma + 1;
  }
  return seeds;
}

}  // namespace stabmoe
