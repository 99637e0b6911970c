// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/eval.hpp"

#include <fstream>
#include <set>

namespace c2r {

/// Attack-bench settings: matched PGD(T) vs cold-cache LS-PGD scoring passes.
struct BenchConfig {
  DatasetDescriptor dataset{"patch-images", 3, 200, {3, 16, 16}, {0.0, 1.0}, 7, 0.5, 0.15, {}};
  ModelSpec model{"convnet3", {}, 8};
  ThreatSpec threat = ThreatSpec::with_epsilon(8.0 / 255.0);
  int pretrain_epochs = 30;
  std::size_t samples = 256;
  int repeats = 3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output = "runs/default";
  DatasetDescriptor dataset;
  DistillConfig distill;
  StudentConfig student;
  std::vector<AttackSpec> attacks;
  BenchConfig bench;

  void validate() const {
    dataset.validate();
    distill.validate();
    bench.dataset.validate();
    bench.threat.validate();
    if (student.epochs < 0) throw ConfigError("eval.student.epochs must be >= 0");
    if (!(student.lr >= 0.0)) throw ConfigError("eval.student.lr must be >= 0");
    for (std::size_t i = 0; i < attacks.size(); ++i) {
      if (!AttackSpec::known(attacks[i].name))
        throw ConfigError("eval.attacks[" + std::to_string(i) + "].name: unknown attack '" + attacks[i].name + "'");
      attacks[i].threat.validate();
    }
    if (bench.samples < 1) throw ConfigError("bench.samples must be >= 1");
    if (bench.repeats < 1) throw ConfigError("bench.repeats must be >= 1");
  }
};

namespace detail {

// Walks a JSON object, tracking the dotted path for error messages and
// rejecting keys that were never read.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError("missing required field '" + where(key) + "'");
      return;
    }
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where(key) + ": expected a non-negative integer");
      out = v.get<T>();
    } else {
      if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
      out = v.get<T>();
    }
  }

  /// Accepts a number or a rational string "p/q", e.g. "2/255".
  void get_rational(const std::string& key, double& out, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError("missing required field '" + where(key) + "'");
      return;
    }
    const auto& v = j_.at(key);
    if (v.is_number()) {
      out = v.get<double>();
      return;
    }
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a number or a fraction like \"2/255\"");
    const auto s = v.get<std::string>();
    double p = 0.0, q = 0.0;
    char slash = 0, extra = 0;
    std::istringstream is(s);
    if (!(is >> p >> slash >> q) || slash != '/' || (is >> extra) || q == 0.0)
      throw ConfigError(where(key) + ": cannot parse '" + s + "' as a fraction");
    out = p / q;
  }

  FieldReader child(const std::string& key) {
    seen_.insert(key);
    return FieldReader(j_.at(key), where(key));
  }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where(k) + ": unknown field");
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline SampleShape read_shape(FieldReader& r, const std::string& key, SampleShape fallback) {
  if (!r.has(key)) return fallback;
  const auto& v = r.raw(key);
  if (!v.is_array() || v.size() != 3)
    throw ConfigError(r.where(key) + ": expected [channels, height, width]");
  for (const auto& e : v)
    if (!e.is_number_integer() || e.get<Index>() < 1)
      throw ConfigError(r.where(key) + ": dimensions must be positive integers");
  return {v[0].get<Index>(), v[1].get<Index>(), v[2].get<Index>()};
}

inline InputRange read_range(FieldReader& r, const std::string& key, InputRange fallback) {
  if (!r.has(key)) return fallback;
  const auto& v = r.raw(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError(r.where(key) + ": expected [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

inline DatasetDescriptor read_dataset(FieldReader r, DatasetDescriptor d) {
  r.get("kind", d.kind, true);
  r.get("num_classes", d.num_classes);
  r.get("samples_per_class", d.samples_per_class);
  if (r.has("shape")) d.shape = read_shape(r, "shape", d.shape);
  d.range = read_range(r, "range", d.range);
  r.get("seed", d.seed);
  r.get("train_fraction", d.train_fraction);
  r.get("sigma", d.sigma);
  r.get("path", d.path);
  r.finish();
  return d;
}

inline ModelSpec read_model(FieldReader r, ModelSpec m) {
  r.get("kind", m.kind, true);
  if (r.has("hidden")) {
    const auto& v = r.raw("hidden");
    if (!v.is_array()) throw ConfigError(r.where("hidden") + ": expected an array of widths");
    m.hidden.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<Index>() < 1)
        throw ConfigError(r.where("hidden") + ": widths must be positive integers");
      m.hidden.push_back(e.get<Index>());
    }
  }
  r.get("channels", m.channels);
  if (m.kind != "mlp" && m.kind != "convnet3") throw ConfigError(r.where("kind") + ": unknown model '" + m.kind + "'");
  if (m.channels < 1) throw ConfigError(r.where("channels") + ": must be >= 1");
  r.finish();
  return m;
}

// epsilon (rational), alpha (default epsilon / 4), steps, shortlist settings.
inline ThreatSpec read_threat(FieldReader& r, ThreatSpec t, bool eps_required) {
  bool alpha_given = r.has("alpha");
  r.get_rational("epsilon", t.epsilon, eps_required);
  if (!alpha_given) t.alpha = ThreatSpec::with_epsilon(t.epsilon).alpha;
  r.get_rational("alpha", t.alpha);
  r.get("steps", t.steps);
  r.get("shortlist_beta", t.shortlist_beta);
  r.get("shortlist_len", t.shortlist_len);
  return t;
}

inline nlohmann::json threat_json(const ThreatSpec& t) {
  return {{"epsilon", t.epsilon},
          {"alpha", t.alpha},
          {"steps", t.steps},
          {"shortlist_beta", t.shortlist_beta},
          {"shortlist_len", t.shortlist_len}};
}

inline nlohmann::json dataset_json(const DatasetDescriptor& d) {
  return {{"kind", d.kind},
          {"num_classes", d.num_classes},
          {"samples_per_class", d.samples_per_class},
          {"shape", {d.shape.channels, d.shape.height, d.shape.width}},
          {"range", {d.range.lo, d.range.hi}},
          {"seed", d.seed},
          {"train_fraction", d.train_fraction},
          {"sigma", d.sigma},
          {"path", d.path}};
}

inline nlohmann::json model_json(const ModelSpec& m) {
  return {{"kind", m.kind}, {"hidden", m.hidden}, {"channels", m.channels}};
}

}  // namespace detail

/// Parses a run config. Errors name the offending field by dotted path.
inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::FieldReader;
  RunConfig c;
  FieldReader top(j, "");
  top.get("seed", c.seed, true);
  top.get("output", c.output);
  if (!top.has("dataset")) throw ConfigError("missing required field 'dataset'");
  c.dataset = detail::read_dataset(top.child("dataset"), c.dataset);

  if (!top.has("distill")) throw ConfigError("missing required field 'distill'");
  {
    auto r = top.child("distill");
    auto& d = c.distill;
    r.get("eta", d.eta, true);
    r.get("tau", d.tau);
    r.get("ipc", d.ipc, true);
    r.get("iterations", d.iterations);
    r.get("real_batch_size", d.real_batch_size);
    r.get("curriculum_batch_size", d.curriculum_batch_size);
    d.threat = detail::read_threat(r, d.threat, true);
    r.get("queue_capacity", d.queue_capacity);
    r.get("hard_negatives", d.hard_negatives);
    r.get("proxy_dim", d.proxy_dim);
    r.get("lr_model", d.lr_model);
    r.get("momentum", d.momentum);
    r.get("weight_decay", d.weight_decay);
    r.get("lr_images", d.lr_images);
    r.get("init_mode", d.init_mode);
    r.get("robustness_loss", d.robustness_loss);
    if (r.has("model")) d.model = detail::read_model(r.child("model"), d.model);
    r.get("model_restart_every", d.model_restart_every);
    r.get("pretrain_epochs", d.pretrain_epochs);
    r.get("curriculum", d.curriculum);
    r.get("global_sort", d.global_sort);
    r.get("symmetric_anchors", d.symmetric_anchors);
    r.get("queue_only_negatives", d.queue_only_negatives);
    r.get("enqueue_adversarial", d.enqueue_adversarial);
    r.get("mix_real_adversaries", d.mix_real_adversaries);
    if (d.init_mode != "real-sample" && d.init_mode != "noise")
      throw ConfigError(r.where("init_mode") + ": expected 'real-sample' or 'noise'");
    r.finish();
  }
  c.student.model = c.distill.model;

  if (top.has("eval")) {
    auto r = top.child("eval");
    if (r.has("student")) {
      auto s = r.child("student");
      if (s.has("model")) c.student.model = detail::read_model(s.child("model"), c.student.model);
      s.get("epochs", c.student.epochs);
      s.get("lr", c.student.lr);
      s.get("momentum", c.student.momentum);
      s.get("weight_decay", c.student.weight_decay);
      s.get("batch_size", c.student.batch_size);
      s.finish();
    }
    if (r.has("attacks")) {
      const auto& arr = r.raw("attacks");
      if (!arr.is_array()) throw ConfigError("eval.attacks: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        FieldReader a(arr[i], "eval.attacks[" + std::to_string(i) + "]");
        AttackSpec spec;
        a.get("name", spec.name, true);
        spec.threat = detail::read_threat(a, spec.threat, true);
        a.get("decay", spec.decay);
        a.get("kappa", spec.kappa);
        a.get("neighbors", spec.neighbors);
        a.get("neighborhood_scale", spec.neighborhood_scale);
        a.get("noise_std", spec.noise_std);
        a.get("rescale", spec.rescale);
        a.get("jitter_scale", spec.jitter_scale);
        a.get("seed", spec.seed);
        a.finish();
        c.attacks.push_back(spec);
      }
    }
    r.finish();
  }

  if (top.has("bench")) {
    auto r = top.child("bench");
    auto& b = c.bench;
    if (r.has("dataset")) b.dataset = detail::read_dataset(r.child("dataset"), b.dataset);
    if (r.has("model")) b.model = detail::read_model(r.child("model"), b.model);
    b.threat = detail::read_threat(r, b.threat, false);
    r.get("pretrain_epochs", b.pretrain_epochs);
    r.get("samples", b.samples);
    r.get("repeats", b.repeats);
    r.finish();
  }
  top.finish();

  c.distill.seed = c.seed;
  c.distill.threat.range = c.dataset.range;
  for (auto& a : c.attacks) a.threat.range = c.dataset.range;
  c.bench.threat.range = c.bench.dataset.range;
  c.validate();
  return c;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Every field written out; object keys sorted.
inline nlohmann::json to_json(const RunConfig& c) {
  using namespace detail;
  const auto& d = c.distill;
  nlohmann::json distill = threat_json(d.threat);
  distill.update({{"eta", d.eta},
                  {"tau", d.tau},
                  {"ipc", d.ipc},
                  {"iterations", d.iterations},
                  {"real_batch_size", d.real_batch_size},
                  {"curriculum_batch_size", d.curriculum_batch_size},
                  {"queue_capacity", d.queue_capacity},
                  {"hard_negatives", d.hard_negatives},
                  {"proxy_dim", d.proxy_dim},
                  {"lr_model", d.lr_model},
                  {"momentum", d.momentum},
                  {"weight_decay", d.weight_decay},
                  {"lr_images", d.lr_images},
                  {"init_mode", d.init_mode},
                  {"robustness_loss", d.robustness_loss},
                  {"model", model_json(d.model)},
                  {"model_restart_every", d.model_restart_every},
                  {"pretrain_epochs", d.pretrain_epochs},
                  {"curriculum", d.curriculum},
                  {"global_sort", d.global_sort},
                  {"symmetric_anchors", d.symmetric_anchors},
                  {"queue_only_negatives", d.queue_only_negatives},
                  {"enqueue_adversarial", d.enqueue_adversarial},
                  {"mix_real_adversaries", d.mix_real_adversaries}});
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : c.attacks) {
    nlohmann::json x = threat_json(a.threat);
    x.update({{"name", a.name},
              {"decay", a.decay},
              {"kappa", a.kappa},
              {"neighbors", a.neighbors},
              {"neighborhood_scale", a.neighborhood_scale},
              {"noise_std", a.noise_std},
              {"rescale", a.rescale},
              {"jitter_scale", a.jitter_scale},
              {"seed", a.seed}});
    attacks.push_back(x);
  }
  nlohmann::json bench = threat_json(c.bench.threat);
  bench.update({{"dataset", dataset_json(c.bench.dataset)},
                {"model", model_json(c.bench.model)},
                {"pretrain_epochs", c.bench.pretrain_epochs},
                {"samples", c.bench.samples},
                {"repeats", c.bench.repeats}});
  return {{"seed", c.seed},
          {"output", c.output},
          {"dataset", dataset_json(c.dataset)},
          {"distill", distill},
          {"eval",
           {{"student",
             {{"model", model_json(c.student.model)},
              {"epochs", c.student.epochs},
              {"lr", c.student.lr},
              {"momentum", c.student.momentum},
              {"weight_decay", c.student.weight_decay},
              {"batch_size", c.student.batch_size}}},
            {"attacks", attacks}}},
          {"bench", bench}};
}

inline std::string canonical_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

/// Hash of the canonical serialization; independent of key order in the source file.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

/// Default evaluation attack list at one epsilon.
inline std::vector<AttackSpec> default_attacks(double epsilon, InputRange range) {
  std::vector<AttackSpec> out;
  for (const char* n : {"fgsm", "pgd", "cw", "vmi-fgsm", "jitter", "mim"}) {
    AttackSpec a;
    a.name = n;
    a.threat = ThreatSpec::with_epsilon(epsilon, range);
    out.push_back(a);
  }
  return out;
}

}  // namespace c2r
