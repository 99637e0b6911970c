// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/config.hpp"

#include <cstdlib>
#include <map>
#include <optional>

namespace c2r {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitNumeric = 3 };

/// Environment variable holding the root for relative output directories.
inline constexpr const char* kOutRootEnv = "C2R_OUT_ROOT";

struct CommandOptions {
  std::string config_path;
  std::string out;                     // overrides config "output"
  std::optional<std::uint64_t> seed;   // overrides config "seed"
  bool trace = false;                  // distill: per-epoch score dump
  std::string checkpoint;              // eval
  std::vector<std::string> inputs;     // report
};

namespace detail {

inline std::filesystem::path resolve_out(const std::string& configured, const std::string& flag) {
  std::filesystem::path p = flag.empty() ? configured : flag;
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutRootEnv); root && *root) p = std::filesystem::path(root) / p;
  }
  return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IngestionError("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_with_overrides(const CommandOptions& opt, std::filesystem::path& out_dir) {
  if (opt.config_path.empty()) throw ConfigError("--config is required");
  RunConfig cfg = load_config(opt.config_path);
  if (opt.seed) {
    cfg.seed = *opt.seed;
    cfg.distill.seed = *opt.seed;
  }
  out_dir = resolve_out(cfg.output, opt.out);
  std::filesystem::create_directories(out_dir);
  return cfg;
}

// Runs body, mapping error categories onto the exit-code contract. Numeric
// failures leave a diagnostics file in the output directory.
template <class Body>
int guarded(std::ostream& err, const std::filesystem::path* out_dir, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IngestionError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::filesystem::path diag = (out_dir && !out_dir->empty() ? *out_dir : std::filesystem::path(".")) /
                                 "diagnostics.txt";
    try {
      write_text(diag, std::string("numeric failure: ") + e.what() + "\n");
      err << "numeric error: " << e.what() << "\ndiagnostics: " << diag.string() << "\n";
    } catch (const std::exception&) {
      err << "numeric error: " << e.what() << "\n";
    }
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "filesystem error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace detail

/// distill: writes synthetic.c2r, manifest.txt, config.json and (with trace) scores.csv.
inline int cmd_distill(const CommandOptions& opt, std::ostream& log, std::ostream& err) {
  std::filesystem::path out_dir;
  return detail::guarded(err, &out_dir, [&] {
    RunConfig cfg = detail::load_with_overrides(opt, out_dir);
    Dataset data = load_dataset(cfg.dataset);
    const std::string hash = config_hash(cfg);
    std::ofstream trace;
    if (opt.trace) {
      trace.open(out_dir / "scores.csv");
      trace << "epoch,sample_id,margin_estimate,score,batch\n";
    }
    auto result = run_distillation(cfg.distill, data, opt.trace ? &trace : nullptr);
    make_checkpoint(result.state, hash).save(out_dir / "synthetic.c2r");
    detail::write_text(out_dir / "manifest.txt", render_manifest(cfg.distill, result.state, hash, result.seconds));
    detail::write_text(out_dir / "config.json", canonical_text(cfg));
    log << "wrote " << (out_dir / "synthetic.c2r").string() << " (config " << hash << ", "
        << result.state.epoch << " iterations, " << result.seconds << " s)\n";
    return int{kExitOk};
  });
}

/// eval: trains a student on the checkpoint, writes report.csv, summary.json, timings.json.
inline int cmd_eval(const CommandOptions& opt, std::ostream& log, std::ostream& err) {
  std::filesystem::path out_dir;
  return detail::guarded(err, &out_dir, [&] {
    RunConfig cfg = detail::load_with_overrides(opt, out_dir);
    if (opt.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    SyntheticDataset syn = get_synthetic(Container::load(opt.checkpoint));
    if (syn.num_classes != cfg.dataset.num_classes)
      throw ConfigError("checkpoint has " + std::to_string(syn.num_classes) + " classes, config dataset.num_classes is " +
                        std::to_string(cfg.dataset.num_classes));
    if (!(syn.shape == cfg.dataset.shape))
      throw ConfigError("checkpoint sample shape does not match config dataset.shape");
    Dataset data = load_dataset(cfg.dataset);
    auto attacks = cfg.attacks.empty() ? default_attacks(cfg.distill.threat.epsilon, cfg.dataset.range) : cfg.attacks;
    auto t0 = std::chrono::steady_clock::now();
    auto student = train_student(syn, cfg.student, cfg.seed);
    double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EvalReport rep = evaluate(*student, data.test, attacks);
    rep.seed = cfg.seed;

    nlohmann::json summary = rep.summary();
    summary["ipc"] = syn.ipc;
    summary["config_hash"] = config_hash(cfg);
    nlohmann::json timings;
    timings["train_seconds"] = train_s;
    timings["attacks"] = nlohmann::json::array();
    for (const auto& a : rep.attacks)
      timings["attacks"].push_back({{"name", a.name}, {"epsilon", a.epsilon}, {"seconds", a.seconds}});

    detail::write_text(out_dir / "report.csv", rep.to_csv());
    detail::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
    detail::write_text(out_dir / "timings.json", timings.dump(2) + "\n");
    log << "clean accuracy " << rep.clean_accuracy << "%\n";
    for (const auto& a : rep.attacks)
      log << "  " << a.name << " eps=" << a.epsilon << " robust " << a.robust_accuracy << "% DR "
          << (a.drop_rate ? nlohmann::json(*a.drop_rate).dump() : "NA") << "\n";
    return int{kExitOk};
  });
}

struct BenchResult {
  GradientLedger pgd_ledger;
  GradientLedger ls_ledger;
  double pgd_seconds = 0.0;
  double ls_seconds = 0.0;
  double pgd_mean_loss = 0.0;
  double ls_mean_loss = 0.0;
  double pgd1_mean_loss = 0.0;
  double pgd_robust_accuracy = 0.0;
  double ls_robust_accuracy = 0.0;
  std::size_t dominance_violations = 0;  // samples with LS-PGD loss < one-step PGD loss
  std::size_t samples = 0;

  double backward_ratio() const {
    return ls_ledger.backward_samples ? static_cast<double>(pgd_ledger.backward_samples) /
                                            static_cast<double>(ls_ledger.backward_samples)
                                      : 0.0;
  }
  double speedup() const { return ls_seconds > 0.0 ? pgd_seconds / ls_seconds : 0.0; }

  nlohmann::json to_json() const {
    return {{"samples", samples},
            {"pgd_backward_samples", pgd_ledger.backward_samples},
            {"pgd_forward_samples", pgd_ledger.forward_samples},
            {"ls_pgd_backward_samples", ls_ledger.backward_samples},
            {"ls_pgd_forward_samples", ls_ledger.forward_samples},
            {"backward_ratio", backward_ratio()},
            {"pgd_seconds", pgd_seconds},
            {"ls_pgd_seconds", ls_seconds},
            {"speedup", speedup()},
            {"pgd_mean_loss", pgd_mean_loss},
            {"ls_pgd_mean_loss", ls_mean_loss},
            {"pgd1_mean_loss", pgd1_mean_loss},
            {"pgd_robust_accuracy", pgd_robust_accuracy},
            {"ls_pgd_robust_accuracy", ls_robust_accuracy},
            {"dominance_violations", dominance_violations}};
  }
};

/// Matched scoring passes on one model: PGD(T) vs cold-cache LS-PGD. Times are
/// the minimum over `repeats`; ledgers and losses come from the first repeat.
inline BenchResult attack_bench(const BenchConfig& b, std::uint64_t seed) {
  b.dataset.validate();
  Dataset data = generate(b.dataset);
  auto model = b.model.build(data.train.shape, data.num_classes, derive_seed(seed, 0));
  MomentumSgd opt(0.01, 0.9, 5e-4);
  for (int e = 0; e < b.pretrain_epochs; ++e) {
    auto fwd = model->forward(data.train.inputs);
    auto ce = cross_entropy(fwd.logits, data.train.labels);
    opt.step(model->mutable_parameters(), model->backward(fwd, ce.grad, Matrix()).params);
  }
  std::mt19937_64 rng(derive_seed(seed, 3));
  LabeledBatch batch = sample_batch(data.test, b.samples, rng);
  ThreatSpec t = b.threat;
  t.range = b.dataset.range;
  ThreatSpec one = t;
  one.steps = 1;

  BenchResult r;
  r.samples = static_cast<std::size_t>(batch.size());
  auto mean_loss = [](const std::vector<AdvCompanion>& v) {
    double s = 0.0;
    for (const auto& c : v) s += c.adv_loss;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  auto robust = [&](const std::vector<AdvCompanion>& v) {
    Matrix x = batch.inputs;
    for (Index i = 0; i < x.rows(); ++i) x.row(i) += v[static_cast<std::size_t>(i)].delta.transpose();
    return accuracy_percent(predict(*model, x), batch.labels);
  };
  r.pgd_seconds = r.ls_seconds = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < b.repeats; ++rep) {
    GradientLedger lp, ll;
    auto t0 = std::chrono::steady_clock::now();
    auto p = pgd(*model, batch, t, std::nullopt, &lp);
    auto t1 = std::chrono::steady_clock::now();
    WarmStartCache cache;
    auto l = ls_pgd(*model, batch, t, cache, &ll);
    auto t2 = std::chrono::steady_clock::now();
    r.pgd_seconds = std::min(r.pgd_seconds, std::chrono::duration<double>(t1 - t0).count());
    r.ls_seconds = std::min(r.ls_seconds, std::chrono::duration<double>(t2 - t1).count());
    if (rep == 0) {
      r.pgd_ledger = lp;
      r.ls_ledger = ll;
      r.pgd_mean_loss = mean_loss(p);
      r.ls_mean_loss = mean_loss(l);
      r.pgd_robust_accuracy = robust(p);
      r.ls_robust_accuracy = robust(l);
      auto p1 = pgd(*model, batch, one);
      r.pgd1_mean_loss = mean_loss(p1);
      for (std::size_t i = 0; i < l.size(); ++i) r.dominance_violations += l[i].adv_loss < p1[i].adv_loss - 1e-9;
    }
  }
  return r;
}

/// attack-bench: writes bench.json.
inline int cmd_attack_bench(const CommandOptions& opt, std::ostream& log, std::ostream& err) {
  std::filesystem::path out_dir;
  return detail::guarded(err, &out_dir, [&] {
    RunConfig cfg = detail::load_with_overrides(opt, out_dir);
    BenchResult r = attack_bench(cfg.bench, cfg.seed);
    detail::write_text(out_dir / "bench.json", r.to_json().dump(2) + "\n");
    log << "PGD(T=" << cfg.bench.threat.steps << "): " << r.pgd_ledger.backward_samples << " backward samples, "
        << r.pgd_seconds << " s, mean loss " << r.pgd_mean_loss << ", robust " << r.pgd_robust_accuracy << "%\n"
        << "LS-PGD: " << r.ls_ledger.backward_samples << " backward samples, " << r.ls_seconds << " s, mean loss "
        << r.ls_mean_loss << ", robust " << r.ls_robust_accuracy << "%\n"
        << "backward ratio " << r.backward_ratio() << ", speedup " << r.speedup() << "x, dominance violations "
        << r.dominance_violations << "\n";
    return int{kExitOk};
  });
}

/// report: gathers report.csv + summary.json from each eval directory into
/// dr_table.csv (one row per run x attack x epsilon) and plot_data.csv (mean DR per IPC).
inline int cmd_report(const CommandOptions& opt, std::ostream& log, std::ostream& err) {
  std::filesystem::path out_dir = detail::resolve_out("report", opt.out);
  return detail::guarded(err, &out_dir, [&] {
    if (opt.inputs.empty()) throw ConfigError("report: no input directories given");
    std::filesystem::create_directories(out_dir);
    std::ostringstream table;
    table << "run,ipc,attack,epsilon,clean_accuracy,robust_accuracy,drop_rate\n";
    // (attack, epsilon, ipc) -> drop rates
    std::map<std::tuple<std::string, double, int>, std::vector<double>> series;
    for (const auto& dir : opt.inputs) {
      std::filesystem::path d(dir);
      auto summary = nlohmann::json::parse(detail::read_text(d / "summary.json"), nullptr, false);
      if (summary.is_discarded()) throw IngestionError("report: malformed " + (d / "summary.json").string());
      int ipc = summary.value("ipc", 0);
      std::istringstream csv(detail::read_text(d / "report.csv"));
      std::string line;
      std::getline(csv, line);
      if (line != EvalReport::kCsvHeader) throw IngestionError("report: unexpected header in " + (d / "report.csv").string());
      while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 5) throw IngestionError("report: malformed row in " + (d / "report.csv").string());
        table << d.filename().string() << ',' << ipc << ',' << line << '\n';
        if (f[4] != "NA") series[{f[0], std::stod(f[1]), ipc}].push_back(std::stod(f[4]));
      }
    }
    std::ostringstream plot;
    plot << "attack,epsilon,ipc,mean_drop_rate,runs\n";
    for (const auto& [key, v] : series) {
      double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      plot << std::get<0>(key) << ',' << nlohmann::json(std::get<1>(key)).dump() << ',' << std::get<2>(key) << ','
           << nlohmann::json(m).dump() << ',' << v.size() << '\n';
    }
    detail::write_text(out_dir / "dr_table.csv", table.str());
    detail::write_text(out_dir / "plot_data.csv", plot.str());
    log << "wrote " << (out_dir / "dr_table.csv").string() << " and plot_data.csv\n";
    return int{kExitOk};
  });
}

}  // namespace c2r
