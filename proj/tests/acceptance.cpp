// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
#include "c2r/commands.hpp"
#include "oracles.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cstdio>

using namespace c2r;
using namespace c2r::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome hinge_equivalence() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-4.0, 0.999);
  for (int n = 0; n < 1000; ++n) {
    std::vector<double> m(1 + n % 25), h;
    for (auto& v : m) v = u(rng);
    for (double v : m) h.push_back(robust_hinge(v));
    auto argmin = static_cast<std::size_t>(std::min_element(m.begin(), m.end()) - m.begin());
    if (worst_case_index(h) != argmin || h[argmin] != std::max(0.0, 1.0 - m[argmin]))
      return {false, "vector " + std::to_string(n)};
  }
  return {true, "1000 vectors"};
}

Outcome containment() {
  std::mt19937_64 rng(12);
  const std::vector<std::string> names{"fgsm", "pgd", "ls-pgd", "mim", "cw", "vmi-fgsm", "jitter"};
  std::size_t violations = 0;
  const int draws = 1050;
  for (int n = 0; n < draws; ++n) {
    InputRange range = n % 3 == 0 ? InputRange{-1.0, 2.0} : InputRange{};
    const double eps = std::uniform_real_distribution<double>(0.0, 0.4)(rng);
    std::unique_ptr<Model> model;
    SampleShape shape{1, 1, 4};
    if (n % 5 == 0) {
      shape = {2, 8, 8};
      model = std::make_unique<ConvNet3>(2, 3, shape, static_cast<std::uint64_t>(n));
    } else {
      model = std::make_unique<Mlp>(std::vector<Index>{4, 6}, 3, static_cast<std::uint64_t>(n));
    }
    Matrix x = random_matrix(3, shape.size(), rng, range.lo, range.hi);
    auto batch = make_batch(x, random_labels(3, 3, rng), shape);
    AttackSpec spec{names[static_cast<std::size_t>(n) % names.size()], ThreatSpec::with_epsilon(eps, range)};
    spec.seed = static_cast<std::uint64_t>(n);
    auto out = run_attack(spec, *model, batch);
    for (std::size_t i = 0; i < out.size(); ++i) {
      Vector adv = x.row(static_cast<Index>(i)).transpose() + out[i].delta;
      if (out[i].delta.cwiseAbs().maxCoeff() > eps + 1e-9 || adv.minCoeff() < range.lo || adv.maxCoeff() > range.hi)
        ++violations;
    }
  }
  return {violations == 0, std::to_string(draws) + " draws, " + std::to_string(violations) + " violations"};
}

Outcome ls_pgd_dominance() {
  std::mt19937_64 rng(13);
  std::size_t violations = 0;
  for (int n = 0; n < 200; ++n) {
    Mlp model({5, 10}, 4, static_cast<std::uint64_t>(1000 + n));
    auto batch = make_batch(random_matrix(1, 5, rng), random_labels(1, 4, rng));
    auto t = ThreatSpec::with_epsilon(std::uniform_real_distribution<double>(0.01, 0.3)(rng));
    WarmStartCache cache;
    auto ls = ls_pgd(model, batch, t, cache);
    auto one = t;
    one.steps = 1;
    auto p1 = pgd(model, batch, one);
    if (ls[0].adv_loss < p1[0].adv_loss - 1e-9) ++violations;
  }
  return {violations == 0, "200 instances, " + std::to_string(violations) + " violations"};
}

Outcome bench_efficiency() {
  BenchResult r = attack_bench(BenchConfig{}, 0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "backward ratio %.2f, speedup %.2fx, dominance violations %zu", r.backward_ratio(),
                r.speedup(), r.dominance_violations);
  return {r.backward_ratio() >= 5.0 && r.speedup() >= 1.2, buf};
}

Outcome crl_correctness() {
  std::mt19937_64 rng(14);
  double worst_uniform = 0.0, worst_grad = 0.0;
  for (int n = 0; n < 20; ++n) {
    std::vector<int> labels = random_labels(5, 3, rng);
    std::vector<std::vector<std::size_t>> retrieved(5);
    for (auto& r : retrieved) r = {static_cast<std::size_t>(n % 4), static_cast<std::size_t>((n + 2) % 4)};
    auto ps = build_pair_sets(labels, retrieved, 4, PairOptions{n % 2 == 1, n % 3 == 0});
    Matrix constant = Matrix::Constant(static_cast<Index>(ps.bank_rows()), 4, 0.3);
    double expect = 0.0;
    for (const auto& c : ps.candidates) expect += std::log(static_cast<double>(c.size()));
    expect /= static_cast<double>(ps.anchors.size());
    worst_uniform = std::max(worst_uniform, std::abs(crl_loss(constant, ps, 0.1).first - expect));

    Matrix bank = random_matrix(static_cast<Index>(ps.bank_rows()), 4, rng, -1, 1);
    const double tau = 0.1 + 0.03 * n;
    auto [loss, grad] = crl_loss(bank, ps, tau);
    Vector flat = Eigen::Map<const Vector>(bank.data(), bank.size());
    auto f = [&](const Vector& v) {
      return crl_loss(Eigen::Map<const Matrix>(v.data(), bank.rows(), bank.cols()), ps, tau).first;
    };
    worst_grad = std::max(worst_grad, grad_rel_err(Eigen::Map<const Vector>(grad.data(), grad.size()), central_diff(f, flat)));
  }

  std::size_t mismatches = 0;
  std::normal_distribution<double> g(0.0, 1.0);
  for (int state = 0; state < 500; ++state) {
    const int k_classes = 2 + state % 5;
    const Index d = 2 + state % 6;
    MemoryQueue q(k_classes, d, 1 + state % 9, 1 + state % 5, static_cast<std::uint64_t>(state));
    Vector last = Vector::NullaryExpr(d, [&] { return g(rng); });
    for (int i = 0; i < state % 50; ++i) {
      Vector e = i % 5 == 4 ? last : Vector(Vector::NullaryExpr(d, [&] { return g(rng); }));
      q.enqueue(static_cast<int>(rng() % static_cast<std::uint64_t>(k_classes)), e);
      last = e;
    }
    Vector anchor = Vector::NullaryExpr(d, [&] { return g(rng); });
    const int cls = state % k_classes;
    const std::size_t k = 1 + state % 7;
    struct Row { double s; int c; std::int64_t id; };
    std::vector<Row> rows;
    Vector pa = q.projection() * anchor;
    for (int c = 0; c < k_classes; ++c) {
      if (c == cls) continue;
      for (const auto& e : q.entries(c)) {
        Vector pe = q.projection() * e.embedding;
        double s = (pa.norm() == 0 || pe.norm() == 0) ? 0.0 : pa.dot(pe) / (pa.norm() * pe.norm());
        rows.push_back({s, c, e.id});
      }
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      return a.s != b.s ? a.s > b.s : a.c != b.c ? a.c < b.c : a.id < b.id;
    });
    rows.resize(std::min(k, rows.size()));
    auto got = q.retrieve_hard_negatives(anchor, cls, k);
    bool same = got.size() == rows.size();
    for (std::size_t i = 0; same && i < rows.size(); ++i) same = got[i].id == rows[i].id && got[i].cls == rows[i].c;
    if (!same) ++mismatches;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "uniform err %.2e, grad rel err %.2e, retrieval mismatches %zu/500", worst_uniform,
                worst_grad, mismatches);
  return {worst_uniform <= 1e-9 && worst_grad < 1e-4 && mismatches == 0, buf};
}

struct ToyScores {
  double robust = 0.0;
  double clean = 0.0;
};

ToyScores toy_run(bool curriculum, double eta) {
  static const Dataset data = generate(DatasetDescriptor{});
  std::vector<double> robust, clean;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DistillConfig cfg;
    cfg.seed = seed;
    cfg.ipc = 10;
    cfg.eta = eta;
    cfg.curriculum = curriculum;
    cfg.threat = ThreatSpec::with_epsilon(0.1);
    cfg.iterations = 300;
    cfg.lr_images = 0.04;
    cfg.curriculum_batch_size = 32;
    cfg.real_batch_size = 64;
    cfg.mix_real_adversaries = true;
    cfg.tau = 0.1;
    auto result = run_distillation(cfg, data);
    auto student = train_student(result.synthetic, StudentConfig{}, seed);
    auto report = evaluate(*student, data.test, {AttackSpec{"pgd", cfg.threat}});
    clean.push_back(report.clean_accuracy);
    robust.push_back(report.attacks[0].robust_accuracy);
  }
  return {median(robust), median(clean)};
}

std::map<std::pair<bool, double>, ToyScores>& toy_cache() {
  static std::map<std::pair<bool, double>, ToyScores> cache;
  return cache;
}

ToyScores toy(bool curriculum, double eta) {
  auto key = std::make_pair(curriculum, eta);
  auto it = toy_cache().find(key);
  if (it == toy_cache().end()) it = toy_cache().emplace(key, toy_run(curriculum, eta)).first;
  return it->second;
}

Outcome robustness_gain() {
  auto c2r = toy(true, 0.4), base = toy(true, 0.0);
  char buf[200];
  std::snprintf(buf, sizeof buf, "PGD %.2f vs %.2f (gain %.2f), clean %.2f vs %.2f", c2r.robust, base.robust,
                c2r.robust - base.robust, c2r.clean, base.clean);
  return {c2r.robust - base.robust >= 5.0 && std::abs(c2r.clean - base.clean) <= 5.0, buf};
}

Outcome component_ablation() {
  auto off = toy(false, 0.0), aac = toy(true, 0.0), crl = toy(false, 0.4), both = toy(true, 0.4);
  const double tie = 0.5;
  bool ok = aac.robust >= off.robust - tie && crl.robust >= off.robust - tie && both.robust >= aac.robust - tie &&
            both.robust >= crl.robust - tie;
  char buf[200];
  std::snprintf(buf, sizeof buf, "PGD off %.2f, aac %.2f, crl %.2f, both %.2f", off.robust, aac.robust, crl.robust,
                both.robust);
  return {ok, buf};
}

Outcome dr_fidelity() {
  const double a = drop_rate(48.31, 29.12).value_or(-1.0);
  const double b = drop_rate(60.0, 24.0).value_or(-1.0);
  char buf[120];
  std::snprintf(buf, sizeof buf, "DR(48.31, 29.12) = %.4f, DR(60, 24) = %.17g", a, b);
  return {std::abs(a - 39.72) <= 0.01 && b == 60.0, buf};
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(C2R_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  auto dir = std::filesystem::temp_directory_path() / "c2r_acceptance";
  std::filesystem::remove_all(dir);
  const std::string config = (std::filesystem::path(C2R_CONFIG_DIR) / "toy_gaussians.json").string();
  for (const char* run : {"a", "b"}) {
    if (run_cli("distill --config " + config + " --out " + (dir / run).string()) != 0) return {false, "distill failed"};
  }
  const auto ckpt = slurp(dir / "a" / "synthetic.c2r");
  if (ckpt.empty() || ckpt != slurp(dir / "b" / "synthetic.c2r")) return {false, "checkpoints differ"};
  for (const char* run : {"ea", "eb"}) {
    if (run_cli("eval --config " + config + " --checkpoint " + (dir / "a" / "synthetic.c2r").string() + " --out " +
                (dir / run).string()) != 0)
      return {false, "eval failed"};
  }
  for (const char* file : {"report.csv", "summary.json"}) {
    if (slurp(dir / "ea" / file) != slurp(dir / "eb" / file)) return {false, std::string(file) + " differs"};
  }
  return {true, std::to_string(ckpt.size()) + "-byte checkpoints identical, reports identical"};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, Outcome (*)()>> criteria{
      {"1 hinge/worst-case equivalence", hinge_equivalence},
      {"2 attack containment", containment},
      {"3 LS-PGD dominance", ls_pgd_dominance},
      {"4 LS-PGD efficiency", bench_efficiency},
      {"5 CRL correctness", crl_correctness},
      {"6 directional robustness gain", robustness_gain},
      {"7 component ablation direction", component_ablation},
      {"8 DR metric fidelity", dr_fidelity},
      {"9 determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s  #%s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
