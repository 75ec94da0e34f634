#pragma once

// Built-in property suites run by `alignparts selfcheck`. A named fault can
// be injected to confirm that each suite is able to fail.

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "alignparts/annotation.hpp"
#include "alignparts/losses.hpp"
#include "alignparts/matching.hpp"
#include "alignparts/metrics.hpp"

namespace alignparts {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfCheck {
  std::string name;
  std::string fault;  // fault name that breaks this check
  std::function<CheckResult(bool inject)> run;
};

namespace detail {

inline std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

inline CheckResult check_jv(bool inject) {
  Rng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 300; ++t) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.index(7));
    const Eigen::Index a = 1 + static_cast<Eigen::Index>(rng.index(7));
    const CostMatrix c{rng.gaussian(k, a).cwiseAbs(), CostKind::inference};
    Assignment pi = jv_assign(c);
    if (inject) std::fill(pi.begin(), pi.end(), kNull);
    worst = std::max(worst, std::abs(assignment_cost(c, pi) - assignment_cost(c, brute_force_assign(c))));
  }
  return {"jv_matches_brute_force", worst < 1e-9, "max cost gap " + sci(worst)};
}

inline CheckResult check_sinkhorn(bool inject) {
  Rng rng(102);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.index(6));
    const Eigen::Index a = 1 + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(k)));
    const CostMatrix c{Matrix(rng.gaussian(k, a).cwiseAbs().cwiseMin(1.4)), CostKind::training};
    TransportPlan p = sinkhorn(c, {0.2, 20000, 1e-9, kNullCost});
    if (inject) p.p(0, 0) += 1e-3;
    const double rows = (p.p.rowwise().sum().array() - 1.0 / static_cast<double>(k)).abs().maxCoeff();
    const double cols = (p.p.colwise().sum().array() - 1.0 / static_cast<double>(k)).abs().maxCoeff();
    worst = std::max({worst, rows, cols});
  }
  return {"sinkhorn_marginals", worst < 1e-6, "max marginal error " + sci(worst)};
}

inline CheckResult check_gradients(bool inject) {
  Rng rng(103);
  double worst = 0.0;
  auto fd_error = [&](const Matrix& x, const std::function<Loss<Matrix>(const Matrix&)>& f) {
    Vector analytic = flatten(f(x).grad);
    if (inject) analytic *= 1.01;
    const Vector fd = fd_gradient([&](const Vector& v) { return f(unflatten(v, x.rows(), x.cols())).value; }, flatten(x));
    return (analytic - fd).norm() / std::max(fd.norm(), 1e-8);
  };
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index k = 3, a = 2, n = 12, d = 5;
    const Matrix logits = rng.gaussian(k, n, 2.0);
    Matrix gt = Matrix::Zero(a, n);
    for (Eigen::Index i = 0; i < n; ++i) gt(static_cast<Eigen::Index>(rng.index(2)), i) = 1.0;
    const Matrix z = rng.gaussian(k, d), t_hat = normalize_rows(rng.gaussian(a, d));
    const Assignment pi{1, kNull, 0};
    worst = std::max(worst, fd_error(logits, [&](const Matrix& x) { return mask_loss(x, gt, pi); }));
    worst = std::max(worst, fd_error(logits, [&](const Matrix& x) { return coverage_loss(x, gt, pi); }));
    worst = std::max(worst, fd_error(logits, [&](const Matrix& x) { return overlap_loss(x); }));
    worst = std::max(worst, fd_error(z, [&](const Matrix& x) { return text_infonce(x, t_hat, pi); }));
    const Matrix t_class = normalize_rows(rng.gaussian(k, d));
    worst = std::max(worst, fd_error(z, [&](const Matrix& x) { return global_infonce(x, t_class); }));
    const Vector part = rng.gaussian_vector(k);
    worst = std::max(worst, fd_error(Matrix(part), [&](const Matrix& x) {
                       const Loss<Vector> l = partness_loss(Vector(x.col(0)), pi);
                       return Loss<Matrix>{l.value, Matrix(l.grad)};
                     }));
  }
  return {"loss_gradients", worst < 1e-4, "max relative error " + sci(worst)};
}

inline CheckResult check_metric_order(bool inject) {
  Rng rng(104);
  const std::vector<std::string> names{"arm", "back", "leg", "seat"};
  LabelEmbeddings emb;
  for (const auto& n : names) emb[n] = unit(rng.gaussian_vector(8));
  int violations = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 30;
    std::vector<std::optional<std::string>> g(n), p(n);
    for (int i = 0; i < n; ++i) {
      g[static_cast<std::size_t>(i)] = names[rng.index(4)];
      if (rng.uniform() < 0.9) p[static_cast<std::size_t>(i)] = names[rng.index(4)];
    }
    const Segmentation gt = segments_from_labels(g), pred = segments_from_labels(p);
    double m = class_agnostic_miou(gt, pred), r = rla_miou(gt, pred, emb), l = la_miou(gt, pred);
    if (inject) std::swap(m, l);
    if (!(m >= r - 1e-12 && r >= l - 1e-12)) ++violations;
  }
  return {"metric_ordering", violations == 0, std::to_string(violations) + " violations"};
}

inline CheckResult check_log_replay(bool inject) {
  std::int64_t now = 0;
  AnnotationService live({}, {}, [&now] { return now += 1000; });
  // Records are captured through a temporary log file.
  const fs::path log = fs::temp_directory_path() / ("alignparts_selfcheck_" + std::to_string(::getpid()) + ".jsonl");
  fs::remove(log);
  live.open_log(log);
  for (int i = 0; i < 12; ++i)
    live.ingest({"s" + std::to_string(i), "chair", {{"seat", 0.5, 0.1 * (i % 10), 0.05 * i, {0, 1}}}, 0});
  for (int i = 0; i < 4; ++i) {
    const auto it = live.lease_next("r" + std::to_string(i % 2));
    if (it && i % 2 == 0) live.submit_decision({it->id, it->lease->reviewer, it->revision, {PartVerdict{}}});
  }
  live.flush();
  std::vector<std::string> lines;
  std::istringstream in(read_text(log));
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  fs::remove(log);
  if (inject) lines[2][lines[2].find("\"t\":") + 4] ^= 1;
  try {
    const bool same = AnnotationService::replay(lines)->state() == live.state();
    return {"log_replay", same, same ? "state equal" : "state differs"};
  } catch (const Error& e) {
    return {"log_replay", false, e.what()};
  }
}

inline CheckResult check_ontology(bool inject) {
  const Vocabulary v{{{"laptop_computer", "screen", "a", 3}, {"laptop", "screen", "b", 2}, {"car", "car_front_bumper", "a", 1},
                      {"car", "car_rear_bumper", "a", 1}}};
  std::vector<Adjudication> d{
      {{Scope::class_level, "", "laptop_computer", "laptop", 0.944}, Verdict::accept, "", DecisionSource::recorded_llm},
      {{Scope::part_level, "car", "car_front_bumper", "car_rear_bumper", 0.879}, Verdict::reject, "",
       DecisionSource::recorded_llm}};
  if (inject) d[1].verdict = Verdict::accept;
  const CanonicalMap m = apply_adjudications(v, d);
  const bool ok = m.resolve_alias("laptop") == "laptop_computer" &&
                  m.resolve_alias("car_rear_bumper") != m.resolve_alias("car_front_bumper") &&
                  m.total_count() == v.total_count();
  return {"ontology_merges", ok, ok ? "laptop merged, bumpers distinct" : "unexpected merge result"};
}

}  // namespace detail

inline const std::vector<SelfCheck>& self_checks() {
  static const std::vector<SelfCheck> checks = {
      {"jv_matches_brute_force", "jv", detail::check_jv},
      {"sinkhorn_marginals", "sinkhorn", detail::check_sinkhorn},
      {"loss_gradients", "gradient", detail::check_gradients},
      {"metric_ordering", "metric", detail::check_metric_order},
      {"log_replay", "log", detail::check_log_replay},
      {"ontology_merges", "ontology", detail::check_ontology},
  };
  return checks;
}

inline std::vector<CheckResult> run_self_checks(const std::set<std::string>& faults = {}) {
  for (const auto& f : faults) {
    bool known = false;
    for (const auto& c : self_checks()) known = known || c.fault == f;
    if (!known) fail(ErrorKind::invalid_argument, "unknown fault '" + f + "'");
  }
  std::vector<CheckResult> out;
  for (const auto& c : self_checks()) {
    try {
      out.push_back(c.run(faults.count(c.fault) > 0));
    } catch (const std::exception& e) {
      out.push_back({c.name, false, e.what()});
    }
  }
  return out;
}

}  // namespace alignparts
