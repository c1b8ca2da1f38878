#include "fedclust/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedclust {

BaseMetric base_metric_from_string(const std::string& s) {
  if (s == "ascp") return BaseMetric::ascp;
  if (s == "cscp") return BaseMetric::cscp;
  throw std::invalid_argument("unknown metric: " + s);
}

std::string to_string(BaseMetric m) { return m == BaseMetric::ascp ? "ascp" : "cscp"; }

MetricSpec MetricSpec::parse(const std::string& base, const std::vector<std::string>& ablations) {
  MetricSpec spec;
  spec.base = base_metric_from_string(base);
  for (const auto& a : ablations) {
    if (a == "gradcos") {
      spec.grad_cosine = true;
    } else if (a == "noconf") {
      spec.drop_confidence = true;
    } else if (a == "mean") {
      spec.mean_over_classes = true;
    } else {
      throw std::invalid_argument("unknown ablation: " + a);
    }
  }
  return spec;
}

std::vector<std::string> MetricSpec::ablation_names() const {
  std::vector<std::string> names;
  if (grad_cosine) names.push_back("gradcos");
  if (drop_confidence) names.push_back("noconf");
  if (mean_over_classes) names.push_back("mean");
  return names;
}

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine distance needs equal lengths");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 0.0;
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double sim = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  return 1.0 - sim;
}

PrototypeSet compute_prototypes(const DataBatch& train, const FeatureExtractor& phi) {
  if (train.size() == 0) throw std::invalid_argument("prototypes need a nonempty train split");
  const Eigen::MatrixXd Z = phi.forward_batch(train.X);
  const int feat = static_cast<int>(Z.cols());
  const int C = train.y.maxCoeff() + 1;

  PrototypeSet out;
  out.total_samples = train.size();
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(C, feat);
  out.class_counts = Eigen::VectorXi::Zero(C);
  for (int j = 0; j < train.size(); ++j) {
    sums.row(train.y(j)) += Z.row(j);
    out.class_counts(train.y(j)) += 1;
  }

  out.class_protos = Eigen::MatrixXd::Constant(C, feat, std::numeric_limits<double>::quiet_NaN());
  out.present.assign(C, false);
  Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(feat);
  for (int c = 0; c < C; ++c) {
    if (out.class_counts(c) == 0) continue;
    out.present[c] = true;
    out.class_protos.row(c) = sums.row(c) / out.class_counts(c);
    total += sums.row(c);
  }
  out.mean_proto = (total / train.size()).transpose();
  return out;
}

double client_distance(const ClientSummary& a, const ClientSummary& b, int cluster,
                       const MetricSpec& metric, long* empty_shared_counter) {
  double base = 0.0;
  if (metric.grad_cosine) {
    base = cosine_distance(a.flat_grad, b.flat_grad);
  } else {
    const int C =
        static_cast<int>(std::min(a.protos.present.size(), b.protos.present.size()));
    double max_dc = 0.0;
    double sum_dc = 0.0;
    int shared = 0;
    for (int c = 0; c < C; ++c) {
      if (!a.protos.present[c] || !b.protos.present[c]) continue;
      const double d =
          cosine_distance(a.protos.class_protos.row(c), b.protos.class_protos.row(c));
      max_dc = std::max(max_dc, d);
      sum_dc += d;
      ++shared;
    }
    double dc = 0.0;
    if (shared == 0) {
      if (empty_shared_counter) ++*empty_shared_counter;
    } else {
      dc = metric.mean_over_classes ? sum_dc / shared : max_dc;
    }
    if (metric.base == BaseMetric::ascp) {
      base = std::max(dc, cosine_distance(a.protos.mean_proto, b.protos.mean_proto));
    } else {
      base = dc;
    }
  }
  const double conf =
      metric.drop_confidence ? 1.0 : a.omega_tilde(cluster) * b.omega_tilde(cluster);
  return base * conf;
}

bool split_condition(const Eigen::MatrixXd& D, double rho) {
  const Eigen::Index n = D.rows();
  if (n < 2) return false;
  const double mx = D.maxCoeff();
  const double off_mean = D.sum() / static_cast<double>(n * (n - 1));
  return mx - off_mean >= rho;
}

std::pair<std::vector<int>, std::vector<int>> bipartition(const Eigen::MatrixXd& D,
                                                          const std::vector<int>& members) {
  const int m = static_cast<int>(members.size());
  if (m < 2 || D.rows() != m || D.cols() != m) {
    throw std::invalid_argument("bipartition needs >= 2 members and a matching matrix");
  }
  int sa = 0;
  int sb = 1;
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      if (D(i, j) > D(sa, sb)) {
        sa = i;
        sb = j;
      }
    }
  }
  std::vector<int> group_a{members[sa]};
  std::vector<int> group_b{members[sb]};
  for (int t = 0; t < m; ++t) {
    if (t == sa || t == sb) continue;
    (D(t, sa) <= D(t, sb) ? group_a : group_b).push_back(members[t]);
  }
  std::sort(group_a.begin(), group_a.end());
  std::sort(group_b.begin(), group_b.end());
  return {std::move(group_a), std::move(group_b)};
}

DistanceReport build_distance_report(const std::vector<ClientSummary>& summaries,
                                     int num_clusters, const MetricSpec& metric, double rho) {
  DistanceReport report;
  report.metric = metric;
  report.clusters.resize(num_clusters);
  for (int k = 0; k < num_clusters; ++k) report.clusters[k].cluster = k;

  for (const auto& s : summaries) {
    if (s.omega_tilde.size() != num_clusters) {
      throw std::invalid_argument("client summary does not match cluster count");
    }
    int best = 0;
    for (int k = 1; k < num_clusters; ++k) {
      if (s.omega_tilde(k) > s.omega_tilde(best)) best = k;
    }
    report.clusters[best].members.push_back(s.client_id);
  }

  // summaries may arrive in any order; member lists are id-sorted
  std::vector<const ClientSummary*> lookup;
  lookup.reserve(summaries.size());
  for (const auto& s : summaries) lookup.push_back(&s);
  std::sort(lookup.begin(), lookup.end(),
            [](const ClientSummary* x, const ClientSummary* y) {
              return x->client_id < y->client_id;
            });
  auto find_summary = [&](int id) -> const ClientSummary& {
    auto it = std::lower_bound(lookup.begin(), lookup.end(), id,
                               [](const ClientSummary* s, int v) { return s->client_id < v; });
    return **it;
  };

  double dist_sum = 0.0;
  long dist_count = 0;
  int split_cluster = -1;
  double split_peak = -1.0;

  for (auto& ck : report.clusters) {
    std::sort(ck.members.begin(), ck.members.end());
    const int m = static_cast<int>(ck.members.size());
    ck.D = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        const double d = client_distance(find_summary(ck.members[i]), find_summary(ck.members[j]),
                                         ck.cluster, metric, &report.empty_shared_class_pairs);
        ck.D(i, j) = d;
        ck.D(j, i) = d;
        report.max_distance = std::max(report.max_distance, d);
        dist_sum += d;
        ++dist_count;
      }
    }
    if (split_condition(ck.D, rho)) {
      const double peak = ck.D.maxCoeff();
      if (peak > split_peak) {
        split_peak = peak;
        split_cluster = ck.cluster;
      }
    }
  }
  report.mean_distance = dist_count > 0 ? dist_sum / dist_count : 0.0;

  if (split_cluster >= 0) {
    const auto& ck = report.clusters[split_cluster];
    auto [ga, gb] = bipartition(ck.D, ck.members);
    SplitDecision dec;
    dec.cluster = split_cluster;
    // record the seed pair for the report (first max entry in scan order)
    int sa = 0;
    int sb = 1;
    const int m = static_cast<int>(ck.members.size());
    for (int i = 0; i < m; ++i) {
      for (int j = i + 1; j < m; ++j) {
        if (ck.D(i, j) > ck.D(sa, sb)) {
          sa = i;
          sb = j;
        }
      }
    }
    dec.seed_a = ck.members[sa];
    dec.seed_b = ck.members[sb];
    dec.group_a = std::move(ga);
    dec.group_b = std::move(gb);
    report.split = std::move(dec);
  }
  return report;
}

namespace {

Eigen::MatrixXd halve_column(const Eigen::MatrixXd& m, int k) {
  Eigen::MatrixXd grown(m.rows(), m.cols() + 1);
  grown.leftCols(m.cols()) = m;
  grown.col(k) *= 0.5;
  grown.col(m.cols()) = grown.col(k);
  return grown;
}

}  // namespace

void apply_split(const SplitDecision& split, std::vector<ClusterHead>& heads,
                 std::vector<WeightState>& weights,
                 std::vector<Eigen::MatrixXd>& bookkeeping, Formulation& formulation,
                 const std::function<ClusterHead(const std::vector<int>&)>& aggregate_head) {
  const int k = split.cluster;
  if (k < 0 || k >= static_cast<int>(heads.size())) throw std::invalid_argument("bad cluster id");
  if (split.group_a.empty() || split.group_b.empty()) {
    throw std::invalid_argument("split groups must both be nonempty");
  }

  heads[k] = aggregate_head(split.group_a);
  heads.push_back(aggregate_head(split.group_b));

  for (auto& w : weights) {
    w.omega = halve_column(w.omega, k);
    Eigen::VectorXd grown(w.omega_tilde.size() + 1);
    grown.head(w.omega_tilde.size()) = w.omega_tilde;
    grown(k) *= 0.5;
    grown(grown.size() - 1) = grown(k);
    w.omega_tilde = std::move(grown);
  }
  for (auto& f : bookkeeping) {
    if (f.size() == 0) continue;
    Eigen::MatrixXd grown(f.rows() + 1, f.cols());
    grown.topRows(f.rows()) = f;
    grown.row(grown.rows() - 1) = f.row(k);
    f = std::move(grown);
  }
  formulation.duplicate_cluster(k);
}

std::vector<int> detect_and_remove_empty(const std::vector<long>& votes,
                                         std::vector<ClusterHead>& heads,
                                         std::vector<WeightState>& weights,
                                         std::vector<Eigen::MatrixXd>& bookkeeping,
                                         Formulation& formulation) {
  const int K = static_cast<int>(heads.size());
  if (K < 2) return {};

  std::vector<bool> keep(K, true);
  std::vector<int> removed;
  int kept = 0;
  for (int k = 0; k < K; ++k) {
    keep[k] = k >= static_cast<int>(votes.size()) || votes[k] > 0;
    kept += keep[k] ? 1 : 0;
  }
  if (kept == 0 || kept == K) return {};
  for (int k = 0; k < K; ++k) {
    if (!keep[k]) removed.push_back(k);
  }

  std::vector<ClusterHead> surviving;
  surviving.reserve(kept);
  for (int k = 0; k < K; ++k) {
    if (keep[k]) surviving.push_back(std::move(heads[k]));
  }
  heads = std::move(surviving);

  auto compact_cols = [&](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd out(m.rows(), kept);
    int col = 0;
    for (int k = 0; k < K; ++k) {
      if (keep[k]) out.col(col++) = m.col(k);
    }
    return out;
  };

  for (auto& w : weights) {
    Eigen::MatrixXd omega = compact_cols(w.omega);
    for (Eigen::Index j = 0; j < omega.rows(); ++j) {
      const double total = omega.row(j).sum();
      if (total > 0.0 && std::isfinite(total)) {
        omega.row(j) /= total;
      } else {
        omega.row(j).setConstant(1.0 / kept);
        ++w.degenerate_rows;
      }
    }
    w.omega = std::move(omega);

    Eigen::VectorXd ot(kept);
    int col = 0;
    for (int k = 0; k < K; ++k) {
      if (keep[k]) ot(col++) = w.omega_tilde(k);
    }
    const double total = ot.sum();
    if (total > 0.0 && std::isfinite(total)) {
      ot /= total;
    } else {
      ot.setConstant(1.0 / kept);
      ++w.degenerate_rows;
    }
    w.omega_tilde = std::move(ot);
  }

  for (auto& f : bookkeeping) {
    if (f.size() == 0) continue;
    Eigen::MatrixXd out(kept, f.cols());
    int row = 0;
    for (int k = 0; k < K; ++k) {
      if (keep[k]) out.row(row++) = f.row(k);
    }
    f = std::move(out);
  }
  formulation.remove_clusters(keep);
  return removed;
}

}  // namespace fedclust
