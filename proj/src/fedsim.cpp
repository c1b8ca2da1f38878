#include "fedclust/fedsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fedclust/parallel.hpp"
#include "fedclust/rng.hpp"

namespace fedclust {

ServerMode server_mode_from_string(const std::string& s) {
  if (s == "param_avg") return ServerMode::param_avg;
  if (s == "grad_agg") return ServerMode::grad_agg;
  throw std::invalid_argument("unknown server mode: " + s);
}

std::string to_string(ServerMode m) {
  return m == ServerMode::param_avg ? "param_avg" : "grad_agg";
}

void RunConfig::validate(int num_clients) const {
  if (rounds < 0) throw std::invalid_argument("rounds must be non-negative");
  if (clients_per_round < 0 || clients_per_round > num_clients) {
    throw std::invalid_argument("clients_per_round must lie in [0, num_clients]");
  }
  if (local_iters < 0) throw std::invalid_argument("local_iters must be non-negative");
  if (!(local_lr > 0.0)) throw std::invalid_argument("local_lr must be positive");
  if (server_mode == ServerMode::grad_agg && !(server_lr > 0.0)) {
    throw std::invalid_argument("server_lr must be positive in grad_agg mode");
  }
  if (initial_clusters < 1) throw std::invalid_argument("initial_clusters must be >= 1");
  if (mu_tilde < 0.0 || mu_tilde > 1.0) throw std::invalid_argument("mu_tilde outside [0,1]");
  if (std::isnan(rho)) throw std::invalid_argument("rho must not be NaN");
  if (model == ExtractorKind::mlp1 && hidden_dim < 1) {
    throw std::invalid_argument("mlp1 needs hidden_dim >= 1");
  }
  if (feature_out_dim < 0) throw std::invalid_argument("feature_out_dim must be >= 0");
  if (batch_size < 0) throw std::invalid_argument("batch_size must be >= 0");
  if (threads < 0) throw std::invalid_argument("threads must be >= 0");
}

Eigen::MatrixXd client_log_scores(const DataBatch& batch, const FeatureExtractor& phi,
                                  const std::vector<ClusterHead>& heads,
                                  Formulation& local_formulation) {
  const int n = batch.size();
  const int K = static_cast<int>(heads.size());
  Eigen::MatrixXd scores(n, K);
  for (int k = 0; k < K; ++k) {
    const Eigen::MatrixXd logp = log_proba_batch(phi, heads[k], batch.X);
    if (local_formulation.kind() == FormulationKind::ratio) {
      local_formulation.update_marginal(k, logp.array().exp());
    }
    for (int j = 0; j < n; ++j) {
      scores(j, k) = local_formulation.log_score(k, logp.row(j), batch.y(j));
    }
  }
  return scores;
}

namespace {

DataBatch take_rows(const DataBatch& b, const std::vector<int>& order, int from, int count) {
  DataBatch sub;
  sub.X.resize(count, b.X.cols());
  sub.y.resize(count);
  for (int t = 0; t < count; ++t) {
    sub.X.row(t) = b.X.row(order[from + t]);
    sub.y(t) = b.y(order[from + t]);
  }
  return sub;
}

Eigen::MatrixXd take_coeff_rows(const Eigen::MatrixXd& coeff, const std::vector<int>& order,
                                int from, int count) {
  Eigen::MatrixXd sub(count, coeff.cols());
  for (int t = 0; t < count; ++t) sub.row(t) = coeff.row(order[from + t]);
  return sub;
}

// re-estimate ratio marginals from the given batch under the current local params
void refresh_marginals(Formulation& f, const FeatureExtractor& phi,
                       const std::vector<ClusterHead>& heads, const DataBatch& batch) {
  if (f.kind() != FormulationKind::ratio) return;
  for (size_t k = 0; k < heads.size(); ++k) {
    f.update_marginal(static_cast<int>(k), predict_proba_batch(phi, heads[k], batch.X));
  }
}

int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (int k = 1; k < v.size(); ++k) {
    if (v(k) > v(best)) best = k;
  }
  return best;
}

}  // namespace

LocalUpdateResult local_update(const ClientDataset& client, const ClusterModel& model,
                               WeightState& state, const RunConfig& config,
                               std::uint64_t batch_key, const Eigen::VectorXd* hard_one_hot) {
  const DataBatch& train = client.train;
  const int n = train.size();
  const int K = model.clusters();
  Formulation local_f = model.formulation;

  const Eigen::MatrixXd scores = client_log_scores(train, model.phi, model.heads, local_f);
  switch (config.tier2) {
    case Tier2Kind::soft:
      e_step(state, scores);
      break;
    case Tier2Kind::ifca:
      set_hard_assignment(state, hard_assign_ifca(-scores.colwise().mean().transpose()));
      break;
    case Tier2Kind::fesem:
      if (!hard_one_hot) throw std::invalid_argument("fesem needs a precomputed assignment");
      set_hard_assignment(state, *hard_one_hot);
      break;
  }

  LocalUpdateResult res;
  res.train_count = n;
  res.bookkeeping = Eigen::MatrixXd::Zero(K, local_f.num_classes());
  for (int j = 0; j < n; ++j) {
    res.bookkeeping.col(train.y(j)) += state.gamma.row(j).transpose();
  }

  res.phi = model.phi;
  res.heads = model.heads;
  res.accumulated = GradientBundle::zeros_like(model.phi, model.heads);
  const int passes = config.local_iters;

  if (config.batch_size <= 0 || config.batch_size >= n) {
    const Eigen::MatrixXd coeff = state.gamma / static_cast<double>(n);
    for (int p = 0; p < std::max(passes, 1); ++p) {
      Formulation pass_f = local_f;
      refresh_marginals(pass_f, res.phi, res.heads, train);
      LikelihoodResult lr = likelihood_and_grads(res.phi, res.heads, train, coeff, pass_f);
      if (p == 0) res.flat_grad = lr.grads.flattened();
      if (p < passes) {
        sgd_step(res.phi, res.heads, lr.grads, config.local_lr);
        res.accumulated.add(lr.grads);
      }
    }
    return res;
  }

  if (passes == 0) {
    const Eigen::MatrixXd coeff = state.gamma / static_cast<double>(n);
    Formulation pass_f = local_f;
    refresh_marginals(pass_f, res.phi, res.heads, train);
    res.flat_grad = likelihood_and_grads(res.phi, res.heads, train, coeff, pass_f)
                        .grads.flattened();
    return res;
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int p = 0; p < passes; ++p) {
    RngStream perm = RngStream::derived(batch_key, "perm", static_cast<std::uint64_t>(p));
    perm.shuffle(order);
    for (int from = 0; from < n; from += config.batch_size) {
      const int count = std::min(config.batch_size, n - from);
      const DataBatch sub = take_rows(train, order, from, count);
      const Eigen::MatrixXd coeff =
          take_coeff_rows(state.gamma, order, from, count) / static_cast<double>(count);
      Formulation pass_f = local_f;
      refresh_marginals(pass_f, res.phi, res.heads, sub);
      LikelihoodResult lr = likelihood_and_grads(res.phi, res.heads, sub, coeff, pass_f);
      if (p == 0 && from == 0) res.flat_grad = lr.grads.flattened();
      sgd_step(res.phi, res.heads, lr.grads, config.local_lr);
      res.accumulated.add(lr.grads);
    }
  }
  return res;
}

Engine::Engine(RunConfig config, Scenario scenario)
    : config_(std::move(config)), scenario_(std::move(scenario)) {
  const int M = static_cast<int>(scenario_.clients.size());
  if (M == 0) throw std::invalid_argument("scenario has no clients");
  config_.validate(M);
  const int d = static_cast<int>(scenario_.class_means.cols());
  const int C = static_cast<int>(scenario_.class_means.rows());
  const int feat = config_.feature_out_dim > 0 ? config_.feature_out_dim : d;
  threads_ = effective_threads(config_.threads);

  model_.phi = FeatureExtractor::init(config_.model, d, config_.hidden_dim, feat,
                                      derive_key(config_.seed, "phi-init"));
  model_.heads.reserve(config_.initial_clusters);
  for (int k = 0; k < config_.initial_clusters; ++k) {
    model_.heads.push_back(
        ClusterHead::init(feat, C, derive_key(config_.seed, "theta-init", k)));
  }
  model_.formulation = Formulation(config_.tier1, config_.initial_clusters, C);

  weights_.reserve(M);
  for (int i = 0; i < M; ++i) {
    weights_.push_back(WeightState::uniform(scenario_.clients[i].train.size(),
                                            config_.initial_clusters, config_.mu_tilde));
  }
  bookkeeping_.assign(M, Eigen::MatrixXd());
  caches_.assign(M, ClientCache{});
}

std::vector<int> Engine::sample_clients(int round) const {
  const int M = static_cast<int>(scenario_.clients.size());
  const int S = config_.sampled_per_round(M);
  std::vector<int> ids(M);
  std::iota(ids.begin(), ids.end(), 0);
  if (S >= M) return ids;
  RngStream rng = RngStream::derived(config_.seed, "sample", static_cast<std::uint64_t>(round));
  rng.shuffle(ids);
  ids.resize(S);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void Engine::aggregate(const std::vector<int>& sampled,
                       const std::vector<LocalUpdateResult>& results) {
  if (config_.server_mode == ServerMode::grad_agg) {
    GradientBundle sum = GradientBundle::zeros_like(model_.phi, model_.heads);
    for (const auto& r : results) sum.add(r.accumulated);
    sgd_step(model_.phi, model_.heads, sum, config_.server_lr);
    return;
  }

  double total = 0.0;
  for (const auto& r : results) total += static_cast<double>(r.train_count);

  FeatureExtractor phi = model_.phi;
  phi.W1.setZero();
  if (phi.kind == ExtractorKind::mlp1) {
    phi.b1.setZero();
    phi.W2.setZero();
    phi.b2.setZero();
  }
  std::vector<ClusterHead> heads = model_.heads;
  for (auto& h : heads) {
    h.W.setZero();
    h.b.setZero();
  }

  for (size_t s = 0; s < sampled.size(); ++s) {
    const auto& r = results[s];
    const double w = static_cast<double>(r.train_count) / total;
    phi.W1 += w * r.phi.W1;
    if (phi.kind == ExtractorKind::mlp1) {
      phi.b1 += w * r.phi.b1;
      phi.W2 += w * r.phi.W2;
      phi.b2 += w * r.phi.b2;
    }
    for (size_t k = 0; k < heads.size(); ++k) {
      heads[k].W += w * r.heads[k].W;
      heads[k].b += w * r.heads[k].b;
    }
  }
  model_.phi = std::move(phi);
  model_.heads = std::move(heads);
}

ClusterHead Engine::aggregate_subcluster_head(int parent, const ClusterHead& parent_head,
                                              const std::vector<int>& group) const {
  const size_t expect = model_.heads.size();
  ClusterHead acc;
  acc.W = Eigen::MatrixXd::Zero(parent_head.W.rows(), parent_head.W.cols());
  acc.b = Eigen::VectorXd::Zero(parent_head.b.size());
  double total = 0.0;
  for (int i : group) {
    const auto& cache = caches_[i];
    if (!cache.valid || cache.local_heads.size() != expect) continue;
    const double w = static_cast<double>(scenario_.clients[i].train.size());
    acc.W += w * cache.local_heads[parent].W;
    acc.b += w * cache.local_heads[parent].b;
    total += w;
  }
  if (total == 0.0) return parent_head;
  acc.W /= total;
  acc.b /= total;
  return acc;
}

void Engine::adapt_clusters(RoundMetrics& metrics) {
  const int K = model_.clusters();
  std::vector<ClientSummary> summaries;
  for (size_t i = 0; i < caches_.size(); ++i) {
    if (!caches_[i].valid) continue;
    ClientSummary s;
    s.client_id = static_cast<int>(i);
    s.protos = caches_[i].protos;
    s.omega_tilde = weights_[i].omega_tilde;
    s.flat_grad = caches_[i].flat_grad;
    summaries.push_back(std::move(s));
  }
  last_report_ = build_distance_report(summaries, K, config_.metric, config_.rho);
  empty_shared_pairs_ += last_report_.empty_shared_class_pairs;
  metrics.max_dist = last_report_.max_distance;
  metrics.mean_dist = last_report_.mean_distance;

  std::vector<long> votes(K, 0);
  for (int k = 0; k < K; ++k) {
    votes[k] = static_cast<long>(last_report_.clusters[k].members.size());
  }

  if (last_report_.split) {
    const SplitDecision dec = *last_report_.split;
    const ClusterHead parent_head = model_.heads[dec.cluster];
    apply_split(dec, model_.heads, weights_, bookkeeping_, model_.formulation,
                [&](const std::vector<int>& group) {
                  return aggregate_subcluster_head(dec.cluster, parent_head, group);
                });
    metrics.splits = 1;
  }

  const std::vector<int> removed = detect_and_remove_empty(votes, model_.heads, weights_,
                                                           bookkeeping_, model_.formulation);
  last_report_.removals = removed;
  metrics.removals = static_cast<int>(removed.size());
}

RoundMetrics Engine::round_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int t = round_;
  const int K = model_.clusters();
  const std::vector<int> sampled = sample_clients(t);

  std::vector<Eigen::VectorXd> hard_hot;
  if (config_.tier2 == Tier2Kind::fesem) {
    std::vector<Eigen::VectorXd> head_params;
    head_params.reserve(K);
    for (const auto& h : model_.heads) head_params.push_back(flatten(h));
    hard_hot.resize(sampled.size());
    for (size_t s = 0; s < sampled.size(); ++s) {
      const int i = sampled[s];
      const auto& cache = caches_[i];
      if (cache.valid && cache.assigned < static_cast<int>(cache.local_heads.size())) {
        hard_hot[s] = hard_assign_fesem(flatten(cache.local_heads[cache.assigned]), head_params);
      } else {
        RngStream rng = RngStream::derived(config_.seed, "assign-init",
                                           static_cast<std::uint64_t>(i));
        Eigen::VectorXd hot = Eigen::VectorXd::Zero(K);
        hot(static_cast<int>(rng.uniform_int(K))) = 1.0;
        hard_hot[s] = std::move(hot);
      }
    }
  }

  std::vector<LocalUpdateResult> results(sampled.size());
  std::vector<PrototypeSet> protos(sampled.size());
  parallel_for(static_cast<int>(sampled.size()), threads_, [&](int s) {
    const int i = sampled[s];
    protos[s] = compute_prototypes(scenario_.clients[i].train, model_.phi);
    const std::uint64_t bkey =
        derive_key(config_.seed, "batch", static_cast<std::uint64_t>(t),
                   static_cast<std::uint64_t>(i));
    results[s] = local_update(scenario_.clients[i], model_, weights_[i], config_, bkey,
                              hard_hot.empty() ? nullptr : &hard_hot[s]);
  });

  aggregate(sampled, results);

  for (size_t s = 0; s < sampled.size(); ++s) {
    const int i = sampled[s];
    caches_[i].valid = true;
    caches_[i].protos = std::move(protos[s]);
    caches_[i].flat_grad = std::move(results[s].flat_grad);
    caches_[i].local_heads = std::move(results[s].heads);
    caches_[i].assigned = argmax_lowest(weights_[i].omega_tilde);
    bookkeeping_[i] = std::move(results[s].bookkeeping);
  }

  RoundMetrics m;
  m.round = t;
  adapt_clusters(m);

  const auto [val, test] = evaluate();
  m.val_acc = val;
  m.test_acc = test;
  m.objective = objective();
  m.clusters = model_.clusters();
  if (!std::isfinite(m.objective)) throw DivergenceError(t);

  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                  .count();
  ++round_;
  return m;
}

std::vector<RoundMetrics> Engine::run() {
  std::vector<RoundMetrics> out;
  out.reserve(config_.rounds);
  for (int t = 0; t < config_.rounds; ++t) out.push_back(round_step());
  return out;
}

long Engine::degenerate_rows() const {
  long total = 0;
  for (const auto& w : weights_) total += w.degenerate_rows;
  return total;
}

namespace {

double mixture_accuracy(const DataBatch& batch, const FeatureExtractor& phi,
                        const std::vector<ClusterHead>& heads,
                        const Eigen::VectorXd& omega_tilde) {
  if (batch.size() == 0) return 0.0;
  Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(batch.size(), heads[0].b.size());
  for (size_t k = 0; k < heads.size(); ++k) {
    if (omega_tilde(static_cast<int>(k)) == 0.0) continue;
    mix += omega_tilde(static_cast<int>(k)) * predict_proba_batch(phi, heads[k], batch.X);
  }
  long hits = 0;
  for (int j = 0; j < batch.size(); ++j) {
    int best = 0;
    for (int c = 1; c < mix.cols(); ++c) {
      if (mix(j, c) > mix(j, best)) best = c;
    }
    if (best == batch.y(j)) ++hits;
  }
  return static_cast<double>(hits) / batch.size();
}

}  // namespace

std::pair<double, double> Engine::evaluate() const {
  const int M = static_cast<int>(scenario_.clients.size());
  std::vector<double> val(M, 0.0);
  std::vector<double> test(M, 0.0);
  parallel_for(M, threads_, [&](int i) {
    const auto& ds = scenario_.clients[i];
    val[i] = mixture_accuracy(ds.val, model_.phi, model_.heads, weights_[i].omega_tilde);
    const DataBatch& g = scenario_.global_test.per_concept[ds.planted_concept];
    test[i] = mixture_accuracy(g, model_.phi, model_.heads, weights_[i].omega_tilde);
  });
  double vsum = 0.0;
  double tsum = 0.0;
  for (int i = 0; i < M; ++i) {
    vsum += val[i];
    tsum += test[i];
  }
  return {vsum / M, tsum / M};
}

double Engine::objective() const {
  const int M = static_cast<int>(scenario_.clients.size());
  std::vector<double> sums(M, 0.0);
  parallel_for(M, threads_, [&](int i) {
    Formulation f = model_.formulation;
    const Eigen::MatrixXd scores =
        client_log_scores(scenario_.clients[i].train, model_.phi, model_.heads, f);
    sums[i] = log_mixture_sum(weights_[i].omega, scores);
  });
  double total = 0.0;
  long n = 0;
  for (int i = 0; i < M; ++i) {
    total += sums[i];
    n += scenario_.clients[i].train.size();
  }
  return total / static_cast<double>(n);
}

}  // namespace fedclust
