#include "npepfn/tsnpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "npepfn/errors.hpp"
#include "npepfn/evaluation.hpp"
#include "npepfn/kernels.hpp"
#include "npepfn/log.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

SimulationDataset simulate_rows(const TaskSpec& task, const Matrix& thetas, std::uint64_t seed) {
  const std::size_t n = thetas.rows();
  std::vector<std::vector<double>> xs(n);
  kernels::for_each_index(n, true, [&](std::size_t i) {
    Rng rng = make_rng(seed, i);
    xs[i] = task.simulate(thetas.row(i), rng);
  });
  SimulationDataset out(task.theta_dim, task.obs_dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (xs[i].size() != task.obs_dim) throw ShapeError("simulator returned the wrong observation width");
    out.append(thetas.row(i), xs[i], all_finite(xs[i]));
  }
  return out;
}

Matrix first_rows(const Matrix& m, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, m.rows()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return m.select_rows(idx);
}

}  // namespace

HdrThreshold estimate_hdr_threshold(std::span<const double> log_densities, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw Error("alpha must lie in [0, 1)");
  std::vector<double> v;
  v.reserve(log_densities.size());
  bool any_finite = false;
  for (double d : log_densities) {
    if (std::isnan(d)) continue;
    any_finite = any_finite || std::isfinite(d);
    v.push_back(d);
  }
  if (!any_finite) throw Error("no finite log-densities for the HDR threshold");
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(v.size() - 1)));
  return HdrThreshold{v[idx]};
}

RejectionResult rejection_sample(const PriorSpec& prior, const BatchPredicate& accept, std::size_t n,
                                 std::uint64_t seed, const RejectionOptions& options) {
  RejectionResult res;
  res.samples = Matrix(0, prior.dim());
  res.samples.reserve_rows(n);
  std::size_t last_batch = 0;
  for (std::uint64_t b = 0; res.samples.rows() < n; ++b) {
    const std::size_t accepted = res.samples.rows();
    const std::size_t remaining = n - accepted;
    std::size_t size;
    if (accepted > 0) {
      const double rate = static_cast<double>(accepted) / static_cast<double>(res.proposals);
      size = static_cast<std::size_t>(std::ceil(1.1 * static_cast<double>(remaining) / rate));
    } else {
      size = last_batch == 0 ? remaining : 2 * last_batch;
    }
    size = std::clamp(size, options.min_batch, options.max_batch);
    last_batch = size;

    Rng rng = make_rng(seed, b);
    const Matrix proposals = prior.sample(size, rng);
    const auto ok = accept(proposals);
    if (ok.size() != size) throw ShapeError("acceptance predicate returned the wrong length");
    std::size_t examined = size;
    for (std::size_t i = 0; i < size; ++i) {
      if (!ok[i]) continue;
      res.samples.append_row(proposals.row(i));
      if (res.samples.rows() == n) {
        examined = i + 1;
        break;
      }
    }
    res.proposals += examined;
    if (res.samples.rows() == n) break;
    if (res.proposals >= options.probe_size && res.acceptance_rate() < options.min_acceptance)
      throw Error("truncated prior acceptance rate " + std::to_string(res.acceptance_rate()) + " after " +
                  std::to_string(res.proposals) + " proposals is below " + std::to_string(options.min_acceptance));
    if (res.proposals >= options.max_proposals)
      throw Error("rejection sampling hit the proposal cap (" + std::to_string(options.max_proposals) + ") with " +
                  std::to_string(res.samples.rows()) + " of " + std::to_string(n) + " accepted");
  }
  return res;
}

RejectionResult truncated_prior_rejection_sample(const PriorSpec& prior, const BatchScorer& density_fn, double k,
                                                 std::size_t n, std::uint64_t seed,
                                                 const RejectionOptions& options) {
  if (std::isnan(k)) throw Error("HDR threshold is NaN");
  if (k == kNegInf) {
    return rejection_sample(prior, [](const Matrix& m) { return std::vector<bool>(m.rows(), true); }, n, seed,
                            options);
  }
  return rejection_sample(
      prior,
      [&](const Matrix& m) {
        const auto d = density_fn(m);
        std::vector<bool> ok(m.rows());
        for (std::size_t i = 0; i < m.rows(); ++i) ok[i] = d[i] >= k;
        return ok;
      },
      n, seed, options);
}

SirResult sir_resample(const ProposalSampler& proposal, const BatchScorer& log_weight, std::size_t n, std::size_t k,
                       std::uint64_t seed) {
  if (k < 1) throw Error("oversampling factor K must be >= 1");
  if (n < 1) throw Error("SIR needs n >= 1");
  SirResult res;
  const Matrix props = proposal(k * n, derive_seed(seed, 1));
  res.proposals = props.rows();
  const auto lw = log_weight(props);
  if (lw.size() != props.rows()) throw ShapeError("log-weight function returned the wrong length");
  double max_lw = kNegInf;
  for (double v : lw)
    if (!std::isnan(v)) max_lw = std::max(max_lw, v);
  if (!std::isfinite(max_lw)) throw Error("all importance weights are zero");
  std::vector<double> cumulative(lw.size());
  double total = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < lw.size(); ++i) {
    const double w = std::isnan(lw[i]) ? 0.0 : std::exp(lw[i] - max_lw);
    total += w;
    sq += w * w;
    cumulative[i] = total;
  }
  res.effective_sample_size = total * total / sq;
  res.samples = Matrix(n, props.cols());
  Rng rng = make_rng(seed, 2);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = uniform01(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    const auto idx = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), lw.size() - 1);
    auto src = props.row(idx);
    std::copy(src.begin(), src.end(), res.samples.row(s).begin());
  }
  return res;
}

SirResult sir_resample(const ProposalSampler& proposal, const BatchScorer& log_target, const BatchScorer& log_proposal,
                       std::size_t n, std::size_t k, std::uint64_t seed) {
  return sir_resample(
      proposal,
      [&](const Matrix& m) {
        auto t = log_target(m);
        const auto q = log_proposal(m);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = t[i] == kNegInf ? kNegInf : t[i] - q[i];
        return t;
      },
      n, k, seed);
}

RestrictedPrior::RestrictedPrior(const SimulationDataset& validity_data, PriorSpec prior, double c,
                                 InContextBackend& backend, std::uint64_t seed, std::size_t max_context)
    : prior_(std::move(prior)), c_(c), backend_(&backend) {
  if (!(c > 0.0 && c < 1.0)) throw Error("validity threshold c must lie in (0, 1)");
  if (validity_data.theta_dim() != prior_.dim()) throw ShapeError("validity data does not match the prior");
  const std::size_t n = validity_data.size();
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  if (n > max_context) {
    Rng rng = make_rng(seed, 0);
    for (std::size_t i = 0; i < max_context; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
      std::swap(rows[i], rows[j]);
    }
    rows.resize(max_context);
    std::sort(rows.begin(), rows.end());
  }
  context_.features = validity_data.thetas().select_rows(rows);
  context_.labels.resize(rows.size());
  std::size_t valid = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    context_.labels[k] = validity_data.valid()[rows[k]] ? 1 : 0;
    valid += static_cast<std::size_t>(context_.labels[k]);
  }
  active_ = valid > 0 && valid < rows.size();
  if (!active_) warn("restricted prior: validity data has a single class; using the unrestricted prior");
}

std::vector<double> RestrictedPrior::validity(const Matrix& thetas) const {
  if (!active_) return std::vector<double>(thetas.rows(), 1.0);
  const auto probs = backend_->classify(context_, thetas, 0);
  const std::size_t col = probs.column_of(1);
  std::vector<double> out(thetas.rows());
  for (std::size_t i = 0; i < thetas.rows(); ++i) out[i] = probs.probabilities(i, col);
  return out;
}

std::vector<bool> RestrictedPrior::accepts(const Matrix& thetas) const {
  const auto p = validity(thetas);
  std::vector<bool> ok(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) ok[i] = p[i] > c_;
  return ok;
}

RejectionResult RestrictedPrior::sample(std::size_t n, std::uint64_t seed, const RejectionOptions& options) const {
  return rejection_sample(prior_, [this](const Matrix& m) { return accepts(m); }, n, seed, options);
}

void TsnpeConfig::validate() const {
  if (rounds < 1) throw Error("rounds must be >= 1");
  if (sims_per_round < 1) throw Error("sims_per_round must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0, 1)");
  if (ratio_size < 1) throw Error("ratio_size must be >= 1");
  if (sir_k < 1) throw Error("SIR oversampling factor must be >= 1");
  if (restricted_c && !(*restricted_c > 0.0 && *restricted_c < 1.0))
    throw Error("restricted prior threshold must lie in (0, 1)");
  if (final_samples < 1) throw Error("final_samples must be >= 1");
  if (filter.n_filter < 1) throw Error("n_filter must be >= 1");
}

std::uint64_t tsnpe_round_seed(std::uint64_t seed, std::size_t round, std::uint64_t purpose) {
  return derive_seed(derive_seed(seed, round), purpose);
}

TsnpeResult run_tsnpe(const TaskSpec& task, const TsnpeConfig& config, std::span<const double> x_o,
                      std::uint64_t seed, InContextBackend& backend) {
  config.validate();
  if (x_o.size() != task.obs_dim) throw ShapeError("observation width does not match the task");
  const ArOrder order = ArOrder::parse(config.order, task.theta_dim);
  NpeOptions npe;
  npe.filter = config.filter;
  npe.task_name = task.name;
  const std::size_t n_r = config.sims_per_round;

  TsnpeResult result;
  auto posterior_count = [&](std::size_t round) {
    return round < config.rounds ? std::max(config.ratio_size, config.final_samples) : config.final_samples;
  };
  auto record = [&](RoundMetrics m, const PosteriorSampleSet& post, std::size_t round) {
    m.round = round;
    m.total_simulations = result.data.size();
    m.posterior_mean = post.samples.column_means();
    const Matrix pred_thetas = first_rows(post.samples, config.predictive_samples);
    const auto pred = simulate_rows(task, pred_thetas, tsnpe_round_seed(seed, round, kSeedPredictive));
    const auto valid_pred = pred.valid_only();
    m.predictive_valid_fraction =
        pred.empty() ? 0.0 : static_cast<double>(valid_pred.size()) / static_cast<double>(pred.size());
    m.energy_score = kNaN;
    if (valid_pred.size() >= 2 && result.data.valid_count() > 0) {
      const auto stats = fit_standardization(result.data.xs(), result.data.valid());
      m.energy_score = energy_score(valid_pred.xs(), x_o, &stats);
    }
    result.rounds.push_back(std::move(m));
  };

  // Round 1: plain prior simulations.
  {
    Rng rng = make_rng(tsnpe_round_seed(seed, 1, kSeedAcquire), 0);
    const Matrix thetas = task.prior.sample(n_r, rng);
    result.data = simulate_rows(task, thetas, tsnpe_round_seed(seed, 1, kSeedSimulate));
  }
  PosteriorSampleSet post = sample_posterior(result.data, x_o, posterior_count(1), order,
                                             tsnpe_round_seed(seed, 1, kSeedPosterior), backend, npe);
  {
    RoundMetrics m;
    m.new_simulations = n_r;
    m.proposals = n_r;
    m.valid_fraction = static_cast<double>(result.data.valid_count()) / static_cast<double>(n_r);
    m.hdr_threshold = kNaN;
    record(std::move(m), post, 1);
  }

  for (std::size_t round = 2; round <= config.rounds; ++round) {
    try {
      RatioEstimator est = build_ratio_estimator(post.samples, task.prior.theta_min(), task.prior.theta_max(),
                                                 config.ratio_size, tsnpe_round_seed(seed, round, kSeedRatio));
      const std::size_t per_class = est.context.features.rows() / 2;
      std::vector<std::size_t> positives(per_class);
      std::iota(positives.begin(), positives.end(), std::size_t{0});
      const auto qs = ratio_log_density(est, est.context.features.select_rows(positives), backend);
      const double k = estimate_hdr_threshold(qs.values, config.alpha).k;

      std::optional<RestrictedPrior> restricted;
      if (config.restricted_c)
        restricted.emplace(result.data, task.prior, *config.restricted_c, backend,
                           tsnpe_round_seed(seed, round, kSeedRestricted), config.restricted_context);

      // HDR predicate plus the validity restriction; -inf marks rejected rows.
      auto log_ratio_in_region = [&](const Matrix& m) {
        std::vector<double> out(m.rows(), kNegInf);
        std::vector<std::size_t> keep;
        if (restricted && restricted->active()) {
          const auto ok = restricted->accepts(m);
          for (std::size_t i = 0; i < m.rows(); ++i)
            if (ok[i]) keep.push_back(i);
        } else {
          keep.resize(m.rows());
          std::iota(keep.begin(), keep.end(), std::size_t{0});
        }
        if (keep.empty()) return out;
        const auto r = ratio_log_density(est, m.select_rows(keep), backend);
        for (std::size_t t = 0; t < keep.size(); ++t)
          if (r.values[t] >= k) out[keep[t]] = r.values[t];
        return out;
      };

      RoundMetrics m;
      Matrix acquired;
      if (config.mode == ProposalMode::Rejection) {
        auto rej = rejection_sample(
            task.prior,
            [&](const Matrix& props) {
              const auto lr = log_ratio_in_region(props);
              std::vector<bool> ok(lr.size());
              for (std::size_t i = 0; i < lr.size(); ++i) ok[i] = lr[i] != kNegInf;
              return ok;
            },
            n_r, tsnpe_round_seed(seed, round, kSeedAcquire), config.rejection);
        m.proposals = rej.proposals;
        m.acceptance_rate = rej.acceptance_rate();
        acquired = std::move(rej.samples);
      } else {
        const SimulationDataset& data = result.data;
        auto sir = sir_resample(
            [&](std::size_t n, std::uint64_t s) {
              return sample_posterior(data, x_o, n, order, s, backend, npe).samples;
            },
            [&](const Matrix& props) {
              auto lw = log_ratio_in_region(props);
              for (std::size_t i = 0; i < lw.size(); ++i)
                if (lw[i] != kNegInf) lw[i] = task.prior.log_density(props.row(i)) - lw[i];
              return lw;
            },
            n_r, config.sir_k, tsnpe_round_seed(seed, round, kSeedAcquire));
        m.proposals = sir.proposals;
        m.acceptance_rate = sir.effective_sample_size / static_cast<double>(sir.proposals);
        acquired = std::move(sir.samples);
      }

      const auto fresh = simulate_rows(task, acquired, tsnpe_round_seed(seed, round, kSeedSimulate));
      AcquisitionRecord rec;
      rec.round = round;
      rec.first_row = result.data.size();
      rec.count = fresh.size();
      rec.k = k;
      m.ratio_excluded = est.excluded;
      rec.estimator = std::move(est);
      result.data.append(fresh);
      result.acquisitions.push_back(std::move(rec));

      post = sample_posterior(result.data, x_o, posterior_count(round), order,
                              tsnpe_round_seed(seed, round, kSeedPosterior), backend, npe);
      m.new_simulations = fresh.size();
      m.valid_fraction = static_cast<double>(fresh.valid_count()) / static_cast<double>(fresh.size());
      m.hdr_threshold = k;
      m.restricted_active = restricted && restricted->active();
      record(std::move(m), post, round);
    } catch (const std::exception& e) {
      result.failure = "round " + std::to_string(round) + ": " + e.what();
      break;
    }
  }
  if (post.samples.rows() > config.final_samples) post.samples = first_rows(post.samples, config.final_samples);
  result.posterior = std::move(post);
  return result;
}

}  // namespace npepfn
