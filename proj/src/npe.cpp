#include "npepfn/npe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "npepfn/errors.hpp"
#include "npepfn/kernels.hpp"
#include "npepfn/standardize.hpp"

namespace npepfn {

ArOrder::ArOrder(std::vector<std::size_t> permutation) : perm_(std::move(permutation)) {
  std::vector<bool> seen(perm_.size(), false);
  for (auto p : perm_) {
    if (p >= perm_.size() || seen[p]) throw Error("autoregressive order is not a permutation");
    seen[p] = true;
  }
}

ArOrder ArOrder::identity(std::size_t dim) {
  std::vector<std::size_t> p(dim);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return ArOrder(std::move(p));
}

ArOrder ArOrder::random(std::size_t dim, std::uint64_t seed) {
  std::vector<std::size_t> p(dim);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x0dde5ULL));
  // Fisher-Yates with an explicit draw so the permutation is library independent.
  for (std::size_t i = dim; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return ArOrder(std::move(p));
}

ArOrder ArOrder::parse(std::string_view spec, std::size_t dim) {
  if (spec == "default") return identity(dim);
  constexpr std::string_view prefix = "random:";
  if (spec.starts_with(prefix)) {
    std::uint64_t seed = 0;
    auto digits = spec.substr(prefix.size());
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), seed);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && !digits.empty()) return random(dim, seed);
  }
  throw Error("order must be 'default' or 'random:<seed>', got '" + std::string(spec) + "'");
}

std::vector<std::size_t> filter_indices(const SimulationDataset& data, std::span<const double> x_o,
                                        const FilterConfig& config) {
  if (data.empty()) throw Error("empty dataset");
  if (config.n_filter < 1) throw Error("n_filter must be >= 1");
  if (x_o.size() != data.obs_dim()) throw ShapeError("observation width does not match the dataset");
  std::vector<std::size_t> valid_rows;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.valid()[i]) valid_rows.push_back(i);
  if (valid_rows.empty()) throw Error("empty dataset");
  if (config.n_filter >= valid_rows.size()) return valid_rows;

  const auto stats = fit_standardization(data.xs(), data.valid());
  const Matrix z = stats.apply(data.xs().select_rows(valid_rows));
  const auto zo = stats.apply(x_o);
  std::vector<double> d2(z.rows());
  kernels::parallel::squared_distances(z, zo, d2);

  std::vector<std::size_t> pos(z.rows());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  auto closer = [&](std::size_t a, std::size_t b) { return d2[a] < d2[b] || (d2[a] == d2[b] && a < b); };
  std::nth_element(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(config.n_filter), pos.end(), closer);
  pos.resize(config.n_filter);
  std::sort(pos.begin(), pos.end());
  std::vector<std::size_t> out(pos.size());
  for (std::size_t k = 0; k < pos.size(); ++k) out[k] = valid_rows[pos[k]];
  return out;
}

SimulationDataset filter_context(const SimulationDataset& data, std::span<const double> x_o,
                                 const FilterConfig& config) {
  const auto rows = filter_indices(data, x_o, config);
  if (rows.size() == data.size()) return data;
  return data.subset(rows);
}

ContextSet autoregressive_context(const SimulationDataset& context, const ArOrder& order, std::size_t step) {
  const std::size_t n = context.size();
  const std::size_t width = step + context.obs_dim();
  ContextSet ctx{Matrix(n, width), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    auto theta = context.thetas().row(i);
    auto x = context.xs().row(i);
    auto f = ctx.features.row(i);
    for (std::size_t k = 0; k < step; ++k) f[k] = theta[order[k]];
    std::copy(x.begin(), x.end(), f.begin() + static_cast<std::ptrdiff_t>(step));
    ctx.targets[i] = theta[order[step]];
  }
  return ctx;
}

namespace {

void check_inputs(const SimulationDataset& data, std::span<const double> x_o, const ArOrder& order) {
  if (data.theta_dim() < 1) throw Error("parameter dimension must be >= 1");
  if (order.size() != data.theta_dim()) throw ShapeError("order length does not match the parameter dimension");
  if (x_o.size() != data.obs_dim()) throw ShapeError("observation width does not match the dataset");
}

/// Query rows [theta^{order[0..step)}, x_o] for rows [begin, end) of `thetas`.
Matrix autoregressive_queries(const Matrix& thetas, std::span<const double> x_o, const ArOrder& order,
                              std::size_t step, std::size_t begin, std::size_t end) {
  Matrix q(end - begin, step + x_o.size());
  for (std::size_t s = begin; s < end; ++s) {
    auto f = q.row(s - begin);
    for (std::size_t k = 0; k < step; ++k) f[k] = thetas(s, order[k]);
    std::copy(x_o.begin(), x_o.end(), f.begin() + static_cast<std::ptrdiff_t>(step));
  }
  return q;
}

}  // namespace

PosteriorSampleSet sample_posterior(const SimulationDataset& data, std::span<const double> x_o, std::size_t num_samples,
                                    const ArOrder& order, std::uint64_t seed, InContextBackend& backend,
                                    const NpeOptions& options) {
  check_inputs(data, x_o, order);
  const SimulationDataset context = filter_context(data, x_o, options.filter);
  const std::size_t dim = data.theta_dim();
  const std::size_t batch = std::max<std::size_t>(options.query_batch, 1);

  PosteriorSampleSet out;
  out.samples = Matrix(num_samples, dim);
  for (std::size_t step = 0; step < dim; ++step) {
    const ContextSet ctx = autoregressive_context(context, order, step);
    for (std::size_t begin = 0; begin < num_samples; begin += batch) {
      const std::size_t end = std::min(num_samples, begin + batch);
      const Matrix queries = autoregressive_queries(out.samples, x_o, order, step, begin, end);
      const auto preds = backend.regress(ctx, queries, derive_seed(seed, step * 0x10000ULL + begin / batch));
      for (std::size_t s = begin; s < end; ++s) {
        Rng rng(derive_seed(derive_seed(seed, 0xa11ceULL + step), s));
        out.samples(s, order[step]) = preds[s - begin].sample(rng);
      }
    }
  }
  out.provenance.task = options.task_name;
  out.provenance.x_o.assign(x_o.begin(), x_o.end());
  out.provenance.order = order.permutation();
  out.provenance.n_filter = options.filter.n_filter;
  out.provenance.context_rows = context.size();
  out.provenance.seed = seed;
  out.provenance.backend = backend.describe();
  return out;
}

LogProbResult log_prob_autoregressive(const SimulationDataset& data, std::span<const double> x_o, const Matrix& thetas,
                                      const ArOrder& order, InContextBackend& backend, const NpeOptions& options) {
  check_inputs(data, x_o, order);
  if (thetas.cols() != data.theta_dim()) throw ShapeError("theta width does not match the dataset");
  const SimulationDataset context = filter_context(data, x_o, options.filter);
  const std::size_t n = thetas.rows();
  const std::size_t batch = std::max<std::size_t>(options.query_batch, 1);
  LogProbResult out{std::vector<double>(n, 0.0), std::vector<bool>(n, false)};
  for (std::size_t step = 0; step < data.theta_dim(); ++step) {
    const ContextSet ctx = autoregressive_context(context, order, step);
    for (std::size_t begin = 0; begin < n; begin += batch) {
      const std::size_t end = std::min(n, begin + batch);
      const Matrix queries = autoregressive_queries(thetas, x_o, order, step, begin, end);
      const auto preds = backend.regress(ctx, queries, 0);
      for (std::size_t p = begin; p < end; ++p) {
        const double lp = preds[p - begin].log_density(thetas(p, order[step]));
        if (std::isinf(lp) && lp < 0) out.outside_support[p] = true;
        out.values[p] += lp;
      }
    }
  }
  return out;
}

}  // namespace npepfn
