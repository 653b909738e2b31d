#pragma once

// Round orchestration for OTA Fed-Sophia and its baselines.
//
// One round of fed_sophia:
//   1. every client draws a mini-batch, refreshes its gradient EMA m_n and,
//      on rounds with k mod tau == 0, its curvature EMA h_n;
//   2. the m_n (and h_n on refresh rounds) go up over the selected link;
//   3. the PS forms m̄ (and h̄, cached between refreshes) and takes the
//      clipped preconditioned step.
// fedavg / fedprox run several local SGD steps and upload parameters.
//
// All randomness comes from streams derived from (seed, round, client,
// purpose), so a round is a pure function of (state, config).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "otafed/channel.hpp"
#include "otafed/model.hpp"
#include "otafed/optimizer.hpp"
#include "otafed/rng.hpp"

namespace otafed {

struct Dataset {
  Matrix inputs;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset is empty");
    if (inputs.rows != labels.size()) throw std::invalid_argument("dataset: input rows do not match label count");
    for (std::size_t y : labels)
      if (y >= class_count) throw std::invalid_argument("dataset: label out of range");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{Matrix(idx.size(), inputs.cols), std::vector<std::size_t>(idx.size()), class_count};
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto src = inputs.row(idx[r]);
      std::copy(src.begin(), src.end(), out.inputs.row(r).begin());
      out.labels[r] = labels[idx[r]];
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct ClientState {
  std::shared_ptr<const Dataset> shard;
  EmaState ema;
  EnergyLedger ledger;
  double p_n = 1e-3;
};

struct FederationState {
  ParamVector theta;
  MlpArch arch;
  std::vector<ClientState> clients;
  std::int64_t round = 0;
  ParamVector h_bar;
};

struct RoundReport {
  std::int64_t round = 0;
  std::int64_t slots = 0;
  std::int64_t bits = 0;
  double energy_j = 0.0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
};

enum class Algo { fed_sophia, fedavg, fedprox };
enum class Link { ota, digital, ideal };

inline std::string_view to_string(Algo a) {
  switch (a) {
    case Algo::fed_sophia: return "fed_sophia";
    case Algo::fedavg: return "fedavg";
    case Algo::fedprox: return "fedprox";
  }
  return "?";
}

inline std::string_view to_string(Link l) {
  switch (l) {
    case Link::ota: return "ota";
    case Link::digital: return "digital";
    case Link::ideal: return "ideal";
  }
  return "?";
}

inline Algo parse_algo(std::string_view s) {
  if (s == "fed_sophia") return Algo::fed_sophia;
  if (s == "fedavg") return Algo::fedavg;
  if (s == "fedprox") return Algo::fedprox;
  throw std::invalid_argument("unknown algo '" + std::string(s) + "' (expected fed_sophia, fedavg or fedprox)");
}

inline Link parse_link(std::string_view s) {
  if (s == "ota") return Link::ota;
  if (s == "digital") return Link::digital;
  if (s == "ideal") return Link::ideal;
  throw std::invalid_argument("unknown link '" + std::string(s) + "' (expected ota, digital or ideal)");
}

/// Everything a round needs besides the state itself.
struct RoundConfig {
  SophiaConfig sophia;
  OtaConfig ota;
  std::size_t batch_size = 64;
  int baseline_local_steps = 10;
  std::optional<double> baseline_eta;  // falls back to sophia.eta
  double mu = 0.01;
  int bits_per_param = 32;
  double e_compute_round = 1e-3;
  double e_per_bit = 1e-6;
  std::uint64_t seed = 0;

  double local_eta() const { return baseline_eta.value_or(sophia.eta); }
};

// ---------------------------------------------------------------------------
// Data partitioning

/// Shuffle, then split into near-equal contiguous shards.
inline std::vector<Dataset> partition_iid(const Dataset& data, std::size_t n_clients, std::uint64_t seed) {
  data.validate();
  if (n_clients == 0) throw std::invalid_argument("partition_iid: n_clients must be >= 1");
  if (n_clients > data.size())
    throw std::invalid_argument("partition_iid: " + std::to_string(n_clients) + " clients but only " +
                                std::to_string(data.size()) + " samples");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, {tag(Stream::partition)});
  std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<Dataset> shards;
  shards.reserve(n_clients);
  const std::size_t base = data.size() / n_clients;
  const std::size_t extra = data.size() % n_clients;
  std::size_t pos = 0;
  for (std::size_t n = 0; n < n_clients; ++n) {
    const std::size_t len = base + (n < extra ? 1 : 0);
    shards.push_back(data.subset(std::span<const std::size_t>(idx).subspan(pos, len)));
    pos += len;
  }
  return shards;
}

/// Label-skewed split: client n owns min(max_labels, C) consecutive entries
/// of a shuffled class ring, starting at position n * max_labels, so every
/// class is owned by someone once N * max_labels >= C. Each class's samples
/// are then divided evenly among its owners.
inline std::vector<Dataset> partition_label_limited(const Dataset& data, std::size_t n_clients,
                                                    std::size_t max_labels, std::uint64_t seed) {
  data.validate();
  const std::size_t classes = data.class_count;
  if (n_clients == 0) throw std::invalid_argument("partition_label_limited: n_clients must be >= 1");
  if (max_labels == 0) throw std::invalid_argument("partition_label_limited: max_labels must be >= 1");
  const std::size_t per_client = std::min(max_labels, classes);
  if (n_clients * per_client < classes)
    throw std::invalid_argument("partition_label_limited: " + std::to_string(n_clients) + " clients x " +
                                std::to_string(per_client) + " labels cannot cover " + std::to_string(classes) +
                                " classes");

  Rng rng = make_rng(seed, {tag(Stream::partition), 1});
  std::vector<std::size_t> ring(classes);
  std::iota(ring.begin(), ring.end(), std::size_t{0});
  std::shuffle(ring.begin(), ring.end(), rng);
  std::vector<std::size_t> client_order(n_clients);
  std::iota(client_order.begin(), client_order.end(), std::size_t{0});
  std::shuffle(client_order.begin(), client_order.end(), rng);

  std::vector<std::vector<std::size_t>> owners(classes);
  for (std::size_t pos = 0; pos < n_clients; ++pos)
    for (std::size_t j = 0; j < per_client; ++j) owners[ring[(pos * per_client + j) % classes]].push_back(client_order[pos]);

  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> assigned(n_clients);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& pool = by_class[c];
    auto& own = owners[c];
    if (pool.size() < own.size())
      throw std::invalid_argument("partition_label_limited: class " + std::to_string(c) + " has " +
                                  std::to_string(pool.size()) + " samples for " + std::to_string(own.size()) +
                                  " owning clients");
    std::sort(own.begin(), own.end());
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t base = pool.size() / own.size();
    const std::size_t extra = pool.size() % own.size();
    std::size_t pos = 0;
    for (std::size_t k = 0; k < own.size(); ++k) {
      const std::size_t len = base + (k < extra ? 1 : 0);
      auto& dst = assigned[own[k]];
      dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(pos),
                 pool.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
  }

  std::vector<Dataset> shards;
  shards.reserve(n_clients);
  for (auto& idx : assigned) {
    std::shuffle(idx.begin(), idx.end(), rng);
    shards.push_back(data.subset(idx));
  }
  return shards;
}

// ---------------------------------------------------------------------------
// Client side

/// Uniform draw with replacement.
inline Batch draw_batch(const Dataset& shard, std::size_t batch_size, Rng& rng) {
  if (shard.size() == 0) throw std::invalid_argument("draw_batch: empty shard");
  if (batch_size == 0) throw std::invalid_argument("draw_batch: batch_size must be >= 1");
  std::uniform_int_distribution<std::size_t> pick(0, shard.size() - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = pick(rng);
  Dataset sub = shard.subset(idx);
  return {std::move(sub.inputs), std::move(sub.labels)};
}

struct LocalStepResult {
  ParamVector m;
  std::optional<ParamVector> h;  // present on refresh rounds only
  double loss = 0.0;
};

/// One Fed-Sophia local iteration at the broadcast model theta.
inline LocalStepResult client_local_step(const ClientState& client, std::span<const double> theta,
                                         const MlpArch& arch, const SophiaConfig& cfg, std::size_t batch_size,
                                         std::int64_t k, Rng& rng) {
  if (!client.shard || client.shard->size() == 0) throw std::invalid_argument("client_local_step: empty shard");
  const Batch batch = draw_batch(*client.shard, batch_size, rng);
  auto [loss, grad] = loss_and_grad(theta, arch, batch);
  LocalStepResult out{ema_moment(client.ema.m, grad, cfg.beta1), std::nullopt, loss};
  if (k % cfg.tau == 0) {
    const ParamVector h_hat = gnb_diag_hessian(theta, arch, batch.inputs, rng);
    out.h = ema_hessian(client.ema, h_hat, cfg.beta2, k, cfg.tau);
  }
  return out;
}

/// Runs the baseline local SGD loop and returns (final local model, loss of
/// the first mini-batch).
inline std::pair<ParamVector, double> client_local_sgd(const ClientState& client, std::span<const double> theta,
                                                       const MlpArch& arch, Algo algo, const RoundConfig& cfg,
                                                       std::int64_t k, std::size_t client_id) {
  ParamVector local(theta.begin(), theta.end());
  const double eta = cfg.local_eta();
  const double mu = algo == Algo::fedprox ? cfg.mu : 0.0;
  double first_loss = 0.0;
  for (int s = 0; s < cfg.baseline_local_steps; ++s) {
    Rng rng = make_rng(cfg.seed, {tag(Stream::batch), static_cast<std::uint64_t>(k), client_id,
                                  static_cast<std::uint64_t>(s)});
    const Batch batch = draw_batch(*client.shard, cfg.batch_size, rng);
    auto [loss, grad] = loss_and_grad(local, arch, batch);
    if (s == 0) first_loss = loss;
    if (algo == Algo::fedprox) grad = fedprox_grad(grad, local, theta, mu);
    for (std::size_t i = 0; i < local.size(); ++i) local[i] -= eta * grad[i];
  }
  return {std::move(local), first_loss};
}

// ---------------------------------------------------------------------------
// Uplink

struct UplinkResult {
  ParamVector mean;            // PS estimate of (1/N) sum_n v_n
  std::int64_t slots = 0;
};

/// Exact average, accumulated in client order.
inline ParamVector exact_mean(std::span<const ParamVector> vectors) {
  ParamVector sum(vectors.front().size(), 0.0);
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
  const double n = static_cast<double>(vectors.size());
  for (double& s : sum) s /= n;
  return sum;
}

/// Sends one length-d vector per client over the OTA MAC, b coordinates per
/// slot, with a fresh channel draw and alpha negotiation per slot.
/// `vector_id` separates the gradient and curvature uploads of a round.
inline UplinkResult ota_uplink(std::span<const ParamVector> vectors, const OtaConfig& ota, std::uint64_t seed,
                               std::int64_t k, std::uint64_t vector_id) {
  const std::size_t n_clients = vectors.size();
  const std::size_t d = vectors.front().size();
  const double sigma = ota.noise_sigma();
  UplinkResult out{ParamVector(d, 0.0), 0};
  std::vector<double> alphas(n_clients);
  std::vector<std::span<const double>> chunks(n_clients);
  for (std::size_t start = 0, t = 0; start < d; start += ota.b, ++t) {
    const std::size_t len = std::min(ota.b, d - start);
    Rng ch_rng = make_rng(seed, {tag(Stream::channel), static_cast<std::uint64_t>(k), vector_id, t});
    const ChannelRealization gains = sample_channel_matrix(n_clients, ota.b, ch_rng);
    for (std::size_t n = 0; n < n_clients; ++n) {
      chunks[n] = std::span<const double>(vectors[n]).subspan(start, len);
      alphas[n] = client_scale_factor(chunks[n], gains.row(n), ota.h_th, ota.p_n);
    }
    const double alpha = global_scale_factor(alphas);
    ++out.slots;
    // No client has anything to send on this slot: coordinates stay zero.
    if (!std::isfinite(alpha)) continue;
    Rng noise_rng = make_rng(seed, {tag(Stream::noise), static_cast<std::uint64_t>(k), vector_id, t});
    const SlotResult slot = ota_aggregate_slot(chunks, gains, ota.h_th, alpha, sigma, noise_rng);
    for (std::size_t i = 0; i < len; ++i) {
      double denom = static_cast<double>(n_clients);
      if (ota.normalization == PsNormalization::by_participants) {
        if (slot.participants[i] == 0) continue;
        denom = static_cast<double>(slot.participants[i]);
      }
      out.mean[start + i] = slot.received[i] / denom;
    }
  }
  return out;
}

/// Digital cost: clients transmit concurrently on disjoint subcarrier
/// groups, so the round takes as long as the slowest client.
inline std::int64_t digital_uplink_slots(std::size_t n_clients, std::int64_t values, const RoundConfig& cfg,
                                         std::int64_t k, std::uint64_t vector_id) {
  const std::size_t per_client = cfg.ota.b / n_clients;
  if (per_client == 0)
    throw std::invalid_argument("digital uplink: " + std::to_string(cfg.ota.b) + " subcarriers for " +
                                std::to_string(n_clients) + " clients");
  std::int64_t worst = 0;
  for (std::size_t n = 0; n < n_clients; ++n) {
    Rng rng = make_rng(cfg.seed, {tag(Stream::digital_channel), static_cast<std::uint64_t>(k), vector_id, n});
    worst = std::max(worst, digital_slots(values, cfg.bits_per_param, per_client, cfg.ota, rng));
  }
  return worst;
}

/// Delivers the per-client vectors and returns the PS-side average plus
/// slot cost; `vector_id` distinguishes uploads within the round.
inline UplinkResult uplink(std::span<const ParamVector> vectors, Link link, const RoundConfig& cfg, std::int64_t k,
                           std::uint64_t vector_id) {
  switch (link) {
    case Link::ideal: return {exact_mean(vectors), 0};
    case Link::digital:
      return {exact_mean(vectors),
              digital_uplink_slots(vectors.size(), static_cast<std::int64_t>(vectors.front().size()), cfg, k, vector_id)};
    case Link::ota: return ota_uplink(vectors, cfg.ota, cfg.seed, k, vector_id);
  }
  throw std::invalid_argument("unknown link");
}

// ---------------------------------------------------------------------------
// Evaluation

/// Mean cross-entropy and argmax accuracy (ties go to the lowest class).
inline std::pair<double, double> evaluate(std::span<const double> theta, const MlpArch& arch, const Dataset& test) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty test set");
  const Logits logits = forward(theta, arch, test.inputs);
  const double loss = cross_entropy(logits, test.labels);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == test.labels[r]) ++correct;
  }
  return {loss, static_cast<double>(correct) / static_cast<double>(test.size())};
}

// ---------------------------------------------------------------------------
// Rounds

inline FederationState make_federation(const MlpArch& arch, std::vector<Dataset> shards, ParamVector theta0,
                                       double p_n) {
  arch.validate();
  if (shards.empty()) throw std::invalid_argument("make_federation: no clients");
  if (theta0.size() != arch.param_count()) throw std::invalid_argument("make_federation: theta length mismatch");
  FederationState st;
  st.arch = arch;
  st.h_bar.assign(theta0.size(), 0.0);
  st.theta = std::move(theta0);
  for (auto& s : shards) {
    if (s.size() == 0) throw std::invalid_argument("make_federation: empty client shard");
    if (s.inputs.cols != arch.input_dim()) throw std::invalid_argument("make_federation: shard width mismatch");
    st.clients.push_back({std::make_shared<const Dataset>(std::move(s)), EmaState::zeros(st.theta.size()), {}, p_n});
  }
  return st;
}

struct RoundOutcome {
  FederationState state;
  RoundReport report;
};

namespace detail {

inline void charge_clients(FederationState& st, const RoundConfig& cfg, Link link, std::int64_t values_per_client,
                           std::int64_t slots, RoundReport& rep) {
  const std::int64_t bits = link == Link::ideal ? 0 : values_per_client * cfg.bits_per_param;
  double energy = 0.0;
  for (auto& c : st.clients) {
    const double before = c.ledger.total_j();
    c.ledger = energy_accumulate(c.ledger, cfg.e_compute_round, bits, cfg.e_per_bit, slots);
    energy += c.ledger.total_j() - before;
  }
  rep.slots = slots;
  rep.bits = bits * static_cast<std::int64_t>(st.clients.size());
  rep.energy_j = energy;
}

}  // namespace detail

/// Advances the federation by one communication round. When `test` is
/// given, the report carries the accuracy of the updated model on it.
inline RoundOutcome run_round(const FederationState& state, Algo algo, Link link, const RoundConfig& cfg,
                              const Dataset* test = nullptr) {
  cfg.sophia.validate();
  cfg.ota.validate();
  if (state.clients.empty()) throw std::invalid_argument("run_round: no clients");
  const std::size_t d = state.arch.param_count();
  if (state.theta.size() != d || state.h_bar.size() != d)
    throw std::invalid_argument("run_round: state vectors do not match architecture");

  RoundOutcome out{state, {}};
  FederationState& st = out.state;
  RoundReport& rep = out.report;
  const std::int64_t k = st.round;
  rep.round = k;
  const std::size_t n_clients = st.clients.size();
  double loss_sum = 0.0;

  if (algo == Algo::fed_sophia) {
    const bool refresh = k % cfg.sophia.tau == 0;
    std::vector<ParamVector> ms(n_clients);
    std::vector<ParamVector> hs;
    if (refresh) hs.resize(n_clients);
    for (std::size_t n = 0; n < n_clients; ++n) {
      Rng rng = make_rng(cfg.seed, {tag(Stream::batch), static_cast<std::uint64_t>(k), n});
      LocalStepResult r =
          client_local_step(st.clients[n], st.theta, st.arch, cfg.sophia, cfg.batch_size, k, rng);
      loss_sum += r.loss;
      st.clients[n].ema.m = r.m;
      ms[n] = std::move(r.m);
      if (r.h) {
        st.clients[n].ema.h = *r.h;
        st.clients[n].ema.last_h_round = k;
        hs[n] = std::move(*r.h);
      }
    }
    UplinkResult m_up = uplink(ms, link, cfg, k, 0);
    std::int64_t slots = m_up.slots;
    if (refresh) {
      UplinkResult h_up = uplink(hs, link, cfg, k, 1);
      slots += h_up.slots;
      st.h_bar = std::move(h_up.mean);
    }
    const ParamVector dir = sophia_direction(m_up.mean, st.h_bar, cfg.sophia.gamma, cfg.sophia.epsilon);
    st.theta = apply_step(st.theta, dir, cfg.sophia.eta);
    detail::charge_clients(st, cfg, link, static_cast<std::int64_t>(d) * (refresh ? 2 : 1), slots, rep);
  } else {
    std::vector<ParamVector> locals(n_clients);
    for (std::size_t n = 0; n < n_clients; ++n) {
      auto [local, loss] = client_local_sgd(st.clients[n], st.theta, st.arch, algo, cfg, k, n);
      locals[n] = std::move(local);
      loss_sum += loss;
    }
    UplinkResult up = uplink(locals, link, cfg, k, 0);
    st.theta = std::move(up.mean);
    detail::charge_clients(st, cfg, link, static_cast<std::int64_t>(d), up.slots, rep);
  }

  rep.train_loss = loss_sum / static_cast<double>(n_clients);
  if (test) rep.test_accuracy = evaluate(st.theta, st.arch, *test).second;
  ++st.round;
  return out;
}

inline RoundOutcome run_round(const FederationState& state, std::string_view algo, std::string_view link,
                              const RoundConfig& cfg, const Dataset* test = nullptr) {
  return run_round(state, parse_algo(algo), parse_link(link), cfg, test);
}

}  // namespace otafed
