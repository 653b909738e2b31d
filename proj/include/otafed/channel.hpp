#pragma once

// Wireless uplink models.
//
// Analog over-the-air (OTA) path: each client inverts its per-subcarrier
// fading gain, skips subcarriers whose gain magnitude falls below h_th, and
// scales its symbols by a common factor alpha chosen so every client meets
// its average power budget. The PS receives the superposition plus AWGN,
// divides by alpha and keeps the real part.
//
// Digital path: Shannon-rate cost model for sending 32-bit values over an
// even split of the subcarriers.

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otafed/model.hpp"
#include "otafed/rng.hpp"

namespace otafed {

using ComplexGain = std::complex<double>;

/// Returned by client_scale_factor when a client has nothing to send.
inline constexpr double kNoConstraint = std::numeric_limits<double>::infinity();

/// N x b gains for one time slot, row per client.
struct ChannelRealization {
  std::size_t n_clients = 0;
  std::size_t subcarriers = 0;
  std::vector<ComplexGain> gains;

  ComplexGain& operator()(std::size_t n, std::size_t i) { return gains[n * subcarriers + i]; }
  ComplexGain operator()(std::size_t n, std::size_t i) const { return gains[n * subcarriers + i]; }
  std::span<const ComplexGain> row(std::size_t n) const { return {gains.data() + n * subcarriers, subcarriers}; }
  std::span<ComplexGain> row(std::size_t n) { return {gains.data() + n * subcarriers, subcarriers}; }
};

enum class PsNormalization {
  by_clients,       // divide the received sum by N
  by_participants,  // divide by |N_i(t)|, the clients that actually sent coordinate i
};

struct OtaConfig {
  std::size_t b = 1200;
  double w_sub = 15000.0;
  double tau_sym = 1e-3;
  double h_th = 0.2;
  double snr_db = 25.0;
  double p_n = 1e-3;
  double n0 = 1e-9;
  PsNormalization normalization = PsNormalization::by_clients;
  std::optional<double> noise_sigma_override;  // replaces the SNR-derived value

  void validate() const {
    if (b == 0) throw std::invalid_argument("b must be >= 1");
    if (!(w_sub > 0.0)) throw std::invalid_argument("w_sub must be > 0");
    if (!(tau_sym > 0.0)) throw std::invalid_argument("tau_sym must be > 0");
    if (!(h_th >= 0.0)) throw std::invalid_argument("h_th must be >= 0");
    if (!std::isfinite(snr_db)) throw std::invalid_argument("snr_db must be finite");
    if (!(p_n > 0.0)) throw std::invalid_argument("p_n must be > 0");
    if (!(n0 > 0.0)) throw std::invalid_argument("n0 must be > 0");
    if (noise_sigma_override && !(*noise_sigma_override >= 0.0 && std::isfinite(*noise_sigma_override)))
      throw std::invalid_argument("noise_sigma must be >= 0");
  }

  /// Receiver noise std; by default the transmit-SNR convention
  /// sigma^2 = P_n / SNR.
  double noise_sigma() const {
    return noise_sigma_override ? *noise_sigma_override : std::sqrt(p_n / std::pow(10.0, snr_db / 10.0));
  }

  friend bool operator==(const OtaConfig&, const OtaConfig&) = default;
};

/// Cumulative per-client cost counters.
struct EnergyLedger {
  double e_compute_j = 0.0;
  double e_transmit_j = 0.0;
  std::int64_t bits_sent = 0;
  std::int64_t slots_used = 0;

  double total_j() const { return e_compute_j + e_transmit_j; }
};

/// CN(0, 1) entries: real and imaginary parts ~ N(0, 1/2).
inline ChannelRealization sample_channel_matrix(std::size_t n_clients, std::size_t b, Rng& rng) {
  if (n_clients == 0 || b == 0) throw std::invalid_argument("sample_channel_matrix: dimensions must be >= 1");
  ChannelRealization ch{n_clients, b, std::vector<ComplexGain>(n_clients * b)};
  std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
  for (ComplexGain& g : ch.gains) {
    const double re = normal(rng);
    const double im = normal(rng);
    g = {re, im};
  }
  return ch;
}

inline std::vector<std::size_t> eligible_indices(std::span<const ComplexGain> gains_row, double h_th) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < gains_row.size(); ++i)
    if (std::abs(gains_row[i]) >= h_th) idx.push_back(i);
  return idx;
}

/// Largest alpha with (alpha^2/|e|) * sum_{i in e} |chunk_i / h_i|^2 <= p_n.
/// Returns kNoConstraint when the eligible set is empty or the sum is zero.
inline double client_scale_factor(std::span<const double> chunk, std::span<const ComplexGain> gains_row, double h_th,
                                  double p_n) {
  if (chunk.size() > gains_row.size())
    throw std::invalid_argument("client_scale_factor: more values than subcarriers");
  if (!(p_n > 0.0)) throw std::invalid_argument("client_scale_factor: p_n must be > 0");
  std::size_t eligible = 0;
  double energy = 0.0;
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    const double mag = std::abs(gains_row[i]);
    if (mag < h_th) continue;
    ++eligible;
    const double v = chunk[i] / mag;
    energy += v * v;
  }
  if (eligible == 0 || !(energy > 0.0)) return kNoConstraint;
  return std::sqrt(p_n * static_cast<double>(eligible) / energy);
}

/// Minimum over the clients that constrain the slot.
inline double global_scale_factor(std::span<const double> alphas) {
  if (alphas.empty()) throw std::invalid_argument("global_scale_factor: no clients");
  double best = kNoConstraint;
  for (double a : alphas)
    if (a < best) best = a;
  return best;
}

/// Symbols a client puts on the air: alpha * chunk_i / h_i where |h_i| >=
/// h_th, zero elsewhere. `sent` receives the number of nonzero-slot symbols.
inline std::vector<ComplexGain> transmit_symbols(std::span<const double> chunk, std::span<const ComplexGain> gains_row,
                                                 double h_th, double alpha, std::size_t* sent = nullptr) {
  std::vector<ComplexGain> s(chunk.size(), ComplexGain{0.0, 0.0});
  std::size_t count = 0;
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    if (std::abs(gains_row[i]) < h_th) continue;
    s[i] = alpha * chunk[i] / gains_row[i];
    ++count;
  }
  if (sent) *sent = count;
  return s;
}

struct SlotResult {
  ParamVector received;                    // matched-filter output per subcarrier
  std::vector<std::size_t> participants;   // |N_i(t)| per subcarrier
};

/// One OTA time slot. Chunk n is client n's values for this slot; chunk
/// length L may be below the subcarrier count (last slot of a vector).
inline SlotResult ota_aggregate_slot(std::span<const std::span<const double>> chunks, const ChannelRealization& gains,
                                     double h_th, double alpha, double noise_sigma, Rng& rng) {
  if (chunks.size() != gains.n_clients)
    throw std::invalid_argument("ota_aggregate_slot: " + std::to_string(chunks.size()) + " chunks for " +
                                std::to_string(gains.n_clients) + " channel rows");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("ota_aggregate_slot: alpha must be finite and > 0");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("ota_aggregate_slot: noise_sigma must be >= 0");
  const std::size_t len = chunks.empty() ? 0 : chunks.front().size();
  for (const auto& c : chunks)
    if (c.size() != len) throw std::invalid_argument("ota_aggregate_slot: chunks differ in length");
  if (len > gains.subcarriers) throw std::invalid_argument("ota_aggregate_slot: chunk longer than subcarrier count");

  std::vector<ComplexGain> y(len, ComplexGain{0.0, 0.0});
  SlotResult out{ParamVector(len, 0.0), std::vector<std::size_t>(len, 0)};
  for (std::size_t n = 0; n < chunks.size(); ++n) {
    const auto row = gains.row(n);
    const auto s = transmit_symbols(chunks[n], row, h_th, alpha);
    for (std::size_t i = 0; i < len; ++i) {
      if (std::abs(row[i]) < h_th) continue;
      y[i] += row[i] * s[i];
      ++out.participants[i];
    }
  }
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> normal(0.0, noise_sigma / std::sqrt(2.0));
    for (std::size_t i = 0; i < len; ++i) {
      const double re = normal(rng);
      const double im = normal(rng);
      y[i] += ComplexGain{re, im};
    }
  }
  for (std::size_t i = 0; i < len; ++i) out.received[i] = (y[i] / alpha).real();
  return out;
}

/// ceil(d / b) slots per vector; Hessian rounds carry two vectors.
inline std::int64_t ota_slots_for_round(std::int64_t d, std::int64_t b, bool hessian_round) {
  if (d < 1 || b < 1) throw std::invalid_argument("ota_slots_for_round: d and b must be >= 1");
  const std::int64_t t = (d + b - 1) / b;
  return hessian_round ? 2 * t : t;
}

/// Shannon rate W log2(1 + P|h|^2 / (N0 W)) in bits/s.
inline double digital_rate(double p, double gain_sq, double n0, double w) {
  if (!(w > 0.0)) throw std::invalid_argument("digital_rate: bandwidth must be > 0");
  return w * std::log2(1.0 + p * gain_sq / (n0 * w));
}

/// Slots needed to push bits_per_param * d bits over `subcarriers` parallel
/// subcarriers, drawing |h|^2 per subcarrier per slot from `next_gain_sq`.
template <class GainSq>
std::int64_t digital_slots_with(std::int64_t d, int bits_per_param, std::size_t subcarriers, const OtaConfig& cfg,
                                GainSq&& next_gain_sq) {
  if (d < 0 || bits_per_param < 1) throw std::invalid_argument("digital_slots: invalid payload");
  if (d == 0) return 0;
  if (subcarriers == 0) throw std::invalid_argument("digital_slots: client has no subcarriers");
  const double budget = static_cast<double>(bits_per_param) * static_cast<double>(d);
  constexpr std::int64_t kMaxSlots = 100'000'000;
  double sent = 0.0;
  std::int64_t slots = 0;
  while (sent < budget) {
    if (++slots > kMaxSlots) throw std::runtime_error("digital_slots: link delivers no throughput");
    for (std::size_t s = 0; s < subcarriers; ++s)
      sent += cfg.tau_sym * digital_rate(cfg.p_n, next_gain_sq(), cfg.n0, cfg.w_sub);
  }
  return slots;
}

/// Rayleigh-faded variant: fresh CN(0,1) gain per subcarrier per slot.
inline std::int64_t digital_slots(std::int64_t d, int bits_per_param, std::size_t subcarriers, const OtaConfig& cfg,
                                  Rng& rng) {
  std::exponential_distribution<double> gain_sq(1.0);  // |h|^2 for h ~ CN(0,1)
  return digital_slots_with(d, bits_per_param, subcarriers, cfg, [&] { return gain_sq(rng); });
}

inline EnergyLedger energy_accumulate(EnergyLedger ledger, double e_compute_round, std::int64_t bits_sent_round,
                                      double e_per_bit, std::int64_t slots_round = 0) {
  if (e_compute_round < 0.0 || bits_sent_round < 0 || e_per_bit < 0.0 || slots_round < 0)
    throw std::invalid_argument("energy_accumulate: inputs must be nonnegative");
  ledger.e_compute_j += e_compute_round;
  ledger.e_transmit_j += static_cast<double>(bits_sent_round) * e_per_bit;
  ledger.bits_sent += bits_sent_round;
  ledger.slots_used += slots_round;
  return ledger;
}

}  // namespace otafed
