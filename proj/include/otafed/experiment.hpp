#pragma once

// Experiment plumbing: flat key = value configs, datasets (Gaussian
// clusters and MNIST IDX files), the round loop and CSV metrics.

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <tuple>
#include <vector>

#include "otafed/federation.hpp"

namespace otafed {

/// Error raised for config problems; message names the key and, when the
/// value came from text, the line.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { synthetic, mnist };
enum class PartitionKind { iid, label_limited };

struct ExperimentConfig {
  Algo algo = Algo::fed_sophia;
  Link link = Link::ota;
  std::int64_t rounds = 100;
  std::size_t n_clients = 32;
  std::size_t batch_size = 64;
  std::vector<std::size_t> hidden_layers{32};
  Activation activation = Activation::tanh;

  SophiaConfig sophia;
  double mu = 0.01;
  int local_steps = 10;
  std::optional<double> baseline_eta;

  OtaConfig ota;
  int bits_per_param = 32;
  double e_compute_round = 1e-3;
  double e_per_bit = 1e-6;

  DatasetKind dataset = DatasetKind::synthetic;
  std::string mnist_images;
  std::string mnist_labels;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::size_t synthetic_samples = 1024;
  std::size_t synthetic_input_dim = 16;
  std::size_t synthetic_classes = 4;
  double synthetic_separation = 3.0;

  PartitionKind partition = PartitionKind::iid;
  std::size_t max_labels = 3;

  std::uint64_t seed = 1;
  std::string out = "metrics.csv";

  RoundConfig round_config() const {
    RoundConfig rc;
    rc.sophia = sophia;
    rc.ota = ota;
    rc.batch_size = batch_size;
    rc.baseline_local_steps = local_steps;
    rc.baseline_eta = baseline_eta;
    rc.mu = mu;
    rc.bits_per_param = bits_per_param;
    rc.e_compute_round = e_compute_round;
    rc.e_per_bit = e_per_bit;
    rc.seed = seed;
    return rc;
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view text, std::string_view key) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "'");
  return value;
}

inline std::vector<std::size_t> parse_size_list(std::string_view text, std::string_view key) {
  std::vector<std::size_t> out;
  if (text == "none") return out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = trim(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    out.push_back(parse_number<std::size_t>(item, key));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

inline void require(bool ok, std::string_view key, std::string_view what) {
  if (!ok) throw ConfigError(std::string(key) + ": " + std::string(what));
}

}  // namespace detail

/// Range checks for every field. Throws ConfigError naming the key.
inline void validate(const ExperimentConfig& c) {
  using detail::require;
  require(c.rounds >= 0, "rounds", "must be >= 0");
  require(c.n_clients >= 1, "n_clients", "must be >= 1");
  require(c.batch_size >= 1, "batch_size", "must be >= 1");
  for (std::size_t h : c.hidden_layers) require(h >= 1, "hidden_layers", "sizes must be >= 1");
  require(c.sophia.eta > 0.0 && std::isfinite(c.sophia.eta), "eta", "must be > 0");
  require(c.sophia.beta1 >= 0.0 && c.sophia.beta1 < 1.0, "beta1", "must lie in [0, 1)");
  require(c.sophia.beta2 >= 0.0 && c.sophia.beta2 < 1.0, "beta2", "must lie in [0, 1)");
  require(c.sophia.gamma > 0.0 && std::isfinite(c.sophia.gamma), "gamma", "must be > 0");
  require(c.sophia.epsilon > 0.0 && std::isfinite(c.sophia.epsilon), "epsilon", "must be > 0");
  require(c.sophia.tau >= 1, "tau", "must be >= 1");
  require(c.mu >= 0.0 && std::isfinite(c.mu), "mu", "must be >= 0");
  require(c.local_steps >= 1, "local_steps", "must be >= 1");
  require(!c.baseline_eta || (*c.baseline_eta > 0.0 && std::isfinite(*c.baseline_eta)), "baseline_eta",
          "must be > 0");
  require(c.ota.b >= 1, "b", "must be >= 1");
  require(c.ota.w_sub > 0.0 && std::isfinite(c.ota.w_sub), "w_sub", "must be > 0");
  require(c.ota.tau_sym > 0.0 && std::isfinite(c.ota.tau_sym), "tau_sym", "must be > 0");
  require(c.ota.h_th >= 0.0 && std::isfinite(c.ota.h_th), "h_th", "must be >= 0");
  require(std::isfinite(c.ota.snr_db), "snr_db", "must be finite");
  require(c.ota.p_n > 0.0 && std::isfinite(c.ota.p_n), "p_n", "must be > 0");
  require(c.ota.n0 > 0.0 && std::isfinite(c.ota.n0), "n0", "must be > 0");
  require(!c.ota.noise_sigma_override ||
              (*c.ota.noise_sigma_override >= 0.0 && std::isfinite(*c.ota.noise_sigma_override)),
          "noise_sigma", "must be >= 0");
  require(c.bits_per_param >= 1, "bits_per_param", "must be >= 1");
  require(c.e_compute_round >= 0.0 && std::isfinite(c.e_compute_round), "e_compute_round", "must be >= 0");
  require(c.e_per_bit >= 0.0 && std::isfinite(c.e_per_bit), "e_per_bit", "must be >= 0");
  require(c.train_size >= 1, "train_size", "must be >= 1");
  require(c.test_size >= 1, "test_size", "must be >= 1");
  require(c.synthetic_input_dim >= 1, "synthetic_input_dim", "must be >= 1");
  require(c.synthetic_classes >= 2, "synthetic_classes", "must be >= 2");
  require(c.synthetic_samples >= 2 * c.synthetic_classes, "synthetic_samples", "must be >= 2 * synthetic_classes");
  require(c.synthetic_separation >= 0.0 && std::isfinite(c.synthetic_separation), "synthetic_separation",
          "must be >= 0");
  require(c.max_labels >= 1, "max_labels", "must be >= 1");
  require(!c.out.empty(), "out", "must not be empty");
  if (c.dataset == DatasetKind::mnist) {
    require(!c.mnist_images.empty(), "mnist_images", "required when dataset = mnist");
    require(!c.mnist_labels.empty(), "mnist_labels", "required when dataset = mnist");
  }
}

/// Applies one `key = value` assignment; throws ConfigError for unknown keys
/// or unparsable values.
inline void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_number;
  const auto num = [&](auto& field) { field = parse_number<std::remove_reference_t<decltype(field)>>(value, key); };
  if (key == "algo") {
    try { c.algo = parse_algo(value); } catch (const std::invalid_argument& e) { throw ConfigError("algo: " + std::string(e.what())); }
  } else if (key == "link") {
    try { c.link = parse_link(value); } catch (const std::invalid_argument& e) { throw ConfigError("link: " + std::string(e.what())); }
  } else if (key == "rounds") num(c.rounds);
  else if (key == "n_clients") num(c.n_clients);
  else if (key == "batch_size") num(c.batch_size);
  else if (key == "hidden_layers") c.hidden_layers = detail::parse_size_list(value, key);
  else if (key == "activation") {
    if (value == "tanh") c.activation = Activation::tanh;
    else if (value == "relu") c.activation = Activation::relu;
    else throw ConfigError("activation: expected tanh or relu, got '" + std::string(value) + "'");
  }
  else if (key == "eta") num(c.sophia.eta);
  else if (key == "beta1") num(c.sophia.beta1);
  else if (key == "beta2") num(c.sophia.beta2);
  else if (key == "gamma") num(c.sophia.gamma);
  else if (key == "epsilon") num(c.sophia.epsilon);
  else if (key == "tau") num(c.sophia.tau);
  else if (key == "mu") num(c.mu);
  else if (key == "local_steps") num(c.local_steps);
  else if (key == "baseline_eta") {
    if (value == "auto") c.baseline_eta.reset();
    else c.baseline_eta = parse_number<double>(value, key);
  }
  else if (key == "b") num(c.ota.b);
  else if (key == "w_sub") num(c.ota.w_sub);
  else if (key == "tau_sym") num(c.ota.tau_sym);
  else if (key == "h_th") num(c.ota.h_th);
  else if (key == "snr_db") num(c.ota.snr_db);
  else if (key == "p_n") num(c.ota.p_n);
  else if (key == "n0") num(c.ota.n0);
  else if (key == "noise_sigma") {
    if (value == "auto") c.ota.noise_sigma_override.reset();
    else c.ota.noise_sigma_override = parse_number<double>(value, key);
  }
  else if (key == "ps_normalization") {
    if (value == "clients") c.ota.normalization = PsNormalization::by_clients;
    else if (value == "participants") c.ota.normalization = PsNormalization::by_participants;
    else throw ConfigError("ps_normalization: expected clients or participants, got '" + std::string(value) + "'");
  }
  else if (key == "bits_per_param") num(c.bits_per_param);
  else if (key == "e_compute_round") num(c.e_compute_round);
  else if (key == "e_per_bit") num(c.e_per_bit);
  else if (key == "dataset") {
    if (value == "synthetic") c.dataset = DatasetKind::synthetic;
    else if (value == "mnist") c.dataset = DatasetKind::mnist;
    else throw ConfigError("dataset: expected synthetic or mnist, got '" + std::string(value) + "'");
  }
  else if (key == "mnist_images") c.mnist_images = value;
  else if (key == "mnist_labels") c.mnist_labels = value;
  else if (key == "train_size") num(c.train_size);
  else if (key == "test_size") num(c.test_size);
  else if (key == "synthetic_samples") num(c.synthetic_samples);
  else if (key == "synthetic_input_dim") num(c.synthetic_input_dim);
  else if (key == "synthetic_classes") num(c.synthetic_classes);
  else if (key == "synthetic_separation") num(c.synthetic_separation);
  else if (key == "partition") {
    if (value == "iid") c.partition = PartitionKind::iid;
    else if (value == "label_limited") c.partition = PartitionKind::label_limited;
    else throw ConfigError("partition: expected iid or label_limited, got '" + std::string(value) + "'");
  }
  else if (key == "max_labels") num(c.max_labels);
  else if (key == "seed") num(c.seed);
  else if (key == "out") c.out = value;
  else throw ConfigError("unknown key '" + std::string(key) + "'");
}

/// Parses `key = value` lines (`#` starts a comment). Missing keys keep
/// their defaults; the result is validated.
inline ExperimentConfig load_config(std::string_view text) {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t, std::less<>> line_of;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": missing key");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
    line_of[std::string(key)] = line_no;
  }
  try {
    validate(cfg);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const auto key = msg.substr(0, msg.find(':'));
    if (auto it = line_of.find(key); it != line_of.end())
      throw ConfigError("line " + std::to_string(it->second) + ": " + msg);
    throw;
  }
  return cfg;
}

/// Writes every key, so the output parses back to an equal config.
inline std::string serialize_config(const ExperimentConfig& c) {
  using detail::format_double;
  std::ostringstream os;
  std::string hidden;
  for (std::size_t i = 0; i < c.hidden_layers.size(); ++i) hidden += (i ? "," : "") + std::to_string(c.hidden_layers[i]);
  if (hidden.empty()) hidden = "none";
  os << "algo = " << to_string(c.algo) << '\n'
     << "link = " << to_string(c.link) << '\n'
     << "rounds = " << c.rounds << '\n'
     << "n_clients = " << c.n_clients << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "hidden_layers = " << hidden << '\n'
     << "activation = " << (c.activation == Activation::tanh ? "tanh" : "relu") << '\n'
     << "eta = " << format_double(c.sophia.eta) << '\n'
     << "beta1 = " << format_double(c.sophia.beta1) << '\n'
     << "beta2 = " << format_double(c.sophia.beta2) << '\n'
     << "gamma = " << format_double(c.sophia.gamma) << '\n'
     << "epsilon = " << format_double(c.sophia.epsilon) << '\n'
     << "tau = " << c.sophia.tau << '\n'
     << "mu = " << format_double(c.mu) << '\n'
     << "local_steps = " << c.local_steps << '\n'
     << "baseline_eta = " << (c.baseline_eta ? format_double(*c.baseline_eta) : "auto") << '\n'
     << "b = " << c.ota.b << '\n'
     << "w_sub = " << format_double(c.ota.w_sub) << '\n'
     << "tau_sym = " << format_double(c.ota.tau_sym) << '\n'
     << "h_th = " << format_double(c.ota.h_th) << '\n'
     << "snr_db = " << format_double(c.ota.snr_db) << '\n'
     << "p_n = " << format_double(c.ota.p_n) << '\n'
     << "n0 = " << format_double(c.ota.n0) << '\n'
     << "noise_sigma = " << (c.ota.noise_sigma_override ? format_double(*c.ota.noise_sigma_override) : "auto")
     << '\n'
     << "ps_normalization = "
     << (c.ota.normalization == PsNormalization::by_clients ? "clients" : "participants") << '\n'
     << "bits_per_param = " << c.bits_per_param << '\n'
     << "e_compute_round = " << format_double(c.e_compute_round) << '\n'
     << "e_per_bit = " << format_double(c.e_per_bit) << '\n'
     << "dataset = " << (c.dataset == DatasetKind::synthetic ? "synthetic" : "mnist") << '\n';
  if (!c.mnist_images.empty()) os << "mnist_images = " << c.mnist_images << '\n';
  if (!c.mnist_labels.empty()) os << "mnist_labels = " << c.mnist_labels << '\n';
  os << "train_size = " << c.train_size << '\n'
     << "test_size = " << c.test_size << '\n'
     << "synthetic_samples = " << c.synthetic_samples << '\n'
     << "synthetic_input_dim = " << c.synthetic_input_dim << '\n'
     << "synthetic_classes = " << c.synthetic_classes << '\n'
     << "synthetic_separation = " << format_double(c.synthetic_separation) << '\n'
     << "partition = " << (c.partition == PartitionKind::iid ? "iid" : "label_limited") << '\n'
     << "max_labels = " << c.max_labels << '\n'
     << "seed = " << c.seed << '\n'
     << "out = " << c.out << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Datasets

/// Gaussian clusters with unit covariance. Class centers are drawn from
/// N(0, s^2 I) with s = separation / sqrt(2 * input_dim), so two centers sit
/// about `separation` apart. Labels cycle through the classes, which keeps
/// the histogram balanced within one sample.
inline Dataset gen_synthetic(std::size_t n, std::size_t input_dim, std::size_t classes, std::uint64_t seed,
                             double separation = 3.0) {
  if (classes < 1 || input_dim < 1) throw std::invalid_argument("gen_synthetic: sizes must be >= 1");
  if (n < classes) throw std::invalid_argument("gen_synthetic: need at least one sample per class");
  Rng rng = make_rng(seed, {tag(Stream::data)});
  std::normal_distribution<double> normal(0.0, 1.0);
  const double spread = separation / std::sqrt(2.0 * static_cast<double>(input_dim));
  Matrix centers(classes, input_dim);
  for (double& v : centers.data) v = spread * normal(rng);

  Dataset ds{Matrix(n, input_dim), std::vector<std::size_t>(n), classes};
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = r % classes;
    ds.labels[r] = c;
    for (std::size_t j = 0; j < input_dim; ++j) ds.inputs(r, j) = centers(c, j) + normal(rng);
  }
  return ds;
}

/// Splits off the last `test` samples after a seeded shuffle.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& data, std::size_t test, std::uint64_t seed) {
  if (test == 0 || test >= data.size()) throw std::invalid_argument("train_test_split: bad test size");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, {tag(Stream::data), 1});
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::span<const std::size_t> all(idx);
  return {data.subset(all.first(data.size() - test)), data.subset(all.last(test))};
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error(path + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Reads an IDX image/label file pair (big-endian headers, unsigned bytes).
/// Pixels are scaled to [0, 1]; at most `limit` samples are kept.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error(images_path + ": cannot open");
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error(labels_path + ": cannot open");

  if (const auto magic = detail::read_be32(img, images_path); magic != kIdxImageMagic)
    throw std::runtime_error(images_path + ": bad IDX image magic " + std::to_string(magic) + " (expected 2051)");
  if (const auto magic = detail::read_be32(lab, labels_path); magic != kIdxLabelMagic)
    throw std::runtime_error(labels_path + ": bad IDX label magic " + std::to_string(magic) + " (expected 2049)");
  const std::uint32_t n_img = detail::read_be32(img, images_path);
  const std::uint32_t rows = detail::read_be32(img, images_path);
  const std::uint32_t cols = detail::read_be32(img, images_path);
  const std::uint32_t n_lab = detail::read_be32(lab, labels_path);
  if (n_img != n_lab)
    throw std::runtime_error(images_path + " holds " + std::to_string(n_img) + " images but " + labels_path +
                             " holds " + std::to_string(n_lab) + " labels");
  const std::size_t n = std::min<std::size_t>(n_img, limit);
  const std::size_t dim = std::size_t{rows} * cols;
  if (n == 0 || dim == 0) throw std::runtime_error(images_path + ": no samples");

  std::vector<unsigned char> pixels(n * dim);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
    throw std::runtime_error(images_path + ": truncated image data");
  std::vector<unsigned char> raw_labels(n);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n)))
    throw std::runtime_error(labels_path + ": truncated label data");

  Dataset ds{Matrix(n, dim), std::vector<std::size_t>(n), 10};
  for (std::size_t i = 0; i < pixels.size(); ++i) ds.inputs.data[i] = pixels[i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (raw_labels[i] >= 10) throw std::runtime_error(labels_path + ": label " + std::to_string(raw_labels[i]) + " > 9");
    ds.labels[i] = raw_labels[i];
  }
  return ds;
}

/// Writes an IDX pair; pixel bytes and labels are taken verbatim.
inline void write_idx(const std::string& images_path, const std::string& labels_path, std::uint32_t rows,
                      std::uint32_t cols, std::span<const unsigned char> pixels, std::span<const unsigned char> labels) {
  if (pixels.size() != labels.size() * rows * cols) throw std::invalid_argument("write_idx: pixel count mismatch");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("write_idx: cannot open output files");
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(labels.size()));
  detail::write_be32(img, rows);
  detail::write_be32(img, cols);
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!img || !lab) throw std::runtime_error("write_idx: write failed");
}

// ---------------------------------------------------------------------------
// Runner

struct MetricsRow {
  std::int64_t round = 0;
  std::int64_t slots = 0;
  std::int64_t bits = 0;
  double energy_j = 0.0;
  std::int64_t slots_cum = 0;
  std::int64_t bits_cum = 0;
  double energy_j_cum = 0.0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double wall_clock_s = 0.0;  // informational; not written to CSV

  bool same_metrics(const MetricsRow& o) const {
    return round == o.round && slots == o.slots && bits == o.bits && energy_j == o.energy_j &&
           slots_cum == o.slots_cum && bits_cum == o.bits_cum && energy_j_cum == o.energy_j_cum &&
           train_loss == o.train_loss && test_accuracy == o.test_accuracy;
  }
};

/// Data, initial federation and round settings resolved from a config.
struct ExperimentSetup {
  FederationState state;
  Dataset test;
  RoundConfig round_cfg;
};

inline ExperimentSetup prepare_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  Dataset train;
  Dataset test;
  if (cfg.dataset == DatasetKind::mnist) {
    Dataset all = load_mnist_idx(cfg.mnist_images, cfg.mnist_labels, cfg.train_size + cfg.test_size);
    if (all.size() < cfg.train_size + cfg.test_size)
      throw std::runtime_error(cfg.mnist_images + ": holds " + std::to_string(all.size()) + " samples, need " +
                               std::to_string(cfg.train_size + cfg.test_size));
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::span<const std::size_t> s(idx);
    train = all.subset(s.first(cfg.train_size));
    test = all.subset(s.subspan(cfg.train_size, cfg.test_size));
  } else {
    const Dataset all = gen_synthetic(cfg.synthetic_samples, cfg.synthetic_input_dim, cfg.synthetic_classes, cfg.seed,
                                      cfg.synthetic_separation);
    std::tie(train, test) = train_test_split(all, all.size() / 4, cfg.seed);
  }

  MlpArch arch;
  arch.activation = cfg.activation;
  arch.layer_sizes.push_back(train.inputs.cols);
  arch.layer_sizes.insert(arch.layer_sizes.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
  arch.layer_sizes.push_back(train.class_count);

  std::vector<Dataset> shards = cfg.partition == PartitionKind::iid
                                    ? partition_iid(train, cfg.n_clients, cfg.seed)
                                    : partition_label_limited(train, cfg.n_clients, cfg.max_labels, cfg.seed);
  ParamVector theta0 = init_params(arch, derive_seed(cfg.seed, {tag(Stream::init)}));
  return {make_federation(arch, std::move(shards), std::move(theta0), cfg.ota.p_n), std::move(test),
          cfg.round_config()};
}

using RoundObserver = std::function<void(const FederationState& before, const FederationState& after,
                                         const RoundReport& report)>;

inline std::vector<MetricsRow> run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer = {}) {
  ExperimentSetup setup = prepare_experiment(cfg);
  std::vector<MetricsRow> rows;
  rows.reserve(static_cast<std::size_t>(cfg.rounds));
  MetricsRow cum;
  for (std::int64_t k = 0; k < cfg.rounds; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundOutcome next = run_round(setup.state, cfg.algo, cfg.link, setup.round_cfg, &setup.test);
    const auto t1 = std::chrono::steady_clock::now();
    if (observer) observer(setup.state, next.state, next.report);
    const RoundReport& r = next.report;
    cum.slots_cum += r.slots;
    cum.bits_cum += r.bits;
    cum.energy_j_cum += r.energy_j;
    rows.push_back({r.round, r.slots, r.bits, r.energy_j, cum.slots_cum, cum.bits_cum, cum.energy_j_cum,
                    r.train_loss, r.test_accuracy, std::chrono::duration<double>(t1 - t0).count()});
    setup.state = std::move(next.state);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kMetricsHeader =
    "round,slots,bits,energy_j,slots_cum,bits_cum,energy_j_cum,train_loss,test_accuracy";

inline std::string metrics_csv(std::span<const MetricsRow> rows) {
  using detail::format_double;
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.round) + ',' + std::to_string(r.slots) + ',' + std::to_string(r.bits) + ',' +
           format_double(r.energy_j) + ',' + std::to_string(r.slots_cum) + ',' + std::to_string(r.bits_cum) + ',' +
           format_double(r.energy_j_cum) + ',' + format_double(r.train_loss) + ',' + format_double(r.test_accuracy) +
           '\n';
  }
  return out;
}

inline void write_metrics_csv(std::span<const MetricsRow> rows, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  const std::string text = metrics_csv(rows);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  f.flush();
  if (!f) throw std::runtime_error(path + ": write failed");
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open");
  std::string line;
  if (!std::getline(f, line) || line != kMetricsHeader) throw std::runtime_error(path + ": unexpected header");
  std::vector<MetricsRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest(line);
    for (std::size_t pos = 0;;) {
      const auto comma = rest.find(',', pos);
      cells.push_back(rest.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (cells.size() != 9) throw std::runtime_error(path + ": expected 9 columns in '" + line + "'");
    using detail::parse_number;
    MetricsRow r;
    r.round = parse_number<std::int64_t>(cells[0], "round");
    r.slots = parse_number<std::int64_t>(cells[1], "slots");
    r.bits = parse_number<std::int64_t>(cells[2], "bits");
    r.energy_j = parse_number<double>(cells[3], "energy_j");
    r.slots_cum = parse_number<std::int64_t>(cells[4], "slots_cum");
    r.bits_cum = parse_number<std::int64_t>(cells[5], "bits_cum");
    r.energy_j_cum = parse_number<double>(cells[6], "energy_j_cum");
    r.train_loss = parse_number<double>(cells[7], "train_loss");
    r.test_accuracy = parse_number<double>(cells[8], "test_accuracy");
    rows.push_back(r);
  }
  return rows;
}

}  // namespace otafed
