#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "blstm/error.hpp"
#include "blstm/rng.hpp"
#include "blstm/tensor.hpp"

namespace blstm {

/// Label of frames that are fed to the network but excluded from loss and
/// error counts.
inline constexpr int kIgnoreLabel = -1;

struct Sequence {
  std::string id;
  std::size_t length = 0;
  std::vector<float> features;  // [length x feature_dim], row-major
  std::vector<int> labels;      // [length]

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

struct SequenceDataset {
  std::vector<Sequence> sequences;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;

  bool empty() const noexcept { return sequences.empty(); }

  std::size_t total_frames() const noexcept {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.length;
    return n;
  }

  /// Throws ValidationError naming the first violated invariant.
  void validate() const {
    if (feature_dim == 0) throw ValidationError("dataset feature dimension must be positive");
    if (num_classes == 0) throw ValidationError("dataset class count must be positive");
    for (const auto& s : sequences) {
      if (s.length == 0) throw ValidationError("sequence '" + s.id + "' is empty");
      if (s.features.size() != s.length * feature_dim || s.labels.size() != s.length) {
        throw ValidationError("sequence '" + s.id + "' has inconsistent feature/label sizes");
      }
      for (std::size_t t = 0; t < s.length; ++t) {
        const int y = s.labels[t];
        if (y != kIgnoreLabel && (y < 0 || static_cast<std::size_t>(y) >= num_classes)) {
          throw ValidationError("sequence '" + s.id + "' frame " + std::to_string(t) + ": label " +
                                std::to_string(y) + " outside [0, " + std::to_string(num_classes) +
                                ")");
        }
      }
    }
  }

  friend bool operator==(const SequenceDataset&, const SequenceDataset&) = default;
};

// ---------------------------------------------------------------------------
// SEQD text format
//
//   SEQD 1 <n_seq> <D> <C>
//   SEQ <id> <len>
//   <D floats> <label>      (len lines)
//   ...

inline SequenceDataset read_dataset(std::istream& in) {
  SequenceDataset ds;
  std::string line;
  std::size_t line_no = 0;

  auto next_line = [&](const char* expect) {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") != std::string::npos) return;
    }
    throw ParseError(std::string("unexpected end of file, expected ") + expect, line_no + 1);
  };

  next_line("SEQD header");
  std::size_t n_seq = 0;
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version >> n_seq >> ds.feature_dim >> ds.num_classes) || magic != "SEQD") {
      throw ParseError("malformed header, expected 'SEQD 1 <n_seq> <D> <C>'", line_no);
    }
    if (version != 1) throw ParseError("unsupported SEQD version " + std::to_string(version), line_no);
    std::string extra;
    if (hs >> extra) throw ParseError("trailing tokens in header", line_no);
  }
  const std::size_t dim = ds.feature_dim;

  ds.sequences.reserve(n_seq);
  for (std::size_t s = 0; s < n_seq; ++s) {
    next_line("SEQ header");
    Sequence seq;
    {
      std::istringstream hs(line);
      std::string tag;
      long long len = -1;
      if (!(hs >> tag >> seq.id >> len) || tag != "SEQ" || len < 0) {
        throw ParseError("malformed sequence header, expected 'SEQ <id> <len>'", line_no);
      }
      seq.length = static_cast<std::size_t>(len);
    }
    if (seq.length == 0) throw ValidationError("sequence '" + seq.id + "' is empty");
    seq.features.resize(seq.length * dim);
    seq.labels.resize(seq.length);
    for (std::size_t t = 0; t < seq.length; ++t) {
      next_line("frame row");
      const char* p = line.c_str();
      for (std::size_t d = 0; d < dim; ++d) {
        char* end = nullptr;
        const float v = std::strtof(p, &end);
        if (end == p) {
          throw ParseError("expected " + std::to_string(dim) + " floats and a label", line_no);
        }
        seq.features[t * dim + d] = v;
        p = end;
      }
      char* end = nullptr;
      const long label = std::strtol(p, &end, 10);
      if (end == p) throw ParseError("missing frame label", line_no);
      p = end;
      while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
      if (*p != '\0') throw ParseError("trailing tokens after frame label", line_no);
      seq.labels[t] = static_cast<int>(label);
    }
    ds.sequences.push_back(std::move(seq));
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string::npos) {
      throw ParseError("data after the declared number of sequences", line_no);
    }
  }
  ds.validate();
  return ds;
}

inline SequenceDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset '" + path + "'");
  return read_dataset(in);
}

inline void write_dataset(const SequenceDataset& ds, std::ostream& out) {
  out << "SEQD 1 " << ds.sequences.size() << ' ' << ds.feature_dim << ' ' << ds.num_classes << '\n';
  char buf[32];
  for (const auto& s : ds.sequences) {
    out << "SEQ " << s.id << ' ' << s.length << '\n';
    for (std::size_t t = 0; t < s.length; ++t) {
      for (std::size_t d = 0; d < ds.feature_dim; ++d) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(s.features[t * ds.feature_dim + d]));
        out << buf << ' ';
      }
      out << s.labels[t] << '\n';
    }
  }
}

inline void save_dataset(const SequenceDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write dataset '" + path + "'");
  write_dataset(ds, out);
  if (!out) throw ValidationError("failed writing dataset '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Labelling rule of the synthetic corpus.
///
/// Clean frames are vectors of independent +-1 entries. The label of frame t
/// is obtained by projecting the window [t - radius, t + radius] (frames
/// outside the sequence count as zero) onto a fixed random direction and
/// cutting the score into `num_classes` bins of equal probability mass. For
/// interior frames the score is a sum of (2r+1)*D independent +-w terms, so
/// the bin edges are the normal quantiles sigma * Phi^-1(k/C) with
/// sigma = ||w||.
struct SyntheticRule {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::size_t radius = 0;
  std::vector<double> weights;     // [(2r+1) x D], offset -r first
  std::vector<double> thresholds;  // ascending, num_classes - 1 entries

  double score(std::span<const float> frames, std::size_t length, std::size_t t) const {
    double s = 0.0;
    const auto r = static_cast<std::ptrdiff_t>(radius);
    for (std::ptrdiff_t k = -r; k <= r; ++k) {
      const std::ptrdiff_t u = static_cast<std::ptrdiff_t>(t) + k;
      if (u < 0 || u >= static_cast<std::ptrdiff_t>(length)) continue;
      const double* w = weights.data() + static_cast<std::size_t>(k + r) * feature_dim;
      const float* x = frames.data() + static_cast<std::size_t>(u) * feature_dim;
      for (std::size_t d = 0; d < feature_dim; ++d) s += w[d] * x[d];
    }
    return s;
  }

  int label_of_score(double s) const {
    return static_cast<int>(std::upper_bound(thresholds.begin(), thresholds.end(), s) -
                            thresholds.begin());
  }

  std::vector<int> label_sequence(std::span<const float> frames, std::size_t length) const {
    std::vector<int> out(length);
    for (std::size_t t = 0; t < length; ++t) out[t] = label_of_score(score(frames, length, t));
    return out;
  }
};

/// Inverse of the standard normal CDF, by bisection on erfc.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ParameterError("normal quantile needs p in (0, 1)");
  double lo = -40.0;
  double hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::numbers::sqrt2) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

inline SyntheticRule make_synthetic_rule(std::size_t feature_dim, std::size_t num_classes,
                                         std::size_t radius, std::uint64_t seed) {
  if (feature_dim == 0 || num_classes == 0) {
    throw ParameterError("synthetic rule needs positive feature and class counts");
  }
  SyntheticRule rule;
  rule.feature_dim = feature_dim;
  rule.num_classes = num_classes;
  rule.radius = radius;
  Rng rng(mix_seed(seed, 1));
  rule.weights.resize((2 * radius + 1) * feature_dim);
  double norm2 = 0.0;
  for (double& w : rule.weights) {
    w = rng.uniform(-1.0, 1.0);
    norm2 += w * w;
  }
  const double sigma = std::sqrt(norm2);
  for (std::size_t k = 1; k < num_classes; ++k) {
    rule.thresholds.push_back(sigma * normal_quantile(static_cast<double>(k) / num_classes));
  }
  return rule;
}

struct SyntheticSpec {
  std::size_t n_seq = 100;
  std::size_t len_min = 50;
  std::size_t len_max = 80;
  std::size_t feature_dim = 8;
  std::size_t num_classes = 5;
  std::size_t context_radius = 2;
  double noise_stddev = 0.0;
  std::uint64_t seed = 1;
};

inline SequenceDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.len_min < 1 || spec.len_min > spec.len_max) {
    throw ParameterError("synthetic lengths need 1 <= len_min <= len_max");
  }
  if (!(spec.noise_stddev >= 0.0)) throw ParameterError("noise stddev must be >= 0");
  const SyntheticRule rule =
      make_synthetic_rule(spec.feature_dim, spec.num_classes, spec.context_radius, spec.seed);

  SequenceDataset ds;
  ds.feature_dim = spec.feature_dim;
  ds.num_classes = spec.num_classes;
  Rng rng(mix_seed(spec.seed, 2));
  const std::size_t dim = spec.feature_dim;
  for (std::size_t s = 0; s < spec.n_seq; ++s) {
    Sequence seq;
    seq.id = "syn" + std::to_string(s);
    seq.length = spec.len_min + rng.below(spec.len_max - spec.len_min + 1);
    seq.features.resize(seq.length * dim);
    for (float& v : seq.features) v = (rng.next_u64() >> 63) ? 1.0f : -1.0f;
    seq.labels = rule.label_sequence(seq.features, seq.length);
    if (spec.noise_stddev > 0.0) {
      for (float& v : seq.features) v += static_cast<float>(rng.gaussian(0.0, spec.noise_stddev));
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Chunking and minibatches

struct BatchingConfig {
  std::size_t T = 50;        // max chunk length
  std::size_t t_step = 25;   // chunk stride
  std::size_t n_chunks = 40; // chunks per minibatch
  std::uint64_t shuffle_seed = 1;

  void validate() const {
    if (T < 1) throw ConfigError("batching.T must be >= 1");
    if (t_step < 1 || t_step > T) throw ConfigError("batching.t_step must be in [1, T]");
    if (n_chunks < 1) throw ConfigError("batching.n_chunks must be >= 1");
  }
};

struct ChunkSpan {
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const ChunkSpan&, const ChunkSpan&) = default;
};

struct ChunkSpec {
  std::size_t seq_index = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  friend bool operator==(const ChunkSpec&, const ChunkSpec&) = default;
  friend auto operator<=>(const ChunkSpec&, const ChunkSpec&) = default;
};

/// Chunks start every t_step frames and are at most T long. Generation stops
/// after the first chunk that reaches the end of the sequence.
inline std::vector<ChunkSpan> extract_chunks(std::size_t seq_len, const BatchingConfig& cfg) {
  std::vector<ChunkSpan> out;
  if (seq_len == 0) return out;
  for (std::size_t start = 0;; start += cfg.t_step) {
    const std::size_t end = std::min(start + cfg.T, seq_len);
    out.push_back({start, end - start});
    if (end == seq_len) break;
  }
  return out;
}

/// All chunks of one epoch in their seeded shuffle order.
inline std::vector<ChunkSpec> epoch_chunks(const SequenceDataset& ds, const BatchingConfig& cfg,
                                           std::uint64_t epoch) {
  std::vector<ChunkSpec> chunks;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    for (const auto& c : extract_chunks(ds.sequences[i].length, cfg)) {
      chunks.push_back({i, c.start, c.length});
    }
  }
  Rng rng(mix_seed(cfg.shuffle_seed, epoch));
  for (std::size_t i = chunks.size(); i > 1; --i) {
    std::swap(chunks[i - 1], chunks[rng.below(i)]);
  }
  return chunks;
}

struct Minibatch {
  std::size_t batch_size = 0;
  std::size_t max_len = 0;
  std::size_t feature_dim = 0;
  Tensor<float> features;     // [B x T_max x D], padded with zeros
  std::vector<int> labels;    // [B x T_max], padded with kIgnoreLabel
  std::vector<unsigned char> mask;  // [B x T_max]
  std::size_t frame_count = 0;      // real frames with a non-ignored label
  std::vector<ChunkSpec> chunks;

  int label(std::size_t b, std::size_t t) const { return labels[b * max_len + t]; }
  bool valid(std::size_t b, std::size_t t) const { return mask[b * max_len + t] != 0; }
  bool counted(std::size_t b, std::size_t t) const {
    return valid(b, t) && label(b, t) != kIgnoreLabel;
  }
  std::size_t length(std::size_t b) const { return chunks[b].length; }
};

inline Minibatch assemble_minibatch(const SequenceDataset& ds, std::span<const ChunkSpec> chunks) {
  if (chunks.empty()) throw ParameterError("cannot assemble an empty minibatch");
  Minibatch mb;
  mb.batch_size = chunks.size();
  mb.feature_dim = ds.feature_dim;
  mb.chunks.assign(chunks.begin(), chunks.end());
  for (const auto& c : chunks) mb.max_len = std::max(mb.max_len, c.length);
  const std::size_t dim = ds.feature_dim;
  mb.features = Tensor<float>({mb.batch_size, mb.max_len, dim});
  mb.labels.assign(mb.batch_size * mb.max_len, kIgnoreLabel);
  mb.mask.assign(mb.batch_size * mb.max_len, 0);
  for (std::size_t b = 0; b < chunks.size(); ++b) {
    const ChunkSpec& c = chunks[b];
    const Sequence& seq = ds.sequences.at(c.seq_index);
    if (c.length == 0 || c.start + c.length > seq.length) {
      throw ParameterError("chunk exceeds sequence '" + seq.id + "'");
    }
    std::copy_n(seq.features.begin() + static_cast<std::ptrdiff_t>(c.start * dim), c.length * dim,
                mb.features.ptr() + b * mb.max_len * dim);
    for (std::size_t t = 0; t < c.length; ++t) {
      const int y = seq.labels[c.start + t];
      mb.labels[b * mb.max_len + t] = y;
      mb.mask[b * mb.max_len + t] = 1;
      if (y != kIgnoreLabel) ++mb.frame_count;
    }
  }
  return mb;
}

/// Seeded sequence of minibatches for one epoch. The last batch may hold
/// fewer than n_chunks chunks.
class MinibatchStream {
 public:
  MinibatchStream(const SequenceDataset& ds, const BatchingConfig& cfg, std::uint64_t epoch)
      : ds_(&ds), n_chunks_(cfg.n_chunks), chunks_(epoch_chunks(ds, cfg, epoch)) {
    if (ds.empty()) throw ParameterError("cannot batch an empty dataset");
  }

  std::size_t num_batches() const noexcept { return (chunks_.size() + n_chunks_ - 1) / n_chunks_; }
  const std::vector<ChunkSpec>& chunks() const noexcept { return chunks_; }

  std::optional<Minibatch> next() {
    if (pos_ >= chunks_.size()) return std::nullopt;
    const std::size_t count = std::min(n_chunks_, chunks_.size() - pos_);
    Minibatch mb = assemble_minibatch(*ds_, std::span(chunks_).subspan(pos_, count));
    pos_ += count;
    return mb;
  }

 private:
  const SequenceDataset* ds_;
  std::size_t n_chunks_;
  std::vector<ChunkSpec> chunks_;
  std::size_t pos_ = 0;
};

inline std::vector<Minibatch> build_minibatches(const SequenceDataset& ds, const BatchingConfig& cfg,
                                                std::uint64_t epoch) {
  MinibatchStream stream(ds, cfg, epoch);
  std::vector<Minibatch> out;
  out.reserve(stream.num_batches());
  while (auto mb = stream.next()) out.push_back(std::move(*mb));
  return out;
}

/// Splits off the last `fraction` of sequences (at least one) as a held-out set.
inline std::pair<SequenceDataset, SequenceDataset> split_holdout(const SequenceDataset& ds,
                                                                 double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("data.cv_fraction must be in (0, 1)");
  if (ds.sequences.size() < 2) throw ValidationError("need at least 2 sequences to hold out a CV set");
  auto n_cv = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.sequences.size())));
  n_cv = std::clamp<std::size_t>(n_cv, 1, ds.sequences.size() - 1);
  SequenceDataset train{{}, ds.feature_dim, ds.num_classes};
  SequenceDataset cv{{}, ds.feature_dim, ds.num_classes};
  const std::size_t cut = ds.sequences.size() - n_cv;
  train.sequences.assign(ds.sequences.begin(), ds.sequences.begin() + static_cast<std::ptrdiff_t>(cut));
  cv.sequences.assign(ds.sequences.begin() + static_cast<std::ptrdiff_t>(cut), ds.sequences.end());
  return {std::move(train), std::move(cv)};
}

}  // namespace blstm
