#pragma once

#include "avctta/buffer.hpp"
#include "avctta/stream.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace avctta::io {

// All containers share one little-endian framing: a 4-byte magic, a u32
// format version, then raw fields. Doubles travel as their IEEE-754 bit
// patterns, so round trips are bit-exact.

inline constexpr std::uint32_t kBufferFormatVersion = 1;
inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kParamsFormatVersion = 1;
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  return std::bit_cast<double>(read_u64(is));
}

inline void write_magic(std::ostream& os, const char magic[4],
                        std::uint32_t version) {
  os.write(magic, 4);
  write_u32(os, version);
}

inline void expect_magic(std::istream& is, const char magic[4],
                         std::uint32_t version, const char* what) {
  char got[4];
  is.read(got, 4);
  if (!is || std::string_view(got, 4) != std::string_view(magic, 4)) {
    throw std::runtime_error(std::string(what) + ": bad magic");
  }
  const std::uint32_t v = read_u32(is);
  if (v != version) {
    throw std::runtime_error(std::string(what) + ": unsupported version " +
                             std::to_string(v));
  }
}

inline void write_vector(std::ostream& os, const VectorX<double>& v) {
  write_u64(os, static_cast<std::uint64_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) write_f64(os, v[i]);
}

inline VectorX<double> read_vector(std::istream& is) {
  const auto n = static_cast<Index>(read_u64(is));
  VectorX<double> v(n);
  for (Index i = 0; i < n; ++i) v[i] = read_f64(is);
  return v;
}

template <typename Mat>
void write_matrix(std::ostream& os, const Mat& m) {
  write_u64(os, static_cast<std::uint64_t>(m.rows()));
  write_u64(os, static_cast<std::uint64_t>(m.cols()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) write_f64(os, m(r, c));
  }
}

template <typename Mat>
Mat read_matrix(std::istream& is) {
  const auto rows = static_cast<Index>(read_u64(is));
  const auto cols = static_cast<Index>(read_u64(is));
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = read_f64(is);
  }
  return m;
}

inline std::ofstream open_out(const std::filesystem::path& path,
                              const char* what) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw std::runtime_error(std::string(what) + ": cannot open " +
                             path.string() + " for writing");
  }
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path,
                             const char* what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw std::runtime_error(std::string(what) + ": cannot open " +
                             path.string());
  }
  return is;
}

inline void write_stats(std::ostream& os, const ModalityStats& s) {
  write_vector(os, s.mean);
  write_vector(os, s.var);
}

inline ModalityStats read_stats(std::istream& is) {
  ModalityStats s;
  s.mean = read_vector(is);
  s.var = read_vector(is);
  return s;
}

inline void write_params(std::ostream& os, const FusionParams& p) {
  write_matrix(os, p.w_q);
  write_matrix(os, p.w_k);
  write_matrix(os, p.w_v);
}

inline FusionParams read_params(std::istream& is) {
  FusionParams p;
  p.w_q = read_matrix<MatrixX<double>>(is);
  p.w_k = read_matrix<MatrixX<double>>(is);
  p.w_v = read_matrix<MatrixX<double>>(is);
  return p;
}

}  // namespace detail

/// Checkpoints a buffer (configuration and all elements) to `path`.
inline void save_buffer(const SnapshotBuffer& buffer,
                        const std::filesystem::path& path) {
  auto os = detail::open_out(path, "save_buffer");
  detail::write_magic(os, "AVBF", kBufferFormatVersion);
  detail::write_f64(os, buffer.tau());
  detail::write_u32(os, buffer.eta() ? 1 : 0);
  detail::write_u64(os, buffer.eta() ? *buffer.eta() : 0);
  detail::write_f64(os, buffer.beta());
  detail::write_u32(os,
                    buffer.policy() == BudgetPolicy::MergeClosest ? 0u : 1u);
  detail::write_u32(os, buffer.exact_mixture_merge() ? 1u : 0u);
  detail::write_u64(os, buffer.size());
  for (const auto& e : buffer.elements()) {
    detail::write_u64(os, static_cast<std::uint64_t>(e.created_step));
    detail::write_stats(os, e.signature.audio);
    detail::write_stats(os, e.signature.visual);
    detail::write_params(os, e.params);
  }
  if (!os) throw std::runtime_error("save_buffer: write failed");
}

inline SnapshotBuffer load_buffer(const std::filesystem::path& path) {
  auto is = detail::open_in(path, "load_buffer");
  detail::expect_magic(is, "AVBF", kBufferFormatVersion, "load_buffer");
  const double tau = detail::read_f64(is);
  const bool has_eta = detail::read_u32(is) != 0;
  const std::uint64_t eta = detail::read_u64(is);
  const double beta = detail::read_f64(is);
  const BudgetPolicy policy = detail::read_u32(is) == 0
                                  ? BudgetPolicy::MergeClosest
                                  : BudgetPolicy::DropOldest;
  const bool exact_mixture = detail::read_u32(is) != 0;
  SnapshotBuffer buffer(tau,
                        has_eta ? std::optional<std::size_t>(eta)
                                : std::nullopt,
                        beta, policy, exact_mixture);
  const std::uint64_t count = detail::read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    BufferElement e;
    e.created_step = static_cast<std::int64_t>(detail::read_u64(is));
    e.signature.audio = detail::read_stats(is);
    e.signature.visual = detail::read_stats(is);
    e.params = detail::read_params(is);
    buffer.restore_element(std::move(e));
  }
  return buffer;
}

/// Standalone fusion-parameter checkpoints; same framing as the buffer file.
inline void save_fusion_params(const FusionParams& params,
                               const std::filesystem::path& path) {
  auto os = detail::open_out(path, "save_fusion_params");
  detail::write_magic(os, "AVFP", kParamsFormatVersion);
  detail::write_params(os, params);
  if (!os) throw std::runtime_error("save_fusion_params: write failed");
}

inline FusionParams load_fusion_params(const std::filesystem::path& path) {
  auto is = detail::open_in(path, "load_fusion_params");
  detail::expect_magic(is, "AVFP", kParamsFormatVersion, "load_fusion_params");
  return detail::read_params(is);
}

/// Generated dataset container: shapes, both modality matrices, labels.
inline void save_dataset(const SourceDataset& ds,
                         const std::filesystem::path& path) {
  auto os = detail::open_out(path, "save_dataset");
  detail::write_magic(os, "AVDS", kDatasetFormatVersion);
  detail::write_u64(os, static_cast<std::uint64_t>(ds.classes));
  detail::write_u64(os, static_cast<std::uint64_t>(ds.height));
  detail::write_u64(os, static_cast<std::uint64_t>(ds.width));
  detail::write_u64(os, static_cast<std::uint64_t>(ds.channels));
  detail::write_u64(os, static_cast<std::uint64_t>(ds.time_steps));
  detail::write_u64(os, static_cast<std::uint64_t>(ds.freq_bins));
  detail::write_matrix(os, ds.audio);
  detail::write_matrix(os, ds.visual);
  detail::write_u64(os, ds.labels.size());
  for (std::int32_t label : ds.labels) {
    detail::write_u32(os, static_cast<std::uint32_t>(label));
  }
  if (!os) throw std::runtime_error("save_dataset: write failed");
}

inline SourceDataset load_dataset(const std::filesystem::path& path) {
  auto is = detail::open_in(path, "load_dataset");
  detail::expect_magic(is, "AVDS", kDatasetFormatVersion, "load_dataset");
  SourceDataset ds;
  ds.classes = static_cast<Index>(detail::read_u64(is));
  ds.height = static_cast<Index>(detail::read_u64(is));
  ds.width = static_cast<Index>(detail::read_u64(is));
  ds.channels = static_cast<Index>(detail::read_u64(is));
  ds.time_steps = static_cast<Index>(detail::read_u64(is));
  ds.freq_bins = static_cast<Index>(detail::read_u64(is));
  ds.audio = detail::read_matrix<RowMajorX<double>>(is);
  ds.visual = detail::read_matrix<RowMajorX<double>>(is);
  const std::uint64_t n = detail::read_u64(is);
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<std::int32_t>(detail::read_u32(is));
  }
  return ds;
}

}  // namespace avctta::io
