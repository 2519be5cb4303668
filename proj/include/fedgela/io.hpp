#pragma once

// Round-log CSV, run manifest, parameter checkpoints and dataset hashing.

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fedgela/config.hpp"
#include "fedgela/data.hpp"
#include "fedgela/error.hpp"
#include "fedgela/fed.hpp"
#include "fedgela/nn.hpp"
#include "json.hpp"

namespace fedgela {

// ---------------------------------------------------------------------------
// Round log

inline constexpr const char* kRoundLogHeader =
    "round,algo,ga,pa,global_mean_angle,local_exist_angle,clf_exist_angle,clf_miss_angle,mean_train_loss";

/// Flat view of one round-log row.
struct RoundRow {
  int round = 0;
  std::string algo;
  double ga = 0.0;
  double pa = 0.0;
  double global_mean_angle = 0.0;
  double local_exist_angle = 0.0;
  double clf_exist_angle = 0.0;
  double clf_miss_angle = 0.0;
  double mean_train_loss = 0.0;
};

inline RoundRow to_row(const RoundLog& log) {
  return RoundRow{log.round,
                  to_string(log.algo),
                  log.ga,
                  log.pa,
                  log.angles.global_all_class_mean_angle,
                  log.angles.per_client_existing_class_mean_angle,
                  log.angles.classifier_existing_angle,
                  log.angles.classifier_missing_angle,
                  log.mean_train_loss};
}

inline void write_round_log(std::span<const RoundLog> logs, std::ostream& out) {
  out << kRoundLogHeader << '\n';
  for (const auto& l : logs) {
    const RoundRow r = to_row(l);
    out << r.round << ',' << r.algo << ',' << format_real(r.ga) << ',' << format_real(r.pa) << ','
        << format_real(r.global_mean_angle) << ',' << format_real(r.local_exist_angle) << ','
        << format_real(r.clf_exist_angle) << ',' << format_real(r.clf_miss_angle) << ','
        << format_real(r.mean_train_loss) << '\n';
  }
}

inline std::vector<RoundRow> read_round_log(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kRoundLogHeader) {
    throw Error("parse", "round log: missing or unexpected header");
  }
  std::vector<RoundRow> rows;
  int line_no = 1;
  auto real = [&](std::string_view s) {
    s = detail::trim(s);
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    if (!detail::parse_number(s, v)) throw Error("parse", "round log line " + std::to_string(line_no) + ": bad number");
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_commas(detail::trim(line));
    if (f.size() != 9) throw Error("parse", "round log line " + std::to_string(line_no) + ": expected 9 fields");
    RoundRow r;
    if (!detail::parse_number(f[0], r.round)) throw Error("parse", "round log line " + std::to_string(line_no) + ": bad round");
    r.algo = std::string(detail::trim(f[1]));
    r.ga = real(f[2]);
    r.pa = real(f[3]);
    r.global_mean_angle = real(f[4]);
    r.local_exist_angle = real(f[5]);
    r.clf_exist_angle = real(f[6]);
    r.clf_miss_angle = real(f[7]);
    r.mean_train_loss = real(f[8]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Dataset hash: git blob id of the dataset's canonical CSV serialization.

inline std::string sha1_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("hash", "sha1 failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream o;
  for (unsigned int i = 0; i < len; ++i) o << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return o.str();
}

inline std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  return sha1_hex(blob);
}

inline std::string dataset_hash(const Dataset& ds) {
  std::ostringstream o;
  write_csv(ds, o);
  return git_blob_hash(o.str());
}

// ---------------------------------------------------------------------------
// Manifest

inline nlohmann::ordered_json config_json(const RunConfig& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  std::istringstream in(to_text(c));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

inline RunConfig config_from_json(const nlohmann::ordered_json& j) {
  ConfigBuilder b;
  for (const auto& [k, v] : j.items()) b.set(k, v.get<std::string>());
  return b.build();
}

inline nlohmann::ordered_json run_manifest(const RunConfig& c, const Dataset& ds, std::span<const RoundLog> logs) {
  nlohmann::ordered_json m;
  m["config"] = config_json(c);
  m["seed"] = c.seed;
  m["dataset_hash"] = dataset_hash(ds);
  m["samples"] = ds.size();
  m["classes"] = ds.classes;
  m["rounds_logged"] = logs.size();
  if (!logs.empty()) {
    m["final"] = {{"round", logs.back().round}, {"ga", logs.back().ga}, {"pa", logs.back().pa}};
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian host order):
//   "FGLACKPT" | u32 version | u32 n_sizes | i32 sizes[n_sizes] | u8 has_head
//   | [i32 rows, i32 cols] | f64 tensors in layer order (W_l row-major, b_l),
//   then the head row-major.

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'L', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw Error("checkpoint", "checkpoint: truncated");
  return v;
}
inline void put_row_major(std::ostream& o, const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put(o, m(i, j));
}
inline void get_row_major(std::istream& in, Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>(in);
}
}  // namespace detail

inline void write_checkpoint(const ModelParams& p, std::ostream& o) {
  o.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put(o, kCheckpointVersion);
  detail::put(o, static_cast<std::uint32_t>(p.backbone.sizes.size()));
  for (int s : p.backbone.sizes) detail::put(o, static_cast<std::int32_t>(s));
  detail::put(o, static_cast<std::uint8_t>(p.head ? 1 : 0));
  if (p.head) {
    detail::put(o, static_cast<std::int32_t>(p.head->rows()));
    detail::put(o, static_cast<std::int32_t>(p.head->cols()));
  }
  for (std::size_t l = 0; l < p.backbone.layers(); ++l) {
    detail::put_row_major(o, p.backbone.weights[l]);
    for (Eigen::Index i = 0; i < p.backbone.biases[l].size(); ++i) detail::put(o, p.backbone.biases[l](i));
  }
  if (p.head) detail::put_row_major(o, *p.head);
}

inline ModelParams read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error("checkpoint", "checkpoint: bad magic");
  }
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw Error("checkpoint", "checkpoint: unsupported version " + std::to_string(version));
  const auto n = detail::get<std::uint32_t>(in);
  if (n < 2 || n > 1024) throw Error("checkpoint", "checkpoint: bad layer count");
  ModelParams p;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto s = detail::get<std::int32_t>(in);
    if (s < 1) throw Error("checkpoint", "checkpoint: bad layer width");
    p.backbone.sizes.push_back(s);
  }
  const bool has_head = detail::get<std::uint8_t>(in) != 0;
  Eigen::Index head_rows = 0, head_cols = 0;
  if (has_head) {
    head_rows = detail::get<std::int32_t>(in);
    head_cols = detail::get<std::int32_t>(in);
    if (head_rows < 1 || head_cols < 1) throw Error("checkpoint", "checkpoint: bad head shape");
  }
  for (std::size_t l = 0; l + 1 < p.backbone.sizes.size(); ++l) {
    Eigen::MatrixXd w(p.backbone.sizes[l + 1], p.backbone.sizes[l]);
    detail::get_row_major(in, w);
    Eigen::VectorXd b(p.backbone.sizes[l + 1]);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = detail::get<double>(in);
    p.backbone.weights.push_back(std::move(w));
    p.backbone.biases.push_back(std::move(b));
  }
  if (has_head) {
    Eigen::MatrixXd h(head_rows, head_cols);
    detail::get_row_major(in, h);
    p.head = std::move(h);
  }
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error("io", "cannot write " + path);
  write_checkpoint(p, o);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace fedgela
