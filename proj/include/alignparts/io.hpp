#pragma once

// On-disk formats: checksummed JSON-lines records, embeddings, shapes with
// optional binary blobs, named-tensor weights, class statistics,
// predictions, vocabularies and decision files.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignparts/fusion.hpp"
#include "alignparts/inference.hpp"
#include "alignparts/metrics.hpp"
#include "alignparts/ontology.hpp"
#include "alignparts/partlets.hpp"

namespace alignparts {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

// Canonical bytes of an object (sorted keys, compact) with a final "crc32"
// field over those bytes.
inline std::string seal_record(const json& record) {
  if (!record.is_object()) fail(ErrorKind::schema, "seal_record: record must be an object");
  if (record.contains("crc32")) fail(ErrorKind::schema, "seal_record: record already carries crc32");
  const std::string body = record.dump();
  const std::string crc = "\"crc32\":\"" + hex32(crc32_of(body)) + "\"}";
  return body.size() == 2 ? "{" + crc : body.substr(0, body.size() - 1) + "," + crc;
}

// Parses and verifies one sealed line; `index` (0-based) names the record in errors.
inline json open_record(const std::string& line, std::size_t index) {
  const std::string where = "record " + std::to_string(index);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, where + ": malformed JSON: " + e.what());
  }
  if (!j.is_object() || !j.contains("crc32") || !j["crc32"].is_string())
    fail(ErrorKind::schema, where + ": missing crc32");
  const std::string stated = j["crc32"].get<std::string>();
  j.erase("crc32");
  if (hex32(crc32_of(j.dump())) != stated) fail(ErrorKind::schema, where + ": checksum mismatch");
  return j;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::environment, "cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::environment, "cannot write " + p.string());
  out << s;
  if (!out) fail(ErrorKind::environment, "write failed for " + p.string());
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    fail(ErrorKind::schema, p.string() + ": " + e.what());
  }
}

inline std::vector<json> read_records(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(open_record(line, out.size()));
  }
  return out;
}

inline void write_records(const fs::path& p, const std::vector<json>& records) {
  std::string s;
  for (const auto& r : records) s += seal_record(r) + "\n";
  write_text(p, s);
}

// ---- JSON helpers ----------------------------------------------------------

namespace detail {

template <class T>
T field(const json& j, const char* key, const std::string& ctx) {
  if (!j.is_object() || !j.contains(key)) fail(ErrorKind::schema, ctx + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::schema, ctx + ": field '" + key + "' has the wrong type");
  }
}

inline void only_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& ctx) {
  if (!j.is_object()) fail(ErrorKind::schema, ctx + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) fail(ErrorKind::schema, ctx + ": unknown key '" + k + "'");
  }
}

}  // namespace detail

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j, const std::string& ctx, Eigen::Index cols = -1) {
  if (!j.is_array()) fail(ErrorKind::schema, ctx + ": expected an array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  if (rows > 0 && cols < 0) cols = j[0].is_array() ? static_cast<Eigen::Index>(j[0].size()) : -1;
  Matrix m(rows, std::max<Eigen::Index>(cols, 0));
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      fail(ErrorKind::schema, ctx + ": row " + std::to_string(r) + " has the wrong length");
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number())
        fail(ErrorKind::schema, ctx + ": non-numeric entry at row " + std::to_string(r));
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

// ---- Little-endian binary primitives ---------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(std::string data, std::string ctx) : data_(std::move(data)), ctx_(std::move(ctx)) {}
  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
  std::uint64_t u64() { return u(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  void expect_done() const {
    if (!done()) fail(ErrorKind::schema, ctx_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail(ErrorKind::schema, ctx_ + ": truncated");
  }
  std::string data_;
  std::string ctx_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// ---- Embeddings ------------------------------------------------------------

// JSON map label -> vector. Rows are renormalized on load; labels whose norm
// was off by more than 1e-6 are reported in `warnings`.
inline LabelEmbeddings load_embeddings(const fs::path& p, std::vector<std::string>* warnings = nullptr) {
  const json j = read_json(p);
  if (!j.is_object()) fail(ErrorKind::schema, p.string() + ": expected a label -> vector map");
  LabelEmbeddings out;
  Eigen::Index dim = -1;
  for (const auto& [label, arr] : j.items()) {
    if (!arr.is_array() || arr.empty()) fail(ErrorKind::schema, p.string() + ": bad vector for '" + label + "'");
    Vector v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number()) fail(ErrorKind::schema, p.string() + ": non-numeric value for '" + label + "'");
      v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
    }
    if (dim >= 0 && v.size() != dim) fail(ErrorKind::schema, p.string() + ": inconsistent dimension at '" + label + "'");
    dim = v.size();
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::numeric, p.string() + ": zero or non-finite vector '" + label + "'");
    if (std::abs(n - 1.0) > 1e-6 && warnings) warnings->push_back("renormalized '" + label + "' (norm " + std::to_string(n) + ")");
    out[label] = v / n;
  }
  return out;
}

inline json embeddings_to_json(const LabelEmbeddings& e) {
  json j = json::object();
  for (const auto& [label, v] : e) j[label] = std::vector<double>(v.data(), v.data() + v.size());
  return j;
}

inline TextBank text_bank(const LabelEmbeddings& e, const std::vector<std::string>& labels) {
  TextBank b;
  b.labels = labels;
  if (labels.empty()) return b;
  b.embeddings.resize(static_cast<Eigen::Index>(labels.size()), label_embedding(e, labels.front()).size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    b.embeddings.row(static_cast<Eigen::Index>(i)) = label_embedding(e, labels[i]).transpose();
  return b;
}

// ---- Shapes ----------------------------------------------------------------

struct ShapeFile {
  std::string id;
  Matrix points;  // N x 3
  std::optional<Matrix> geo;
  std::optional<Matrix> app;
  std::optional<Segmentation> gt_parts;
};

namespace detail {

// An inline N x d array, or {"blob": file, "offset": bytes, "rows": N,
// "cols": d, "byte_order": "little"} read from a sibling fp64 file.
inline Matrix read_array(const json& j, const fs::path& dir, const std::string& ctx, Eigen::Index cols = -1) {
  if (j.is_array()) return matrix_from_json(j, ctx, cols);
  only_keys(j, {"blob", "offset", "rows", "cols", "byte_order"}, ctx);
  const auto name = field<std::string>(j, "blob", ctx);
  if (fs::path(name).has_parent_path()) fail(ErrorKind::schema, ctx + ": blob must be a sibling file name");
  if (field<std::string>(j, "byte_order", ctx) != "little") fail(ErrorKind::schema, ctx + ": unsupported byte order");
  const auto rows = field<std::int64_t>(j, "rows", ctx);
  const auto c = field<std::int64_t>(j, "cols", ctx);
  const auto offset = j.contains("offset") ? field<std::int64_t>(j, "offset", ctx) : 0;
  if (rows < 0 || c < 0 || offset < 0 || (cols >= 0 && c != cols)) fail(ErrorKind::schema, ctx + ": bad blob shape");
  const std::string bytes = read_text(dir / name);
  const std::size_t need = static_cast<std::size_t>(rows * c) * 8;
  if (static_cast<std::size_t>(offset) + need > bytes.size()) fail(ErrorKind::schema, ctx + ": blob too short");
  Reader r(bytes.substr(static_cast<std::size_t>(offset), need), ctx);
  Matrix m(rows, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
  return m;
}

}  // namespace detail

inline ShapeFile load_shape(const fs::path& p) {
  const json j = read_json(p);
  const std::string ctx = p.string();
  detail::only_keys(j, {"id", "points", "geo_features", "app_features", "gt_parts"}, ctx);
  ShapeFile s;
  s.id = detail::field<std::string>(j, "id", ctx);
  if (!j.contains("points")) fail(ErrorKind::schema, ctx + ": missing field 'points'");
  const fs::path dir = p.parent_path();
  s.points = detail::read_array(j["points"], dir, ctx + ".points", 3);
  if (!s.points.allFinite()) fail(ErrorKind::numeric, ctx + ": non-finite coordinates");
  if (j.contains("geo_features")) s.geo = detail::read_array(j["geo_features"], dir, ctx + ".geo_features");
  if (j.contains("app_features")) s.app = detail::read_array(j["app_features"], dir, ctx + ".app_features");
  for (const auto* m : {&s.geo, &s.app})
    if (*m && (*m)->rows() != s.points.rows()) fail(ErrorKind::schema, ctx + ": feature rows must equal point count");
  if (j.contains("gt_parts")) {
    Segmentation gt;
    std::vector<char> seen(static_cast<std::size_t>(s.points.rows()), 0);
    for (const auto& part : j["gt_parts"]) {
      detail::only_keys(part, {"label", "point_indices"}, ctx + ".gt_parts");
      LabeledSegment seg{detail::field<std::string>(part, "label", ctx),
                         make_point_set(detail::field<std::vector<std::int32_t>>(part, "point_indices", ctx))};
      for (std::int32_t i : seg.points) {
        if (i < 0 || i >= s.points.rows()) fail(ErrorKind::schema, ctx + ": point index out of range");
        if (seen[static_cast<std::size_t>(i)]++) fail(ErrorKind::schema, ctx + ": ground-truth parts overlap");
      }
      gt.push_back(std::move(seg));
    }
    s.gt_parts = std::move(gt);
  }
  return s;
}

inline json shape_to_json(const ShapeFile& s) {
  json j{{"id", s.id}, {"points", matrix_to_json(s.points)}};
  if (s.geo) j["geo_features"] = matrix_to_json(*s.geo);
  if (s.app) j["app_features"] = matrix_to_json(*s.app);
  if (s.gt_parts) {
    json parts = json::array();
    for (const auto& p : *s.gt_parts) parts.push_back({{"label", p.label}, {"point_indices", p.points}});
    j["gt_parts"] = parts;
  }
  return j;
}

inline std::string matrix_blob(const Matrix& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f64(out, m.data()[i]);
  return out;
}

// ---- Named tensors ---------------------------------------------------------

using TensorMap = std::map<std::string, Matrix>;

inline constexpr char kTensorMagic[] = "APTENSOR";
inline constexpr std::uint32_t kTensorVersion = 1;

// "APTENSOR" u32 version u32 count, then per tensor: name, u32 ndim (1 or 2),
// u64 dims, fp64 payload (row-major). All integers little-endian.
inline std::string encode_tensors(const TensorMap& tensors, const std::map<std::string, std::int64_t>& ndims = {}) {
  std::string out(kTensorMagic, 8);
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    detail::put_str(out, name);
    const auto it = ndims.find(name);
    const bool vec = it != ndims.end() && it->second == 1;
    detail::put_u32(out, vec ? 1u : 2u);
    if (vec) {
      detail::put_u64(out, static_cast<std::uint64_t>(m.size()));
    } else {
      detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
      detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
    }
    out += matrix_blob(m);
  }
  return out;
}

inline TensorMap decode_tensors(std::string bytes, const std::string& ctx) {
  detail::Reader r(std::move(bytes), ctx);
  if (r.raw(8) != std::string(kTensorMagic, 8)) fail(ErrorKind::schema, ctx + ": not a tensor file");
  if (r.u32() != kTensorVersion) fail(ErrorKind::schema, ctx + ": unsupported tensor file version");
  const std::uint32_t count = r.u32();
  TensorMap out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.str();
    const std::uint32_t nd = r.u32();
    if (nd != 1 && nd != 2) fail(ErrorKind::schema, ctx + ": tensor '" + name + "' has rank " + std::to_string(nd));
    const auto rows = static_cast<Eigen::Index>(r.u64());
    const auto cols = nd == 2 ? static_cast<Eigen::Index>(r.u64()) : 1;
    Matrix m(nd == 1 ? rows : rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
    if (!out.emplace(name, std::move(m)).second) fail(ErrorKind::schema, ctx + ": duplicate tensor '" + name + "'");
  }
  r.expect_done();
  return out;
}

namespace detail {

inline Matrix as_col(const Vector& v) { return Eigen::Map<const Matrix>(v.data(), v.size(), 1); }
inline Vector as_vec(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline void put_norm(TensorMap& t, const std::string& p, const LayerNormParams& n) {
  t[p + ".gain"] = as_col(n.gain);
  t[p + ".bias"] = as_col(n.bias);
}

inline void put_direction(TensorMap& t, const std::string& p, const DirectionWeights& d) {
  t[p + ".query"] = d.query;
  t[p + ".key"] = d.key;
  t[p + ".value"] = d.value;
  t[p + ".output"] = d.output;
  t[p + ".gate"] = d.gate;
  t[p + ".gate_bias"] = as_col(d.gate_bias);
  put_norm(t, p + ".norm", d.norm);
}

inline void put_attention(TensorMap& t, const std::string& p, const AttentionWeights& a) {
  t[p + ".query"] = a.query;
  t[p + ".key"] = a.key;
  t[p + ".value"] = a.value;
  t[p + ".output"] = a.output;
}

class TensorTaker {
 public:
  TensorTaker(const TensorMap& t, std::string ctx) : t_(t), ctx_(std::move(ctx)) {}
  Matrix mat(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto it = t_.find(name);
    if (it == t_.end()) fail(ErrorKind::schema, ctx_ + ": missing tensor '" + name + "'");
    if (it->second.rows() != rows || it->second.cols() != cols)
      fail(ErrorKind::schema, ctx_ + ": tensor '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                                  std::to_string(it->second.cols()) + ", expected " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
    ++used_;
    return it->second;
  }
  Vector vec(const std::string& name, Eigen::Index n) { return as_vec(mat(name, n, 1)); }
  LayerNormParams norm(const std::string& p, Eigen::Index n) { return {vec(p + ".gain", n), vec(p + ".bias", n)}; }
  void expect_all_used() const {
    if (used_ != t_.size()) fail(ErrorKind::schema, ctx_ + ": unexpected extra tensors");
  }

 private:
  const TensorMap& t_;
  std::string ctx_;
  std::size_t used_ = 0;
};

}  // namespace detail

inline TensorMap fusion_tensors(const FusionWeights& w) {
  TensorMap t;
  detail::put_direction(t, "fusion.geo_to_app", w.geo_to_app);
  detail::put_direction(t, "fusion.app_to_geo", w.app_to_geo);
  t["fusion.bias.w1"] = w.bias_w1;
  t["fusion.bias.b1"] = detail::as_col(w.bias_b1);
  t["fusion.bias.w2"] = w.bias_w2;
  t["fusion.bias.b2"] = detail::as_col(w.bias_b2);
  detail::put_norm(t, "fusion.concat_norm", w.concat_norm);
  t["fusion.proj.w1"] = w.proj_w1;
  t["fusion.proj.w2"] = w.proj_w2;
  return t;
}

inline TensorMap decoder_tensors(const DecoderWeights& w) {
  TensorMap t;
  t["decoder.initial"] = w.initial;
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const std::string p = "decoder.block" + std::to_string(l);
    const DecoderBlock& b = w.blocks[l];
    detail::put_norm(t, p + ".self_norm", b.self_norm);
    detail::put_attention(t, p + ".self_attn", b.self_attn);
    detail::put_norm(t, p + ".cross_norm", b.cross_norm);
    detail::put_attention(t, p + ".cross_attn", b.cross_attn);
    detail::put_norm(t, p + ".mlp_norm", b.mlp_norm);
    t[p + ".mlp.w1"] = b.mlp_w1;
    t[p + ".mlp.b1"] = detail::as_col(b.mlp_b1);
    t[p + ".mlp.w2"] = b.mlp_w2;
    t[p + ".mlp.b2"] = detail::as_col(b.mlp_b2);
  }
  t["decoder.mask_query"] = w.mask_query;
  t["decoder.mask_key"] = w.mask_key;
  t["decoder.part_w"] = detail::as_col(w.part_w);
  t["decoder.part_b"] = Matrix::Constant(1, 1, w.part_b);
  return t;
}

// Expected tensor names and shapes per module; "global" is optional.
inline json weights_manifest(const FusionConfig& f, const DecoderConfig& d) {
  json m = json::object();
  const std::pair<const char*, TensorMap> modules[] = {{"fusion", fusion_tensors(init_fusion_weights(f, 0))},
                                                       {"decoder", decoder_tensors(init_decoder_weights(d, 0))},
                                                       {"global", {{"global.projection", Matrix(d.embed_dim, d.fused_dim)}}}};
  for (const auto& [module, tensors] : modules) {
    json list = json::array();
    for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}});
    m[module] = list;
  }
  return m;
}

inline FusionWeights fusion_from_tensors(const FusionConfig& c, detail::TensorTaker& take) {
  c.validate();
  FusionWeights w;
  w.config = c;
  auto dir = [&](const std::string& p, Eigen::Index src, Eigen::Index tgt) {
    DirectionWeights d;
    d.query = take.mat(p + ".query", c.model_dim, src);
    d.key = take.mat(p + ".key", c.model_dim, tgt);
    d.value = take.mat(p + ".value", c.model_dim, tgt);
    d.output = take.mat(p + ".output", src, c.model_dim);
    d.gate = take.mat(p + ".gate", src, 2 * src);
    d.gate_bias = take.vec(p + ".gate_bias", src);
    d.norm = take.norm(p + ".norm", src);
    return d;
  };
  w.geo_to_app = dir("fusion.geo_to_app", c.geo_dim, c.app_dim);
  w.app_to_geo = dir("fusion.app_to_geo", c.app_dim, c.geo_dim);
  w.bias_w1 = take.mat("fusion.bias.w1", c.bias_hidden, fourier_dim(c.frequencies));
  w.bias_b1 = take.vec("fusion.bias.b1", c.bias_hidden);
  w.bias_w2 = take.mat("fusion.bias.w2", c.heads, c.bias_hidden);
  w.bias_b2 = take.vec("fusion.bias.b2", c.heads);
  w.concat_norm = take.norm("fusion.concat_norm", c.geo_dim + c.app_dim);
  w.proj_w1 = take.mat("fusion.proj.w1", c.fused_dim, c.geo_dim + c.app_dim);
  w.proj_w2 = take.mat("fusion.proj.w2", c.fused_dim, c.fused_dim);
  return w;
}

inline DecoderWeights decoder_from_tensors(const DecoderConfig& c, detail::TensorTaker& take) {
  c.validate();
  DecoderWeights w;
  w.config = c;
  w.initial = take.mat("decoder.initial", c.partlets, c.embed_dim);
  auto attn = [&](const std::string& p, Eigen::Index src) {
    return AttentionWeights{take.mat(p + ".query", c.embed_dim, c.embed_dim), take.mat(p + ".key", c.embed_dim, src),
                            take.mat(p + ".value", c.embed_dim, src), take.mat(p + ".output", c.embed_dim, c.embed_dim)};
  };
  for (Eigen::Index l = 0; l < c.layers; ++l) {
    const std::string p = "decoder.block" + std::to_string(l);
    DecoderBlock b;
    b.self_norm = take.norm(p + ".self_norm", c.embed_dim);
    b.self_attn = attn(p + ".self_attn", c.embed_dim);
    b.cross_norm = take.norm(p + ".cross_norm", c.embed_dim);
    b.cross_attn = attn(p + ".cross_attn", c.fused_dim);
    b.mlp_norm = take.norm(p + ".mlp_norm", c.embed_dim);
    b.mlp_w1 = take.mat(p + ".mlp.w1", c.mlp_hidden, c.embed_dim);
    b.mlp_b1 = take.vec(p + ".mlp.b1", c.mlp_hidden);
    b.mlp_w2 = take.mat(p + ".mlp.w2", c.embed_dim, c.mlp_hidden);
    b.mlp_b2 = take.vec(p + ".mlp.b2", c.embed_dim);
    w.blocks.push_back(std::move(b));
  }
  w.mask_query = take.mat("decoder.mask_query", c.embed_dim, c.embed_dim);
  w.mask_key = take.mat("decoder.mask_key", c.embed_dim, c.fused_dim);
  w.part_w = take.vec("decoder.part_w", c.embed_dim);
  w.part_b = take.mat("decoder.part_b", 1, 1)(0, 0);
  return w;
}

struct ModelWeights {
  FusionWeights fusion;
  DecoderWeights decoder;
  Matrix global_projection;  // embed x fused; empty when absent
};

inline ModelWeights init_model_weights(const FusionConfig& f, const DecoderConfig& d, std::uint64_t seed) {
  Rng rng(seed + 2);
  return {init_fusion_weights(f, seed), init_decoder_weights(d, seed + 1), init_weight(rng, d.embed_dim, d.fused_dim)};
}

inline void save_weights(const fs::path& p, const ModelWeights& w) {
  TensorMap t = fusion_tensors(w.fusion);
  for (auto& [k, v] : decoder_tensors(w.decoder)) t.emplace(k, std::move(v));
  if (w.global_projection.size() > 0) t["global.projection"] = w.global_projection;
  write_text(p, encode_tensors(t));
}

inline ModelWeights load_weights(const fs::path& p, const FusionConfig& f, const DecoderConfig& d) {
  const TensorMap t = decode_tensors(read_text(p), p.string());
  detail::TensorTaker take(t, p.string());
  ModelWeights w{fusion_from_tensors(f, take), decoder_from_tensors(d, take), Matrix()};
  if (t.count("global.projection")) w.global_projection = take.mat("global.projection", d.embed_dim, d.fused_dim);
  take.expect_all_used();
  return w;
}

// ---- Class statistics ------------------------------------------------------

inline constexpr char kStatsMagic[] = "APSTATS1";

// "APSTATS1" u64 dim, f64 epsilon, u32 label count, then per label (sorted):
// name, dim fp64 mean; then dim*dim fp64 covariance inverse (row-major).
inline std::string encode_class_stats(const ClassStats& s) {
  std::string out(kStatsMagic, 8);
  detail::put_u64(out, static_cast<std::uint64_t>(s.dim()));
  detail::put_f64(out, s.epsilon);
  detail::put_u32(out, static_cast<std::uint32_t>(s.means.size()));
  for (const auto& [label, mean] : s.means) {
    detail::put_str(out, label);
    for (Eigen::Index i = 0; i < mean.size(); ++i) detail::put_f64(out, mean(i));
  }
  out += matrix_blob(s.cov_inv);
  return out;
}

inline ClassStats decode_class_stats(std::string bytes, const std::string& ctx) {
  detail::Reader r(std::move(bytes), ctx);
  if (r.raw(8) != std::string(kStatsMagic, 8)) fail(ErrorKind::schema, ctx + ": not a class statistics file");
  ClassStats s;
  const auto dim = static_cast<Eigen::Index>(r.u64());
  s.epsilon = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string label = r.str();
    Vector m(dim);
    for (Eigen::Index k = 0; k < dim; ++k) m(k) = r.f64();
    s.means[label] = m;
  }
  s.cov_inv.resize(dim, dim);
  for (Eigen::Index i = 0; i < s.cov_inv.size(); ++i) s.cov_inv.data()[i] = r.f64();
  r.expect_done();
  return s;
}

// ---- Predictions -----------------------------------------------------------

struct PredictedPart {
  std::string name;
  double conf_soft = 0.0;
  double conf_maha = 0.0;
  double conf_fused = 0.0;
  PointSet mask_point_indices;
};

struct PredictionFile {
  std::string shape_id;
  std::string category;
  std::vector<PredictedPart> partlets;
  std::int64_t unlabeled_count = 0;

  Segmentation segmentation() const {
    Segmentation s;
    for (const auto& p : partlets) s.push_back({p.name, p.mask_point_indices});
    return s;
  }
};

inline json prediction_to_json(const PredictionFile& p) {
  json parts = json::array();
  for (const auto& q : p.partlets)
    parts.push_back({{"name", q.name},
                     {"conf_soft", q.conf_soft},
                     {"conf_maha", q.conf_maha},
                     {"conf_fused", q.conf_fused},
                     {"mask_point_indices", q.mask_point_indices}});
  return {{"shape_id", p.shape_id}, {"category", p.category}, {"partlets", parts}, {"unlabeled_count", p.unlabeled_count}};
}

inline PredictionFile prediction_from_json(const json& j, const std::string& ctx) {
  detail::only_keys(j, {"shape_id", "category", "partlets", "unlabeled_count"}, ctx);
  PredictionFile p;
  p.shape_id = detail::field<std::string>(j, "shape_id", ctx);
  p.category = detail::field<std::string>(j, "category", ctx);
  p.unlabeled_count = detail::field<std::int64_t>(j, "unlabeled_count", ctx);
  if (p.shape_id.empty()) fail(ErrorKind::schema, ctx + ": empty shape_id");
  const json parts = detail::field<json>(j, "partlets", ctx);
  if (!parts.is_array()) fail(ErrorKind::schema, ctx + ": partlets must be an array");
  for (const auto& q : parts) {
    const std::string c = ctx + ".partlets";
    detail::only_keys(q, {"name", "conf_soft", "conf_maha", "conf_fused", "mask_point_indices"}, c);
    PredictedPart r;
    r.name = detail::field<std::string>(q, "name", c);
    r.conf_soft = detail::field<double>(q, "conf_soft", c);
    r.conf_maha = detail::field<double>(q, "conf_maha", c);
    r.conf_fused = detail::field<double>(q, "conf_fused", c);
    for (double v : {r.conf_soft, r.conf_maha, r.conf_fused})
      if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::schema, c + ": confidence outside [0, 1]");
    r.mask_point_indices = make_point_set(detail::field<std::vector<std::int32_t>>(q, "mask_point_indices", c));
    p.partlets.push_back(std::move(r));
  }
  return p;
}

inline PredictionFile prediction_from_result(const std::string& shape_id, const InferenceResult& r) {
  PredictionFile p;
  p.shape_id = shape_id;
  p.category = r.category;
  std::map<std::string, PointSet> pts;
  for (std::size_t i = 0; i < r.point_labels.size(); ++i) {
    if (r.point_labels[i])
      pts[*r.point_labels[i]].push_back(static_cast<std::int32_t>(i));
    else
      ++p.unlabeled_count;
  }
  for (const auto& q : r.partlets) {
    if (!q.label) continue;
    p.partlets.push_back({*q.label, q.conf_soft, q.conf_maha, q.conf_fused, pts[*q.label]});
  }
  return p;
}

// ---- Vocabulary and decisions ----------------------------------------------

inline Vocabulary vocabulary_from_json(const json& j, const std::string& ctx) {
  detail::only_keys(j, {"entries"}, ctx);
  Vocabulary v;
  for (const auto& e : detail::field<json>(j, "entries", ctx)) {
    detail::only_keys(e, {"class", "label", "source", "count"}, ctx + ".entries");
    v.entries.push_back({detail::field<std::string>(e, "class", ctx), detail::field<std::string>(e, "label", ctx),
                         detail::field<std::string>(e, "source", ctx), detail::field<std::int64_t>(e, "count", ctx)});
  }
  v.validate();
  return v;
}

inline json vocabulary_to_json(const Vocabulary& v) {
  json entries = json::array();
  for (const auto& e : v.entries)
    entries.push_back({{"class", e.object_class}, {"label", e.label}, {"source", e.source}, {"count", e.count}});
  return {{"entries", entries}};
}

inline json adjudication_to_json(const Adjudication& a) {
  return {{"scope", scope_name(a.pair.scope)},
          {"class", a.pair.object_class},
          {"a", a.pair.a},
          {"b", a.pair.b},
          {"sim", a.pair.sim},
          {"verdict", a.verdict == Verdict::accept ? "ACCEPT" : "REJECT"},
          {"rationale", a.rationale},
          {"source", a.source == DecisionSource::human ? "human" : "recorded-llm"}};
}

inline Adjudication adjudication_from_json(const json& j, const std::string& ctx) {
  detail::only_keys(j, {"scope", "class", "a", "b", "sim", "verdict", "rationale", "source"}, ctx);
  Adjudication a;
  const auto scope = detail::field<std::string>(j, "scope", ctx);
  if (scope != "class" && scope != "part") fail(ErrorKind::schema, ctx + ": scope must be 'class' or 'part'");
  a.pair.scope = scope == "class" ? Scope::class_level : Scope::part_level;
  a.pair.object_class = detail::field<std::string>(j, "class", ctx);
  a.pair.a = detail::field<std::string>(j, "a", ctx);
  a.pair.b = detail::field<std::string>(j, "b", ctx);
  a.pair.sim = detail::field<double>(j, "sim", ctx);
  if (a.pair.a == a.pair.b) fail(ErrorKind::schema, ctx + ": pair members must differ");
  if (!(a.pair.sim >= -1.0 && a.pair.sim <= 1.0)) fail(ErrorKind::schema, ctx + ": sim outside [-1, 1]");
  if (a.pair.scope == Scope::part_level && a.pair.object_class.empty())
    fail(ErrorKind::schema, ctx + ": part-level pairs need a class");
  const auto verdict = detail::field<std::string>(j, "verdict", ctx);
  if (verdict != "ACCEPT" && verdict != "REJECT") fail(ErrorKind::schema, ctx + ": verdict must be ACCEPT or REJECT");
  a.verdict = verdict == "ACCEPT" ? Verdict::accept : Verdict::reject;
  a.rationale = j.value("rationale", "");
  const auto source = j.value("source", "recorded-llm");
  if (source != "recorded-llm" && source != "human") fail(ErrorKind::schema, ctx + ": unknown decision source");
  a.source = source == "human" ? DecisionSource::human : DecisionSource::recorded_llm;
  return a;
}

inline std::vector<Adjudication> load_adjudications(const fs::path& p) {
  std::vector<Adjudication> out;
  const auto records = read_records(p);
  for (std::size_t i = 0; i < records.size(); ++i)
    out.push_back(adjudication_from_json(records[i], p.string() + " record " + std::to_string(i)));
  return out;
}

inline std::vector<json> mapping_log_records(const CanonicalMap& m) {
  std::vector<json> out;
  for (const auto& r : m.log())
    out.push_back({{"scope", scope_name(r.scope)}, {"class", r.object_class}, {"alias", r.alias}, {"canonical", r.canonical}});
  return out;
}

}  // namespace alignparts
