#pragma once

// Run configuration: one JSON file with dims, thresholds, loss weights,
// seeds and paths. Unknown keys are errors; every field records whether its
// default is a published value or a local decision.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "alignparts/io.hpp"
#include "alignparts/losses.hpp"

namespace alignparts {

struct RunConfig {
  FusionConfig fusion;
  DecoderConfig decoder;
  SinkhornConfig sinkhorn;
  InferenceThresholds inference;
  LossWeights loss;
  double maha_epsilon = kMahaEpsilon;
  double pair_threshold = kPairThreshold;
  std::int64_t lease_seconds = 600;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> paths;

  void validate() const {
    fusion.validate();
    decoder.validate();
    loss.validate();
    require(decoder.fused_dim == fusion.fused_dim, "RunConfig: decoder and fusion disagree on the fused width");
    require(sinkhorn.epsilon > 0 && sinkhorn.max_iters > 0 && sinkhorn.tol > 0, "RunConfig: invalid sinkhorn settings");
    require(inference.temperature > 0, "RunConfig: temperature must be positive");
    require(inference.fused_alpha >= 0 && inference.fused_alpha <= 1, "RunConfig: fused_alpha must be in [0, 1]");
    require(pair_threshold >= 0 && pair_threshold <= 1, "RunConfig: pair_threshold must be in [0, 1]");
    require(maha_epsilon > 0 && lease_seconds > 0, "RunConfig: maha_epsilon and lease_seconds must be positive");
  }
};

enum class Provenance { published, decision };

struct ConfigField {
  std::string section;
  std::string key;
  Provenance provenance;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

namespace detail {

template <class T, class Member>
ConfigField config_field(std::string section, std::string key, Provenance p, Member member) {
  return {std::move(section), std::move(key), p,
          [member](const RunConfig& c) {
            RunConfig copy = c;
            return json(static_cast<T>(member(copy)));
          },
          [member](RunConfig& c, const json& v) { member(c) = v.get<T>(); }};
}

#define ALIGNPARTS_FIELD(T, section, key, prov, expr) \
  config_field<T>(section, key, Provenance::prov, [](RunConfig& c) -> auto& { return expr; })

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
  using detail::config_field;
  static const std::vector<ConfigField> fields = {
      ALIGNPARTS_FIELD(std::int64_t, "dims", "geo", published, c.fusion.geo_dim),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "app", published, c.fusion.app_dim),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "attention", published, c.fusion.model_dim),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "fused", published, c.fusion.fused_dim),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "fusion_heads", published, c.fusion.heads),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "bias_hidden", decision, c.fusion.bias_hidden),
      ALIGNPARTS_FIELD(int, "dims", "frequencies", published, c.fusion.frequencies),
      ALIGNPARTS_FIELD(int, "dims", "neighbors", published, c.fusion.neighbors),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "text", published, c.decoder.embed_dim),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "partlets", published, c.decoder.partlets),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "decoder_heads", published, c.decoder.heads),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "decoder_layers", published, c.decoder.layers),
      ALIGNPARTS_FIELD(std::int64_t, "dims", "mlp_hidden", decision, c.decoder.mlp_hidden),
      ALIGNPARTS_FIELD(double, "thresholds", "temperature", published, c.inference.temperature),
      ALIGNPARTS_FIELD(double, "thresholds", "sinkhorn_epsilon", published, c.sinkhorn.epsilon),
      ALIGNPARTS_FIELD(int, "thresholds", "sinkhorn_iters", decision, c.sinkhorn.max_iters),
      ALIGNPARTS_FIELD(double, "thresholds", "sinkhorn_tol", decision, c.sinkhorn.tol),
      ALIGNPARTS_FIELD(double, "thresholds", "null_cost", decision, c.inference.null_cost),
      ALIGNPARTS_FIELD(double, "thresholds", "low_confidence", published, c.inference.low_confidence),
      ALIGNPARTS_FIELD(double, "thresholds", "auto_accept", published, c.inference.auto_accept),
      ALIGNPARTS_FIELD(double, "thresholds", "fused_alpha", decision, c.inference.fused_alpha),
      ALIGNPARTS_FIELD(double, "thresholds", "fused_beta", decision, c.inference.fused_beta),
      ALIGNPARTS_FIELD(double, "thresholds", "maha_epsilon", decision, c.maha_epsilon),
      ALIGNPARTS_FIELD(double, "thresholds", "pair_similarity", decision, c.pair_threshold),
      ALIGNPARTS_FIELD(std::int64_t, "thresholds", "lease_seconds", decision, c.lease_seconds),
      ALIGNPARTS_FIELD(double, "loss_weights", "mask", published, c.loss.mask),
      ALIGNPARTS_FIELD(double, "loss_weights", "part", published, c.loss.part),
      ALIGNPARTS_FIELD(double, "loss_weights", "text", published, c.loss.text),
      ALIGNPARTS_FIELD(double, "loss_weights", "cov", published, c.loss.cov),
      ALIGNPARTS_FIELD(double, "loss_weights", "overlap", published, c.loss.overlap),
      ALIGNPARTS_FIELD(double, "loss_weights", "global", published, c.loss.global),
      ALIGNPARTS_FIELD(std::uint64_t, "seeds", "init", decision, c.seed),
  };
  return fields;
}

#undef ALIGNPARTS_FIELD

inline void sync_shared_dims(RunConfig& c) {
  c.decoder.fused_dim = c.fusion.fused_dim;
  c.sinkhorn.null_cost = c.inference.null_cost;
}

inline json config_to_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& f : config_fields()) j[f.section][f.key] = f.get(c);
  j["paths"] = c.paths;
  return j;
}

// Each field's default and whether it is a published or a local value.
inline json config_schema() {
  const RunConfig defaults;
  json j = json::object();
  for (const auto& f : config_fields())
    j[f.section][f.key] = {{"default", f.get(defaults)},
                           {"provenance", f.provenance == Provenance::published ? "published" : "decision"}};
  j["paths"] = {{"default", json::object()}, {"provenance", "decision"}};
  return j;
}

inline RunConfig config_from_json(const json& j, const std::string& ctx = "config") {
  if (!j.is_object()) fail(ErrorKind::schema, ctx + ": expected an object");
  RunConfig c;
  std::set<std::string> sections{"paths"};
  for (const auto& f : config_fields()) sections.insert(f.section);
  for (const auto& [section, body] : j.items()) {
    if (!sections.count(section)) fail(ErrorKind::schema, ctx + ": unknown section '" + section + "'");
    if (!body.is_object()) fail(ErrorKind::schema, ctx + ": section '" + section + "' must be an object");
    if (section == "paths") {
      for (const auto& [k, v] : body.items()) {
        if (!v.is_string()) fail(ErrorKind::schema, ctx + ": paths." + k + " must be a string");
        c.paths[k] = v.get<std::string>();
      }
      continue;
    }
    for (const auto& [key, value] : body.items()) {
      const ConfigField* field = nullptr;
      for (const auto& f : config_fields())
        if (f.section == section && f.key == key) field = &f;
      if (!field) fail(ErrorKind::schema, ctx + ": unknown key '" + section + "." + key + "'");
      if (!value.is_number()) fail(ErrorKind::schema, ctx + ": " + section + "." + key + " must be a number");
      if (field->get(c).is_number_integer() && !value.is_number_integer())
        fail(ErrorKind::schema, ctx + ": " + section + "." + key + " must be an integer");
      field->set(c, value);
    }
  }
  sync_shared_dims(c);
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::schema, ctx + ": " + e.what());
  }
  return c;
}

inline RunConfig load_config(const fs::path& p) { return config_from_json(read_json(p), p.string()); }

}  // namespace alignparts
