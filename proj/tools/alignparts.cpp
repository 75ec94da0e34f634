// alignparts: command-line entry point.
//
// Exit codes: 0 ok, 1 selfcheck failure, 2 usage or schema error,
// 3 data conflict, 4 environment (I/O, ports).

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <thread>

#include <pthread.h>

#include "alignparts/config.hpp"
#include "alignparts/selfcheck.hpp"
#include "alignparts/server.hpp"

#include <CLI11.hpp>

namespace ap = alignparts;
namespace fs = std::filesystem;
using ap::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConflict = 3;
constexpr int kExitEnvironment = 4;

int exit_code(ap::ErrorKind k) {
  switch (k) {
    case ap::ErrorKind::conflict:
    case ap::ErrorKind::stale: return kExitConflict;
    case ap::ErrorKind::environment: return kExitEnvironment;
    default: return kExitUsage;
  }
}

struct Common {
  std::string config_path;

  ap::RunConfig config() const {
    std::string path = config_path;
    if (path.empty())
      if (const char* env = std::getenv("ALIGNPARTS_CONFIG")) path = env;
    return path.empty() ? ap::RunConfig{} : ap::load_config(path);
  }
};

void write_json(const std::string& out, const json& j) {
  if (out.empty() || out == "-")
    std::cout << j.dump(1) << "\n";
  else
    ap::write_text(out, j.dump(1) + "\n");
}

ap::Vocabulary load_vocabularies(const std::vector<std::string>& files) {
  ap::Vocabulary all;
  for (const auto& f : files) {
    const ap::Vocabulary v = ap::vocabulary_from_json(ap::read_json(f), f);
    all.entries.insert(all.entries.end(), v.entries.begin(), v.entries.end());
  }
  all.validate();
  return all;
}

ap::CanonicalMap load_canonical_map(const std::vector<std::string>& vocab, const std::string& decisions) {
  if (vocab.empty()) return {};
  const std::vector<ap::Adjudication> d = decisions.empty() ? std::vector<ap::Adjudication>{} : ap::load_adjudications(decisions);
  return ap::apply_adjudications(load_vocabularies(vocab), d);
}

// ---- fuse ------------------------------------------------------------------

struct FuseArgs {
  std::string shape, weights, out;
};

struct FusedShape {
  std::string id;
  ap::Matrix coords;
  ap::Matrix fused;
};

FusedShape fuse_shape(const ap::RunConfig& cfg, const std::string& shape_path, const ap::ModelWeights& w) {
  const ap::ShapeFile s = ap::load_shape(shape_path);
  if (!s.geo || !s.app) ap::fail(ap::ErrorKind::schema, shape_path + ": fusion needs geo_features and app_features");
  if (s.geo->cols() != cfg.fusion.geo_dim || s.app->cols() != cfg.fusion.app_dim)
    ap::fail(ap::ErrorKind::schema, shape_path + ": feature widths do not match the configured dims");
  const ap::PointCloud pc = ap::normalize_unit_cube({s.points});
  return {s.id, pc.coords, ap::bico_forward(pc, {*s.geo, *s.app}, w.fusion)};
}

int cmd_fuse(const Common& common, const FuseArgs& a) {
  const ap::RunConfig cfg = common.config();
  const ap::ModelWeights w = ap::load_weights(a.weights, cfg.fusion, cfg.decoder);
  const FusedShape f = fuse_shape(cfg, a.shape, w);
  const std::string bytes = ap::encode_tensors({{"coords", f.coords}, {"fused", f.fused}});
  ap::write_text(a.out, bytes);
  std::cout << f.id << " " << f.fused.rows() << "x" << f.fused.cols() << " crc32 " << ap::hex32(ap::crc32_of(bytes)) << "\n";
  return kExitOk;
}

// ---- infer -----------------------------------------------------------------

struct InferArgs {
  std::string shape, fused, weights, mode = "closed", embeddings, stats, query, out, shape_id;
  std::vector<std::string> vocab;
  std::string decisions;
  int parts = 0;
  std::uint64_t seed = 0;
};

ap::Matrix fused_input(const ap::RunConfig& cfg, const InferArgs& a, const ap::ModelWeights& w, std::string& id) {
  if (!a.shape.empty()) {
    FusedShape f = fuse_shape(cfg, a.shape, w);
    id = f.id;
    return f.fused;
  }
  const ap::TensorMap t = ap::decode_tensors(ap::read_text(a.fused), a.fused);
  const auto it = t.find("fused");
  if (it == t.end()) ap::fail(ap::ErrorKind::schema, a.fused + ": no 'fused' tensor");
  if (it->second.cols() != cfg.decoder.fused_dim) ap::fail(ap::ErrorKind::schema, a.fused + ": fused width mismatch");
  id = fs::path(a.fused).stem().string();
  return it->second;
}

ap::TextBank bank_of(const ap::LabelEmbeddings& e) {
  std::vector<std::string> labels;
  for (const auto& [l, v] : e) labels.push_back(l);
  return ap::text_bank(e, labels);
}

int cmd_infer(const Common& common, const InferArgs& a) {
  const ap::RunConfig cfg = common.config();
  if (a.shape.empty() == a.fused.empty()) ap::fail(ap::ErrorKind::schema, "infer: give exactly one of --shape or --fused");
  const ap::ModelWeights w = ap::load_weights(a.weights, cfg.fusion, cfg.decoder);
  std::string id;
  const ap::Matrix fused = fused_input(cfg, a, w, id);
  if (!a.shape_id.empty()) id = a.shape_id;
  const ap::PartletSet partlets = ap::decode(fused, w.decoder);
  std::vector<std::string> warnings;
  const ap::LabelEmbeddings emb =
      a.embeddings.empty() ? ap::LabelEmbeddings{} : ap::load_embeddings(a.embeddings, &warnings);
  for (const auto& m : warnings) std::cerr << "warning: " << m << "\n";
  if (a.mode != "kmeans" && emb.empty()) ap::fail(ap::ErrorKind::schema, "infer: --embeddings is required for mode " + a.mode);

  if (a.mode == "closed") {
    if (w.global_projection.size() == 0) ap::fail(ap::ErrorKind::schema, a.weights + ": closed mode needs global.projection");
    if (a.vocab.empty()) ap::fail(ap::ErrorKind::schema, "infer: closed mode needs --vocab");
    const ap::CanonicalMap canon = load_canonical_map(a.vocab, a.decisions);
    std::map<std::string, std::vector<std::string>> parts;
    for (const auto& [key, n] : canon.merged_counts()) parts[key.first].push_back(key.second);
    std::vector<std::string> class_names;
    std::map<std::string, ap::TextBank> part_vocab;
    std::vector<std::pair<std::string, ap::Vector>> samples;
    for (const auto& [cls, labels] : parts) {
      class_names.push_back(cls);
      part_vocab[cls] = ap::text_bank(emb, labels);
      for (const auto& l : labels) samples.emplace_back(l, ap::label_embedding(emb, l));
    }
    ap::ClassStats stats;
    if (!a.stats.empty()) {
      stats = ap::decode_class_stats(ap::read_text(a.stats), a.stats);
    } else {
      std::cerr << "warning: no --stats given; using text-embedding statistics\n";
      const auto copy = samples;
      samples.insert(samples.end(), copy.begin(), copy.end());
      stats = ap::estimate_class_stats(samples, cfg.maha_epsilon);
    }
    const ap::Vector z = ap::z_global_from_fused(fused, w.global_projection);
    const ap::InferenceResult r =
        ap::mode1_closed(partlets, z, ap::text_bank(emb, class_names), part_vocab, stats, cfg.inference);
    write_json(a.out, ap::prediction_to_json(ap::prediction_from_result(id, r)));
  } else if (a.mode == "open") {
    write_json(a.out, ap::prediction_to_json(ap::prediction_from_result(id, ap::mode2_open(partlets, bank_of(emb)))));
  } else if (a.mode == "retrieve") {
    if (a.query.empty()) ap::fail(ap::ErrorKind::schema, "infer: retrieve mode needs --query");
    const ap::Retrieval r = ap::mode3_retrieve(partlets, ap::label_embedding(emb, a.query));
    write_json(a.out, {{"shape_id", id},
                       {"query", a.query},
                       {"partlet", r.partlet},
                       {"similarity", r.similarity},
                       {"mask_point_indices", r.points}});
  } else if (a.mode == "saliency") {
    if (a.parts < 1) ap::fail(ap::ErrorKind::schema, "infer: saliency mode needs --parts >= 1");
    write_json(a.out, ap::prediction_to_json(
                          ap::prediction_from_result(id, ap::mode_part_number(partlets, a.parts, bank_of(emb)))));
  } else if (a.mode == "kmeans") {
    if (a.parts < 1) ap::fail(ap::ErrorKind::schema, "infer: kmeans mode needs --parts >= 1");
    const ap::KMeansResult k = ap::kmeans_cluster(fused, a.parts, a.seed);
    ap::PredictionFile p{id, "", {}, 0};
    for (Eigen::Index c = 0; c < a.parts; ++c) {
      ap::PointSet pts;
      for (std::size_t i = 0; i < k.assignment.size(); ++i)
        if (k.assignment[i] == c) pts.push_back(static_cast<std::int32_t>(i));
      if (!pts.empty()) p.partlets.push_back({"segment_" + std::to_string(c), 0.0, 0.0, 0.0, pts});
    }
    write_json(a.out, ap::prediction_to_json(p));
  } else {
    ap::fail(ap::ErrorKind::schema, "infer: unknown mode '" + a.mode + "'");
  }
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> preds, gts, vocab;
  std::string embeddings, decisions, out;
};

int cmd_eval(const Common&, const EvalArgs& a) {
  const ap::LabelEmbeddings emb = ap::load_embeddings(a.embeddings);
  const ap::CanonicalMap canon = load_canonical_map(a.vocab, a.decisions);
  std::map<std::string, ap::Segmentation> gt;
  for (const auto& g : a.gts) {
    const ap::ShapeFile s = ap::load_shape(g);
    if (!s.gt_parts) ap::fail(ap::ErrorKind::schema, g + ": no gt_parts");
    if (!gt.emplace(s.id, ap::canonicalize(*s.gt_parts, canon)).second) ap::fail(ap::ErrorKind::conflict, "duplicate shape " + s.id);
  }
  std::ostringstream table;
  table << "shape_id\tmIoU\trLA_mIoU\tLA_mIoU\tordered\n";
  table << std::fixed << std::setprecision(6);
  double sum[3] = {0, 0, 0};
  bool all_ordered = true;
  std::set<std::string> seen;
  std::vector<std::pair<std::string, std::array<double, 3>>> rows;
  for (const auto& path : a.preds) {
    const ap::PredictionFile p = ap::prediction_from_json(ap::read_json(path), path);
    const auto it = gt.find(p.shape_id);
    if (it == gt.end()) ap::fail(ap::ErrorKind::not_found, path + ": no ground truth for " + p.shape_id);
    if (!seen.insert(p.shape_id).second) ap::fail(ap::ErrorKind::conflict, "duplicate prediction for " + p.shape_id);
    const ap::Segmentation pred = ap::canonicalize(p.segmentation(), canon);
    rows.push_back({p.shape_id,
                    {ap::class_agnostic_miou(it->second, pred), ap::rla_miou(it->second, pred, emb), ap::la_miou(it->second, pred)}});
  }
  std::sort(rows.begin(), rows.end());
  for (const auto& [id, m] : rows) {
    const bool ordered = m[0] >= m[1] - 1e-12 && m[1] >= m[2] - 1e-12;
    all_ordered = all_ordered && ordered;
    table << id << "\t" << m[0] << "\t" << m[1] << "\t" << m[2] << "\t" << (ordered ? "yes" : "NO") << "\n";
    for (int i = 0; i < 3; ++i) sum[i] += m[i];
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  table << "mean\t" << sum[0] / n << "\t" << sum[1] / n << "\t" << sum[2] / n << "\t" << (all_ordered ? "yes" : "NO") << "\n";
  if (a.out.empty())
    std::cout << table.str();
  else
    ap::write_text(a.out, table.str());
  return all_ordered ? kExitOk : kExitConflict;
}

// ---- ontology --------------------------------------------------------------

struct OntologyArgs {
  std::vector<std::string> vocab;
  std::string decisions, out_map, out_log, embeddings, propose_out;
  double theta = -1.0;
};

json canonical_map_json(const ap::CanonicalMap& m) {
  json classes = json::object(), parts = json::object(), counts = json::array();
  for (const auto& r : m.log()) {
    if (r.scope == ap::Scope::class_level)
      classes[r.alias] = r.canonical;
    else
      parts[r.object_class][r.alias] = r.canonical;
  }
  for (const auto& [key, n] : m.merged_counts()) counts.push_back({{"class", key.first}, {"label", key.second}, {"count", n}});
  return {{"classes", classes}, {"parts", parts}, {"counts", counts}, {"total_count", m.total_count()}};
}

int cmd_ontology(const Common& common, const OntologyArgs& a) {
  const ap::RunConfig cfg = common.config();
  const ap::Vocabulary vocab = load_vocabularies(a.vocab);
  const auto decisions = a.decisions.empty() ? std::vector<ap::Adjudication>{} : ap::load_adjudications(a.decisions);
  const ap::CanonicalMap map = ap::apply_adjudications(vocab, decisions);
  if (!a.embeddings.empty()) {
    const double theta = a.theta >= 0 ? a.theta : cfg.pair_threshold;
    std::vector<json> records;
    for (const auto& p : ap::propose_pairs(vocab, ap::load_embeddings(a.embeddings), theta))
      records.push_back({{"scope", ap::scope_name(p.scope)}, {"class", p.object_class}, {"a", p.a}, {"b", p.b}, {"sim", p.sim}});
    if (!a.propose_out.empty()) ap::write_records(a.propose_out, records);
    std::cerr << records.size() << " candidate pairs at theta " << theta << "\n";
  }
  write_json(a.out_map, canonical_map_json(map));
  if (!a.out_log.empty()) ap::write_records(a.out_log, ap::mapping_log_records(map));
  std::cerr << map.log().size() << " aliases, total count " << map.total_count() << " (input " << vocab.total_count() << ")\n";
  return kExitOk;
}

// ---- serve -----------------------------------------------------------------

struct ServeArgs {
  std::string log, snapshot, host = "127.0.0.1", decisions;
  std::vector<std::string> vocab;
  int port = 8080;
};

int cmd_serve(const Common& common, const ServeArgs& a) {
  const ap::RunConfig cfg = common.config();
  ap::ServiceOptions opts;
  opts.lease_ms = cfg.lease_seconds * 1000;
  opts.auto_accept = cfg.inference.auto_accept;
  opts.low_confidence = cfg.inference.low_confidence;

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGTERM);
  sigaddset(&signals, SIGINT);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  ap::AnnotationService svc(ap::ReviewVocabulary(load_canonical_map(a.vocab, a.decisions)), opts);
  svc.open_log(a.log, a.snapshot.empty() ? std::nullopt : std::optional<fs::path>(a.snapshot));
  httplib::Server server;
  ap::register_routes(server, svc);
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  if (!server.bind_to_port(a.host, a.port)) {
    std::cerr << "error: cannot bind " << a.host << ":" << a.port << "\n";
    return kExitEnvironment;
  }
  std::atomic<bool> stopping = false;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    stopping = true;
    server.stop();
  });
  std::cerr << "serving on " << a.host << ":" << a.port << " (" << svc.record_count() << " records replayed)\n";
  server.listen_after_bind();
  if (!stopping) kill(getpid(), SIGTERM);
  waiter.join();
  svc.flush();
  if (!a.snapshot.empty()) svc.save_snapshot(a.snapshot);
  std::cerr << "stopped; " << svc.record_count() << " records in log\n";
  return kExitOk;
}

// ---- selfcheck -------------------------------------------------------------

int cmd_selfcheck(const std::vector<std::string>& faults) {
  bool ok = true;
  for (const auto& r : ap::run_self_checks({faults.begin(), faults.end()})) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part segmentation and naming pipeline, evaluation and review service"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_path, "Run configuration JSON (or ALIGNPARTS_CONFIG)")->check(CLI::ExistingFile);

  FuseArgs fuse;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse geometric and appearance features of a shape");
  fuse_cmd->add_option("--shape", fuse.shape, "Shape file")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--weights", fuse.weights, "Weights file")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--out", fuse.out, "Output tensor file")->required();

  InferArgs infer;
  auto* infer_cmd = app.add_subcommand("infer", "Decode partlets and name them");
  infer_cmd->add_option("--shape", infer.shape, "Shape file (fused on the fly)")->check(CLI::ExistingFile);
  infer_cmd->add_option("--fused", infer.fused, "Output of `fuse`")->check(CLI::ExistingFile);
  infer_cmd->add_option("--weights", infer.weights, "Weights file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--mode", infer.mode, "Inference mode")
      ->check(CLI::IsMember({"closed", "open", "retrieve", "saliency", "kmeans"}));
  infer_cmd->add_option("--embeddings", infer.embeddings, "Label embeddings")->check(CLI::ExistingFile);
  infer_cmd->add_option("--vocab", infer.vocab, "Vocabulary files (closed mode)")->check(CLI::ExistingFile);
  infer_cmd->add_option("--decisions", infer.decisions, "Adjudication records")->check(CLI::ExistingFile);
  infer_cmd->add_option("--stats", infer.stats, "Class statistics file")->check(CLI::ExistingFile);
  infer_cmd->add_option("--query", infer.query, "Query label (retrieve mode)");
  infer_cmd->add_option("--parts", infer.parts, "Part count (saliency, kmeans)");
  infer_cmd->add_option("--seed", infer.seed, "Seed (kmeans)");
  infer_cmd->add_option("--shape-id", infer.shape_id, "Override the shape id");
  infer_cmd->add_option("--out", infer.out, "Output file (default stdout)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  eval_cmd->add_option("--pred", eval.preds, "Prediction files")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--gt", eval.gts, "Shape files with gt_parts")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--embeddings", eval.embeddings, "Label embeddings")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--vocab", eval.vocab, "Vocabulary files for alias resolution")->check(CLI::ExistingFile);
  eval_cmd->add_option("--decisions", eval.decisions, "Adjudication records")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval.out, "Output table (default stdout)");

  OntologyArgs onto;
  auto* onto_cmd = app.add_subcommand("ontology", "Compress vocabularies with recorded decisions");
  onto_cmd->add_option("--vocab", onto.vocab, "Vocabulary files")->required()->check(CLI::ExistingFile);
  onto_cmd->add_option("--decisions", onto.decisions, "Adjudication records")->check(CLI::ExistingFile);
  onto_cmd->add_option("--embeddings", onto.embeddings, "Label embeddings for candidate pairs")->check(CLI::ExistingFile);
  onto_cmd->add_option("--theta", onto.theta, "Candidate similarity threshold");
  onto_cmd->add_option("--propose-out", onto.propose_out, "Candidate pair records");
  onto_cmd->add_option("--out-map", onto.out_map, "Canonical map JSON (default stdout)");
  onto_cmd->add_option("--out-log", onto.out_log, "Mapping log records");

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the review service");
  serve_cmd->add_option("--log", serve.log, "Append-only log file")->required();
  serve_cmd->add_option("--snapshot", serve.snapshot, "Snapshot file");
  serve_cmd->add_option("--port", serve.port, "TCP port")->check(CLI::Range(1, 65535));
  serve_cmd->add_option("--host", serve.host, "Bind address");
  serve_cmd->add_option("--vocab", serve.vocab, "Vocabulary files")->check(CLI::ExistingFile);
  serve_cmd->add_option("--decisions", serve.decisions, "Adjudication records")->check(CLI::ExistingFile);

  std::vector<std::string> faults;
  auto* check_cmd = app.add_subcommand("selfcheck", "Run built-in property suites");
  check_cmd->add_option("--inject-fault", faults, "jv | sinkhorn | gradient | metric | log | ontology");

  std::string init_out;
  std::optional<std::uint64_t> init_seed;
  auto* init_cmd = app.add_subcommand("init-weights", "Write freshly initialized weights");
  init_cmd->add_option("--out", init_out, "Weights file")->required();
  init_cmd->add_option("--seed", init_seed, "Seed (default: seeds.init)");

  auto* manifest_cmd = app.add_subcommand("manifest", "Print expected weight tensors");
  auto* schema_cmd = app.add_subcommand("config-schema", "Print config defaults and provenance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*fuse_cmd) return cmd_fuse(common, fuse);
    if (*infer_cmd) return cmd_infer(common, infer);
    if (*eval_cmd) return cmd_eval(common, eval);
    if (*onto_cmd) return cmd_ontology(common, onto);
    if (*serve_cmd) return cmd_serve(common, serve);
    if (*check_cmd) return cmd_selfcheck(faults);
    if (*init_cmd) {
      const ap::RunConfig cfg = common.config();
      ap::save_weights(init_out, ap::init_model_weights(cfg.fusion, cfg.decoder, init_seed.value_or(cfg.seed)));
      return kExitOk;
    }
    if (*manifest_cmd) {
      const ap::RunConfig cfg = common.config();
      write_json("", ap::weights_manifest(cfg.fusion, cfg.decoder));
      return kExitOk;
    }
    if (*schema_cmd) {
      write_json("", ap::config_schema());
      return kExitOk;
    }
  } catch (const ap::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEnvironment;
  }
  return kExitUsage;
}
