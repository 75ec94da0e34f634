#pragma once

// Confidence-routed review service. Every state change is a checksummed log
// record; live operations build a record, append it, then apply it through
// the same code path replay uses.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <mutex>
#include <optional>
#include <shared_mutex>

#include "alignparts/io.hpp"
#include "alignparts/ontology.hpp"

namespace alignparts {

enum class ItemStatus { auto_accepted, pending, leased, reviewed };

inline const char* status_name(ItemStatus s) {
  switch (s) {
    case ItemStatus::auto_accepted: return "AUTO_ACCEPTED";
    case ItemStatus::pending: return "PENDING";
    case ItemStatus::leased: return "LEASED";
    case ItemStatus::reviewed: return "REVIEWED";
  }
  return "?";
}

inline ItemStatus parse_status(const std::string& s) {
  for (ItemStatus v : {ItemStatus::auto_accepted, ItemStatus::pending, ItemStatus::leased, ItemStatus::reviewed})
    if (s == status_name(v)) return v;
  fail(ErrorKind::schema, "unknown status '" + s + "'");
}

enum class VerdictKind { accept, relabel, reject_part };

inline const char* verdict_name(VerdictKind v) {
  switch (v) {
    case VerdictKind::accept: return "ACCEPT";
    case VerdictKind::relabel: return "RELABEL";
    case VerdictKind::reject_part: return "REJECT_PART";
  }
  return "?";
}

struct PartVerdict {
  VerdictKind kind = VerdictKind::accept;
  std::string label;  // RELABEL only
};

struct Decision {
  std::string item_id;
  std::string reviewer;
  std::int64_t revision = 0;
  std::vector<PartVerdict> verdicts;  // one per predicted partlet
};

struct Lease {
  std::string reviewer;
  std::int64_t leased_at = 0;  // ms
  std::int64_t expires_at = 0;
};

struct QueueItem {
  std::string id;
  PredictionFile prediction;
  double avg_fused_conf = 0.0;
  bool low_confidence = false;
  ItemStatus status = ItemStatus::pending;
  std::int64_t seq = 0;  // ingest order
  std::int64_t revision = 0;
  std::optional<Lease> lease;
  PredictionFile final;  // labels after review; equals the prediction when auto-accepted
  std::string reviewer;
  double review_seconds = 0.0;
  std::optional<std::pair<std::int64_t, std::string>> last_decision;  // (revision, checksum)
};

struct Ack {
  std::string item_id;
  std::int64_t revision = 0;
  bool duplicate = false;
};

// Relabel target missing from the class vocabulary.
class UnknownLabelError : public Error {
 public:
  UnknownLabelError(const std::string& label, std::vector<std::string> suggestions)
      : Error(ErrorKind::not_found, "unknown label '" + label + "'"), suggestions_(std::move(suggestions)) {}
  const std::vector<std::string>& suggestions() const { return suggestions_; }

 private:
  std::vector<std::string> suggestions_;
};

using Clock = std::function<std::int64_t()>;

inline std::int64_t system_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline double average_fused(const PredictionFile& p) {
  if (p.partlets.empty()) return 0.0;
  double s = 0.0;
  for (const auto& q : p.partlets) s += q.conf_fused;
  return s / static_cast<double>(p.partlets.size());
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

// Canonical vocabulary seen by reviewers: canonical labels per canonical class.
class ReviewVocabulary {
 public:
  ReviewVocabulary() = default;
  explicit ReviewVocabulary(CanonicalMap map) : map_(std::move(map)) {
    for (const auto& [key, count] : map_.merged_counts()) {
      labels_[key.first][key.second] += count;
      known_.insert(key.first);
      known_.insert(key.second);
    }
  }

  bool empty() const { return labels_.empty(); }
  const CanonicalMap& map() const { return map_; }

  std::map<std::string, std::int64_t> labels_for(const std::string& object_class) const {
    const auto it = labels_.find(map_.resolve_class(object_class));
    if (it != labels_.end()) return it->second;
    std::map<std::string, std::int64_t> all;
    for (const auto& [c, l] : labels_)
      for (const auto& [name, n] : l) all[name] += n;
    return all;
  }

  // Canonical form of a reviewer-typed label, or UnknownLabelError with the
  // closest names from the item's class.
  std::string resolve(const std::string& object_class, const std::string& label) const {
    const std::string cls = map_.resolve_class(object_class);
    std::string canon = map_.resolve_part(cls, label);
    if (canon == label) canon = map_.resolve_alias(label);
    if (empty() || known_.count(canon)) return canon;
    const auto known = labels_for(cls);
    std::vector<std::pair<std::size_t, std::string>> ranked;
    for (const auto& [name, n] : known) ranked.emplace_back(edit_distance(label, name), name);
    std::sort(ranked.begin(), ranked.end());
    std::vector<std::string> suggestions;
    for (std::size_t i = 0; i < ranked.size() && i < 5; ++i) suggestions.push_back(ranked[i].second);
    throw UnknownLabelError(label, std::move(suggestions));
  }

 private:
  CanonicalMap map_;
  std::map<std::string, std::map<std::string, std::int64_t>> labels_;
  std::set<std::string> known_;  // every canonical class and part name
};

struct ServiceOptions {
  std::int64_t lease_ms = 10 * 60 * 1000;
  double auto_accept = kAutoAcceptMaha;
  double low_confidence = kLowConfidence;
};

namespace detail {

inline json verdicts_to_json(const std::vector<PartVerdict>& v) {
  json a = json::array();
  for (const auto& p : v) {
    json r{{"verdict", verdict_name(p.kind)}};
    if (p.kind == VerdictKind::relabel) r["label"] = p.label;
    a.push_back(r);
  }
  return a;
}

inline std::vector<PartVerdict> verdicts_from_json(const json& a, const std::string& ctx) {
  if (!a.is_array()) fail(ErrorKind::schema, ctx + ": verdicts must be an array");
  std::vector<PartVerdict> out;
  for (const auto& r : a) {
    only_keys(r, {"verdict", "label"}, ctx);
    const auto v = field<std::string>(r, "verdict", ctx);
    PartVerdict p;
    if (v == "ACCEPT") {
      p.kind = VerdictKind::accept;
    } else if (v == "RELABEL") {
      p.kind = VerdictKind::relabel;
      p.label = field<std::string>(r, "label", ctx);
      if (p.label.empty()) fail(ErrorKind::schema, ctx + ": empty relabel");
    } else if (v == "REJECT_PART") {
      p.kind = VerdictKind::reject_part;
    } else {
      fail(ErrorKind::schema, ctx + ": unknown verdict '" + v + "'");
    }
    if (p.kind != VerdictKind::relabel && r.contains("label")) fail(ErrorKind::schema, ctx + ": label only allowed for RELABEL");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace detail

inline Decision decision_from_json(const json& j, const std::string& item_id, const std::string& ctx = "decision") {
  detail::only_keys(j, {"reviewer", "revision", "verdicts"}, ctx);
  Decision d;
  d.item_id = item_id;
  d.reviewer = detail::field<std::string>(j, "reviewer", ctx);
  d.revision = detail::field<std::int64_t>(j, "revision", ctx);
  d.verdicts = detail::verdicts_from_json(detail::field<json>(j, "verdicts", ctx), ctx);
  if (d.reviewer.empty()) fail(ErrorKind::schema, ctx + ": empty reviewer");
  return d;
}

inline json decision_to_json(const Decision& d) {
  return {{"reviewer", d.reviewer}, {"revision", d.revision}, {"verdicts", detail::verdicts_to_json(d.verdicts)}};
}

// Idempotency checksum over the submitted content.
inline std::string decision_checksum(const Decision& d) {
  return hex32(crc32_of(json{{"item", d.item_id}, {"revision", d.revision}, {"verdicts", detail::verdicts_to_json(d.verdicts)}}.dump()));
}

inline json export_item_json(const QueueItem& it) {
  json j = prediction_to_json(it.final);
  j["status"] = status_name(it.status);
  j["reviewer"] = it.reviewer;
  j["review_seconds"] = it.review_seconds;
  return j;
}

inline json item_to_json(const QueueItem& it) {
  json j{{"id", it.id},
         {"status", status_name(it.status)},
         {"avg_fused_conf", it.avg_fused_conf},
         {"low_confidence", it.low_confidence},
         {"seq", it.seq},
         {"revision", it.revision},
         {"prediction", prediction_to_json(it.prediction)},
         {"final", prediction_to_json(it.final)},
         {"reviewer", it.reviewer},
         {"review_seconds", it.review_seconds}};
  j["lease"] = it.lease ? json{{"reviewer", it.lease->reviewer},
                               {"leased_at", it.lease->leased_at},
                               {"expires_at", it.lease->expires_at}}
                        : json(nullptr);
  j["last_decision"] = it.last_decision ? json{{"revision", it.last_decision->first}, {"checksum", it.last_decision->second}}
                                        : json(nullptr);
  return j;
}

inline QueueItem item_from_json(const json& j) {
  const std::string ctx = "snapshot item";
  QueueItem it;
  it.id = detail::field<std::string>(j, "id", ctx);
  it.status = parse_status(detail::field<std::string>(j, "status", ctx));
  it.avg_fused_conf = detail::field<double>(j, "avg_fused_conf", ctx);
  it.low_confidence = detail::field<bool>(j, "low_confidence", ctx);
  it.seq = detail::field<std::int64_t>(j, "seq", ctx);
  it.revision = detail::field<std::int64_t>(j, "revision", ctx);
  it.prediction = prediction_from_json(j.at("prediction"), ctx);
  it.final = prediction_from_json(j.at("final"), ctx);
  it.reviewer = detail::field<std::string>(j, "reviewer", ctx);
  it.review_seconds = detail::field<double>(j, "review_seconds", ctx);
  if (!j.at("lease").is_null())
    it.lease = Lease{j["lease"].at("reviewer"), j["lease"].at("leased_at"), j["lease"].at("expires_at")};
  if (!j.at("last_decision").is_null())
    it.last_decision = std::make_pair(j["last_decision"].at("revision").get<std::int64_t>(),
                                      j["last_decision"].at("checksum").get<std::string>());
  return it;
}

class AnnotationService {
 public:
  explicit AnnotationService(ReviewVocabulary vocab = {}, ServiceOptions opts = {}, Clock clock = system_millis)
      : vocab_(std::move(vocab)), opts_(opts), clock_(std::move(clock)) {}

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  ~AnnotationService() {
    if (log_) std::fclose(log_);
  }

  // Replays `log_path` (after an optional snapshot) and appends new records to it.
  void open_log(const fs::path& log_path, const std::optional<fs::path>& snapshot = std::nullopt) {
    std::unique_lock lock(mu_);
    if (snapshot && fs::exists(*snapshot)) restore_snapshot_locked(*snapshot);
    if (fs::exists(log_path)) {
      const std::string text = read_text(log_path);
      std::istringstream in(text);
      std::string line;
      std::size_t index = 0;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json r = open_record(line, index);
        if (index >= applied_) {
          apply(r);
          ++applied_;
        }
        ++index;
      }
      if (index < applied_) fail(ErrorKind::conflict, "snapshot is ahead of the log");
    }
    log_ = std::fopen(log_path.c_str(), "ab");
    if (!log_) fail(ErrorKind::environment, "cannot open log " + log_path.string());
  }

  // State from a record list alone.
  static std::unique_ptr<AnnotationService> replay(const std::vector<std::string>& lines, ReviewVocabulary vocab = {},
                                                   ServiceOptions opts = {}) {
    auto s = std::make_unique<AnnotationService>(std::move(vocab), opts);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      s->apply(open_record(lines[i], i));
      ++s->applied_;
    }
    return s;
  }

  QueueItem ingest(const PredictionFile& p) {
    std::unique_lock lock(mu_);
    if (items_.count(p.shape_id)) fail(ErrorKind::conflict, "duplicate shape id '" + p.shape_id + "'");
    commit({{"type", "ingest"}, {"t", clock_()}, {"prediction", prediction_to_json(p)}});
    return items_.at(p.shape_id);
  }

  // Adds previously exported records with their status preserved.
  std::vector<std::string> ingest_export(const json& dataset) {
    std::unique_lock lock(mu_);
    const json& items = check_export_header(dataset);
    std::set<std::string> ids;
    for (const auto& e : items) {
      const std::string id = detail::field<std::string>(e, "shape_id", "export item");
      if (items_.count(id) || !ids.insert(id).second) fail(ErrorKind::conflict, "duplicate shape id '" + id + "'");
      check_export_item(e);
    }
    std::vector<std::string> out;
    for (const auto& e : items) {
      commit({{"type", "import"}, {"t", clock_()}, {"item", e}});
      out.push_back(e["shape_id"]);
    }
    return out;
  }

  std::vector<QueueItem> queue_order() const {
    std::shared_lock lock(mu_);
    return pending_sorted();
  }

  std::optional<QueueItem> lease_next(const std::string& reviewer) {
    if (reviewer.empty()) fail(ErrorKind::invalid_argument, "lease_next: empty reviewer");
    std::unique_lock lock(mu_);
    expire_locked();
    for (const auto& [id, it] : items_)
      if (it.status == ItemStatus::leased && it.lease->reviewer == reviewer) return it;
    const auto queue = pending_sorted();
    if (queue.empty()) return std::nullopt;
    const std::int64_t now = clock_();
    commit({{"type", "lease"}, {"t", now}, {"item", queue.front().id}, {"reviewer", reviewer},
            {"expires_at", now + opts_.lease_ms}});
    return items_.at(queue.front().id);
  }

  Ack submit_decision(const Decision& d) {
    std::unique_lock lock(mu_);
    expire_locked();
    const auto found = items_.find(d.item_id);
    if (found == items_.end()) fail(ErrorKind::not_found, "unknown item '" + d.item_id + "'");
    const QueueItem& it = found->second;
    const std::string checksum = decision_checksum(d);
    if (it.last_decision && it.last_decision->first == d.revision && it.last_decision->second == checksum)
      return {d.item_id, it.revision, true};
    if (it.status != ItemStatus::leased || it.lease->reviewer != d.reviewer)
      fail(ErrorKind::stale, "item '" + d.item_id + "' is not leased to '" + d.reviewer + "'");
    if (d.revision != it.revision)
      fail(ErrorKind::stale, "item '" + d.item_id + "' is at revision " + std::to_string(it.revision));
    if (d.verdicts.size() != it.prediction.partlets.size())
      fail(ErrorKind::schema, "decision needs one verdict per partlet (" + std::to_string(it.prediction.partlets.size()) + ")");
    json verdicts = detail::verdicts_to_json(d.verdicts);
    for (std::size_t i = 0; i < d.verdicts.size(); ++i)
      if (d.verdicts[i].kind == VerdictKind::relabel) {
        verdicts[i]["requested"] = d.verdicts[i].label;
        verdicts[i]["label"] = vocab_.resolve(it.prediction.category, d.verdicts[i].label);
      }
    commit({{"type", "decision"}, {"t", clock_()}, {"item", d.item_id}, {"reviewer", d.reviewer},
            {"revision", d.revision}, {"checksum", checksum}, {"verdicts", verdicts}});
    return {d.item_id, items_.at(d.item_id).revision, false};
  }

  // Returns an AUTO_ACCEPTED or REVIEWED item to the queue.
  QueueItem reopen(const std::string& id) {
    std::unique_lock lock(mu_);
    const QueueItem& it = get_locked(id);
    if (it.status != ItemStatus::auto_accepted && it.status != ItemStatus::reviewed)
      fail(ErrorKind::conflict, "item '" + id + "' is " + status_name(it.status));
    commit({{"type", "reopen"}, {"t", clock_()}, {"item", id}});
    return items_.at(id);
  }

  // Reverts leases whose expiry has passed; returns how many.
  std::size_t expire_leases() {
    std::unique_lock lock(mu_);
    return expire_locked();
  }

  std::optional<QueueItem> item(const std::string& id) const {
    std::shared_lock lock(mu_);
    const auto it = items_.find(id);
    if (it == items_.end()) return std::nullopt;
    return it->second;
  }

  // Final records of items in `statuses`, ordered by shape id.
  json export_dataset(const std::set<ItemStatus>& statuses = {ItemStatus::auto_accepted, ItemStatus::reviewed}) {
    for (ItemStatus s : statuses)
      if (s != ItemStatus::auto_accepted && s != ItemStatus::reviewed)
        fail(ErrorKind::invalid_argument, std::string("cannot export status ") + status_name(s));
    std::unique_lock lock(mu_);
    json items = json::array();
    for (const auto& [id, it] : items_)
      if (statuses.count(it.status)) items.push_back(export_item_json(it));
    json names = json::array();
    for (ItemStatus s : statuses) names.push_back(status_name(s));
    commit({{"type", "export"}, {"t", clock_()}, {"statuses", names}, {"count", items.size()}});
    return {{"format", "alignparts-dataset"}, {"version", 1}, {"items", items}};
  }

  json stats() const {
    std::shared_lock lock(mu_);
    std::map<std::string, std::int64_t> by_status;
    for (ItemStatus s : {ItemStatus::auto_accepted, ItemStatus::pending, ItemStatus::leased, ItemStatus::reviewed})
      by_status[status_name(s)] = 0;
    std::int64_t low = 0, reviewed = 0;
    double seconds = 0.0;
    for (const auto& [id, it] : items_) {
      ++by_status[status_name(it.status)];
      low += it.low_confidence;
      if (it.status == ItemStatus::reviewed) {
        ++reviewed;
        seconds += it.review_seconds;
      }
    }
    return {{"items", items_.size()},
            {"by_status", by_status},
            {"low_confidence", low},
            {"mean_review_seconds", reviewed ? seconds / static_cast<double>(reviewed) : 0.0},
            {"log_records", applied_}};
  }

  json vocab_for(const std::string& object_class) const {
    json out = json::array();
    for (const auto& [label, n] : vocab_.labels_for(object_class)) out.push_back({{"label", label}, {"count", n}});
    return {{"class", vocab_.map().resolve_class(object_class)}, {"labels", out}};
  }

  // Full state, canonical; equal states have equal dumps.
  json state() const {
    std::shared_lock lock(mu_);
    return state_locked();
  }

  void save_snapshot(const fs::path& p) const {
    std::shared_lock lock(mu_);
    const fs::path tmp = p.string() + ".tmp";
    write_text(tmp, seal_record({{"records", applied_}, {"next_seq", next_seq_}, {"state", state_locked()}}) + "\n");
    fs::rename(tmp, p);
  }

  void flush() {
    std::unique_lock lock(mu_);
    if (log_) std::fflush(log_);
  }

  std::size_t record_count() const {
    std::shared_lock lock(mu_);
    return applied_;
  }

 private:
  json state_locked() const {
    json items = json::array();
    for (const auto& [id, it] : items_) items.push_back(item_to_json(it));
    return {{"items", items}};
  }

  void restore_snapshot_locked(const fs::path& p) {
    std::istringstream in(read_text(p));
    std::string line;
    std::getline(in, line);
    const json s = open_record(line, 0);
    items_.clear();
    for (const auto& j : s.at("state").at("items")) {
      QueueItem it = item_from_json(j);
      items_.emplace(it.id, std::move(it));
    }
    applied_ = s.at("records").get<std::size_t>();
    next_seq_ = s.at("next_seq").get<std::int64_t>();
  }

  const QueueItem& get_locked(const std::string& id) const {
    const auto it = items_.find(id);
    if (it == items_.end()) fail(ErrorKind::not_found, "unknown item '" + id + "'");
    return it->second;
  }

  std::vector<QueueItem> pending_sorted() const {
    std::vector<QueueItem> q;
    for (const auto& [id, it] : items_)
      if (it.status == ItemStatus::pending) q.push_back(it);
    std::sort(q.begin(), q.end(), [](const QueueItem& a, const QueueItem& b) {
      if (a.avg_fused_conf != b.avg_fused_conf) return a.avg_fused_conf > b.avg_fused_conf;
      return a.seq < b.seq;
    });
    return q;
  }

  std::size_t expire_locked() {
    const std::int64_t now = clock_();
    std::vector<std::string> due;
    for (const auto& [id, it] : items_)
      if (it.status == ItemStatus::leased && it.lease->expires_at <= now) due.push_back(id);
    for (const auto& id : due) commit({{"type", "expire"}, {"t", now}, {"item", id}});
    return due.size();
  }

  static const json& check_export_header(const json& dataset) {
    detail::only_keys(dataset, {"format", "version", "items"}, "dataset");
    if (dataset.value("format", "") != "alignparts-dataset" || dataset.value("version", 0) != 1)
      fail(ErrorKind::schema, "dataset: unsupported format");
    const json& items = dataset.at("items");
    if (!items.is_array()) fail(ErrorKind::schema, "dataset: items must be an array");
    return items;
  }

  static void check_export_item(const json& e) {
    json p = e;
    for (const char* k : {"status", "reviewer", "review_seconds"}) {
      if (!e.contains(k)) fail(ErrorKind::schema, std::string("export item: missing '") + k + "'");
      p.erase(k);
    }
    prediction_from_json(p, "export item");
    const ItemStatus s = parse_status(e.at("status"));
    if (s != ItemStatus::auto_accepted && s != ItemStatus::reviewed)
      fail(ErrorKind::schema, "export item: status must be AUTO_ACCEPTED or REVIEWED");
  }

  void commit(const json& record) {
    const std::string line = seal_record(record);
    apply(record);
    ++applied_;
    if (log_) {
      if (std::fputs((line + "\n").c_str(), log_) < 0 || std::fflush(log_) != 0)
        fail(ErrorKind::environment, "log append failed");
    }
  }

  void apply(const json& r) {
    const std::string type = detail::field<std::string>(r, "type", "log record");
    const std::int64_t t = detail::field<std::int64_t>(r, "t", "log record");
    if (type == "ingest") {
      QueueItem it;
      it.prediction = prediction_from_json(r.at("prediction"), "ingest");
      it.id = it.prediction.shape_id;
      if (items_.count(it.id)) fail(ErrorKind::conflict, "duplicate shape id '" + it.id + "'");
      it.avg_fused_conf = average_fused(it.prediction);
      bool all_confident = true;
      for (const auto& q : it.prediction.partlets) {
        all_confident = all_confident && q.conf_maha >= opts_.auto_accept;
        it.low_confidence = it.low_confidence || q.conf_fused < opts_.low_confidence;
      }
      it.status = all_confident ? ItemStatus::auto_accepted : ItemStatus::pending;
      it.final = it.prediction;
      it.seq = next_seq_++;
      items_.emplace(it.id, std::move(it));
    } else if (type == "import") {
      json p = r.at("item");
      QueueItem it;
      it.status = parse_status(p.at("status"));
      it.reviewer = p.at("reviewer");
      it.review_seconds = p.at("review_seconds");
      for (const char* k : {"status", "reviewer", "review_seconds"}) p.erase(k);
      it.prediction = prediction_from_json(p, "import");
      it.final = it.prediction;
      it.id = it.prediction.shape_id;
      it.avg_fused_conf = average_fused(it.prediction);
      for (const auto& q : it.prediction.partlets) it.low_confidence = it.low_confidence || q.conf_fused < opts_.low_confidence;
      it.seq = next_seq_++;
      if (!items_.emplace(it.id, std::move(it)).second) fail(ErrorKind::conflict, "duplicate shape id");
    } else if (type == "lease") {
      QueueItem& it = mutable_item(r.at("item"));
      it.status = ItemStatus::leased;
      it.lease = Lease{r.at("reviewer"), t, r.at("expires_at")};
    } else if (type == "expire") {
      QueueItem& it = mutable_item(r.at("item"));
      it.status = ItemStatus::pending;
      it.lease.reset();
    } else if (type == "decision") {
      QueueItem& it = mutable_item(r.at("item"));
      const json& v = r.at("verdicts");
      PredictionFile out = it.prediction;
      out.partlets.clear();
      for (std::size_t i = 0; i < it.prediction.partlets.size(); ++i) {
        const std::string kind = v.at(i).at("verdict");
        if (kind == "REJECT_PART") {
          out.unlabeled_count += static_cast<std::int64_t>(it.prediction.partlets[i].mask_point_indices.size());
          continue;
        }
        PredictedPart q = it.prediction.partlets[i];
        if (kind == "RELABEL") q.name = v.at(i).at("label");
        out.partlets.push_back(std::move(q));
      }
      it.final = std::move(out);
      it.reviewer = r.at("reviewer");
      it.review_seconds = it.lease ? static_cast<double>(t - it.lease->leased_at) / 1000.0 : 0.0;
      it.lease.reset();
      it.status = ItemStatus::reviewed;
      it.last_decision = std::make_pair(r.at("revision").get<std::int64_t>(), r.at("checksum").get<std::string>());
      it.revision = r.at("revision").get<std::int64_t>() + 1;
    } else if (type == "reopen") {
      QueueItem& it = mutable_item(r.at("item"));
      it.status = ItemStatus::pending;
      it.final = it.prediction;
      it.reviewer.clear();
      it.review_seconds = 0.0;
    } else if (type != "export") {
      fail(ErrorKind::schema, "unknown log record type '" + type + "'");
    }
  }

  QueueItem& mutable_item(const std::string& id) {
    const auto it = items_.find(id);
    if (it == items_.end()) fail(ErrorKind::schema, "log references unknown item '" + id + "'");
    return it->second;
  }

  ReviewVocabulary vocab_;
  ServiceOptions opts_;
  Clock clock_;
  mutable std::shared_mutex mu_;
  std::map<std::string, QueueItem> items_;
  std::int64_t next_seq_ = 0;
  std::size_t applied_ = 0;
  std::FILE* log_ = nullptr;
};

inline std::set<ItemStatus> parse_status_filter(const std::string& csv) {
  std::set<ItemStatus> out;
  std::istringstream in(csv);
  std::string tok;
  while (std::getline(in, tok, ','))
    if (!tok.empty()) out.insert(parse_status(tok));
  if (out.empty()) out = {ItemStatus::auto_accepted, ItemStatus::reviewed};
  return out;
}

}  // namespace alignparts
