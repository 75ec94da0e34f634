#pragma once

// Vocabulary compression: embedding-similarity candidate pairs, recorded
// adjudication verdicts, union-find merging and alias resolution.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "alignparts/metrics.hpp"
#include "alignparts/numerics.hpp"

namespace alignparts {

inline constexpr double kPairThreshold = 0.85;

struct VocabEntry {
  std::string object_class;
  std::string label;
  std::string source;
  std::int64_t count = 0;
};

struct Vocabulary {
  std::vector<VocabEntry> entries;

  void validate() const {
    std::set<std::tuple<std::string, std::string, std::string>> seen;
    for (const auto& e : entries) {
      if (!seen.emplace(e.object_class, e.label, e.source).second)
        fail(ErrorKind::schema, "Vocabulary: duplicate entry (" + e.object_class + ", " + e.label + ", " + e.source + ")");
      if (e.count < 0) fail(ErrorKind::schema, "Vocabulary: negative count for " + e.label);
    }
  }

  std::int64_t total_count() const {
    std::int64_t t = 0;
    for (const auto& e : entries) t += e.count;
    return t;
  }
};

enum class Scope { class_level, part_level };

inline const char* scope_name(Scope s) { return s == Scope::class_level ? "class" : "part"; }

struct CandidatePair {
  Scope scope = Scope::part_level;
  std::string object_class;  // empty for class-level pairs
  std::string a;
  std::string b;
  double sim = 0.0;
};

enum class Verdict { accept, reject };
enum class DecisionSource { recorded_llm, human };

struct Adjudication {
  CandidatePair pair;
  Verdict verdict = Verdict::reject;
  std::string rationale;
  DecisionSource source = DecisionSource::recorded_llm;
};

struct AliasRecord {
  Scope scope;
  std::string object_class;
  std::string alias;
  std::string canonical;
};

// Deterministic choice among equivalent names: the longer string, then the
// lexicographically smaller one.
inline bool more_canonical(const std::string& a, const std::string& b) {
  if (a.size() != b.size()) return a.size() > b.size();
  return a < b;
}

class CanonicalMap {
 public:
  std::string resolve_class(const std::string& c) const {
    const auto it = class_alias_.find(c);
    return it == class_alias_.end() ? c : it->second;
  }

  // Part label within an object class (the class is resolved first).
  std::string resolve_part(const std::string& object_class, const std::string& label) const {
    const auto it = part_alias_.find({resolve_class(object_class), label});
    return it == part_alias_.end() ? label : it->second;
  }

  // Class-free lookup: class aliases, then part aliases that resolve to a
  // single canonical name across all classes; unknown labels pass through.
  std::string resolve_alias(const std::string& label) const {
    std::string cur = label;
    for (;;) {
      std::string next = step(cur);
      if (next == cur) return cur;
      cur = std::move(next);
    }
  }

  const std::vector<AliasRecord>& log() const { return log_; }
  const std::map<std::pair<std::string, std::string>, std::int64_t>& merged_counts() const { return counts_; }
  std::int64_t total_count() const {
    std::int64_t t = 0;
    for (const auto& [k, v] : counts_) t += v;
    return t;
  }

 private:
  friend CanonicalMap apply_adjudications(const Vocabulary&, const std::vector<Adjudication>&);

  std::string step(const std::string& label) const {
    if (const auto it = class_alias_.find(label); it != class_alias_.end()) return it->second;
    if (const auto it = flat_part_.find(label); it != flat_part_.end() && it->second.size() == 1)
      return *it->second.begin();
    return label;
  }

  std::map<std::string, std::string> class_alias_;
  std::map<std::pair<std::string, std::string>, std::string> part_alias_;
  std::map<std::string, std::set<std::string>> flat_part_;
  std::map<std::pair<std::string, std::string>, std::int64_t> counts_;
  std::vector<AliasRecord> log_;
};

// Cosine similarity of every within-scope pair at or above theta, sorted by
// descending similarity. Part labels are grouped by their resolved class.
inline std::vector<CandidatePair> propose_pairs(const Vocabulary& vocab, const LabelEmbeddings& emb,
                                                double theta = kPairThreshold, const CanonicalMap& classes = {}) {
  require(theta >= 0.0 && theta <= 1.0, "propose_pairs: theta must be in [0, 1]");
  std::set<std::string> class_names;
  std::map<std::string, std::set<std::string>> parts;
  for (const auto& e : vocab.entries) {
    class_names.insert(e.object_class);
    parts[classes.resolve_class(e.object_class)].insert(e.label);
  }
  std::vector<CandidatePair> out;
  auto scan = [&](Scope scope, const std::string& cls, const std::set<std::string>& names) {
    const std::vector<std::string> v(names.begin(), names.end());
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j) {
        const double s = cosine_sim(label_embedding(emb, v[i]), label_embedding(emb, v[j]));
        if (s >= theta) out.push_back({scope, cls, v[i], v[j], s});
      }
  };
  scan(Scope::class_level, "", class_names);
  for (const auto& [cls, names] : parts) scan(Scope::part_level, cls, names);
  std::stable_sort(out.begin(), out.end(), [](const CandidatePair& x, const CandidatePair& y) {
    if (x.sim != y.sim) return x.sim > y.sim;
    return std::tie(x.scope, x.object_class, x.a, x.b) < std::tie(y.scope, y.object_class, y.a, y.b);
  });
  return out;
}

// Source of verdicts for candidate pairs.
class Adjudicator {
 public:
  virtual ~Adjudicator() = default;
  virtual std::optional<Adjudication> judge(const CandidatePair& pair) = 0;
};

namespace detail {

using PairKey = std::tuple<Scope, std::string, std::string, std::string>;

inline PairKey pair_key(const CandidatePair& p) {
  const auto& [lo, hi] = std::minmax(p.a, p.b);
  return {p.scope, p.object_class, lo, hi};
}

class UnionFind {
 public:
  std::string find(const std::string& x) {
    auto it = parent_.find(x);
    if (it == parent_.end()) {
      parent_[x] = x;
      return x;
    }
    if (it->second == x) return x;
    const std::string root = find(it->second);
    parent_[x] = root;
    return root;
  }
  void unite(const std::string& a, const std::string& b) {
    const std::string ra = find(a), rb = find(b);
    if (ra != rb) parent_[rb] = ra;
  }
  std::vector<std::string> members() const {
    std::vector<std::string> m;
    for (const auto& [k, v] : parent_) m.push_back(k);
    return m;
  }

 private:
  std::map<std::string, std::string> parent_;
};

// alias -> canonical for every non-singleton component.
inline std::map<std::string, std::string> canonical_of(UnionFind& uf) {
  std::map<std::string, std::string> best;
  for (const auto& m : uf.members()) {
    const std::string r = uf.find(m);
    auto it = best.find(r);
    if (it == best.end() || more_canonical(m, it->second)) best[r] = m;
  }
  std::map<std::string, std::string> out;
  for (const auto& m : uf.members()) {
    const std::string& c = best[uf.find(m)];
    if (c != m) out[m] = c;
  }
  return out;
}

}  // namespace detail

// Records replayed from a fixed decision list, keyed by unordered pair.
class RecordedAdjudicator : public Adjudicator {
 public:
  explicit RecordedAdjudicator(const std::vector<Adjudication>& decisions) {
    for (const auto& d : decisions) by_key_.emplace(detail::pair_key(d.pair), d);
  }
  std::optional<Adjudication> judge(const CandidatePair& pair) override {
    const auto it = by_key_.find(detail::pair_key(pair));
    if (it == by_key_.end()) return std::nullopt;
    Adjudication a = it->second;
    a.pair.sim = pair.sim;
    return a;
  }

 private:
  std::map<detail::PairKey, Adjudication> by_key_;
};

inline std::vector<Adjudication> adjudicate(const std::vector<CandidatePair>& pairs, Adjudicator& judge) {
  std::vector<Adjudication> out;
  for (const auto& p : pairs)
    if (auto a = judge.judge(p)) out.push_back(std::move(*a));
  return out;
}

// Merges ACCEPTed pairs per scope with union-find. Class merges apply first;
// part-level pairs are grouped under the canonical class.
inline CanonicalMap apply_adjudications(const Vocabulary& vocab, const std::vector<Adjudication>& decisions) {
  vocab.validate();
  std::set<std::string> class_names;
  std::set<std::pair<std::string, std::string>> part_names;
  for (const auto& e : vocab.entries) {
    class_names.insert(e.object_class);
    part_names.emplace(e.object_class, e.label);
  }

  std::map<detail::PairKey, std::set<Verdict>> verdicts;
  for (const auto& d : decisions) verdicts[detail::pair_key(d.pair)].insert(d.verdict);
  std::string conflicts;
  for (const auto& [key, v] : verdicts)
    if (v.size() > 1)
      conflicts += std::string(conflicts.empty() ? "" : "; ") + scope_name(std::get<0>(key)) + ":" +
                   std::get<1>(key) + ":" + std::get<2>(key) + "|" + std::get<3>(key);
  if (!conflicts.empty()) fail(ErrorKind::conflict, "apply_adjudications: contradictory decisions: " + conflicts);

  CanonicalMap map;
  detail::UnionFind class_uf;
  for (const auto& d : decisions) {
    if (d.pair.scope != Scope::class_level) continue;
    for (const auto* n : {&d.pair.a, &d.pair.b})
      if (!class_names.count(*n)) fail(ErrorKind::not_found, "apply_adjudications: unknown class '" + *n + "'");
    if (d.verdict == Verdict::accept) class_uf.unite(d.pair.a, d.pair.b);
  }
  map.class_alias_ = detail::canonical_of(class_uf);
  for (const auto& [alias, canon] : map.class_alias_) map.log_.push_back({Scope::class_level, "", alias, canon});

  std::map<std::string, detail::UnionFind> part_uf;
  std::set<std::pair<std::string, std::string>> resolved_parts;
  for (const auto& [cls, label] : part_names) resolved_parts.emplace(map.resolve_class(cls), label);
  for (const auto& d : decisions) {
    if (d.pair.scope != Scope::part_level) continue;
    const std::string cls = map.resolve_class(d.pair.object_class);
    for (const auto* n : {&d.pair.a, &d.pair.b})
      if (!resolved_parts.count({cls, *n}))
        fail(ErrorKind::not_found, "apply_adjudications: unknown part '" + *n + "' in class '" + cls + "'");
    if (d.verdict == Verdict::accept) part_uf[cls].unite(d.pair.a, d.pair.b);
  }
  for (auto& [cls, uf] : part_uf)
    for (const auto& [alias, canon] : detail::canonical_of(uf)) {
      map.part_alias_[{cls, alias}] = canon;
      map.flat_part_[alias].insert(canon);
      map.log_.push_back({Scope::part_level, cls, alias, canon});
    }

  for (const auto& e : vocab.entries) {
    const std::string cls = map.resolve_class(e.object_class);
    map.counts_[{cls, map.resolve_part(cls, e.label)}] += e.count;
  }
  return map;
}

// Applies alias resolution to segment labels, merging segments that end up
// with the same canonical label.
inline Segmentation canonicalize(const Segmentation& seg, const CanonicalMap& map) {
  std::map<std::string, PointSet> merged;
  for (const auto& s : seg) {
    PointSet& dst = merged[map.resolve_alias(s.label)];
    dst.insert(dst.end(), s.points.begin(), s.points.end());
  }
  Segmentation out;
  for (auto& [label, pts] : merged) out.push_back({label, make_point_set(std::move(pts))});
  return out;
}

}  // namespace alignparts
