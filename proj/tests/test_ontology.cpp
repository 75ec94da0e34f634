#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "alignparts/io.hpp"
#include "alignparts/ontology.hpp"

namespace alignparts {
namespace {

const fs::path kFixtures = fs::path(ALIGNPARTS_FIXTURES) / "ontology";

Vocabulary fixture_vocab() { return vocabulary_from_json(read_json(kFixtures / "vocab.json"), "vocab.json"); }
std::vector<Adjudication> fixture_decisions() { return load_adjudications(kFixtures / "decisions.jsonl"); }

Adjudication decision(Scope scope, std::string cls, std::string a, std::string b, Verdict v) {
  return {{scope, std::move(cls), std::move(a), std::move(b), 0.9}, v, "", DecisionSource::human};
}

std::vector<std::string> all_labels(const Vocabulary& v) {
  std::set<std::string> s;
  for (const auto& e : v.entries) {
    s.insert(e.object_class);
    s.insert(e.label);
  }
  return {s.begin(), s.end()};
}

void expect_same_map(const CanonicalMap& x, const CanonicalMap& y, const std::vector<std::string>& labels) {
  EXPECT_EQ(x.merged_counts(), y.merged_counts());
  ASSERT_EQ(x.log().size(), y.log().size());
  for (std::size_t i = 0; i < x.log().size(); ++i) {
    EXPECT_EQ(x.log()[i].alias, y.log()[i].alias);
    EXPECT_EQ(x.log()[i].canonical, y.log()[i].canonical);
    EXPECT_EQ(x.log()[i].object_class, y.log()[i].object_class);
  }
  for (const auto& l : labels) EXPECT_EQ(x.resolve_alias(l), y.resolve_alias(l)) << l;
}

TEST(Ontology, RecordedDecisionsReproduceKnownMerges) {
  const Vocabulary vocab = fixture_vocab();
  const CanonicalMap map = apply_adjudications(vocab, fixture_decisions());
  EXPECT_EQ(map.resolve_alias("laptop"), "laptop_computer");
  EXPECT_EQ(map.resolve_alias("laptop_computer"), "laptop_computer");
  EXPECT_EQ(map.resolve_alias("microwave"), "microwave_oven");
  EXPECT_EQ(map.resolve_alias("footboard"), "bed_footboard");
  EXPECT_EQ(map.resolve_part("microwave", "glass"), "door_glass");
  EXPECT_EQ(map.resolve_alias("car_front_bumper"), "car_front_bumper");
  EXPECT_EQ(map.resolve_alias("car_rear_bumper"), "car_rear_bumper");
  EXPECT_EQ(map.resolve_alias("back_frame_vertical_rod"), "back_frame_vertical_rod");
  EXPECT_EQ(map.resolve_alias("sofa_cushion"), "sofa_cushion");
}

TEST(Ontology, CountsAggregateUnderCanonicalNames) {
  const Vocabulary vocab = fixture_vocab();
  const CanonicalMap map = apply_adjudications(vocab, fixture_decisions());
  const auto& c = map.merged_counts();
  EXPECT_EQ(c.at({"laptop_computer", "screen"}), 25);
  EXPECT_EQ(c.at({"laptop_computer", "keyboard"}), 18);
  EXPECT_EQ(c.at({"laptop_computer", "touchpad"}), 2);
  EXPECT_EQ(c.at({"microwave_oven", "door_glass"}), 9);
  EXPECT_EQ(c.at({"microwave_oven", "handle"}), 6);
  EXPECT_EQ(c.at({"bed", "bed_footboard"}), 9);
  EXPECT_EQ(c.at({"car", "car_front_bumper"}), 4);
  EXPECT_EQ(c.at({"car", "car_rear_bumper"}), 4);
  EXPECT_EQ(c.count({"laptop", "screen"}), 0u);
  EXPECT_EQ(map.total_count(), vocab.total_count());
}

TEST(Ontology, MappingLogListsEveryAlias) {
  const CanonicalMap map = apply_adjudications(fixture_vocab(), fixture_decisions());
  std::set<std::string> aliases;
  for (const auto& r : map.log()) {
    aliases.insert(r.alias);
    EXPECT_NE(r.alias, r.canonical);
    EXPECT_EQ(map.resolve_alias(r.canonical), r.canonical);
  }
  EXPECT_EQ(aliases, (std::set<std::string>{"footboard", "glass", "laptop", "microwave"}));
}

TEST(Ontology, ResolutionIsIdempotent) {
  const Vocabulary vocab = fixture_vocab();
  const CanonicalMap map = apply_adjudications(vocab, fixture_decisions());
  for (const auto& l : all_labels(vocab)) EXPECT_EQ(map.resolve_alias(map.resolve_alias(l)), map.resolve_alias(l)) << l;
}

TEST(Ontology, ChainedAcceptsShareOneCanonical) {
  Vocabulary vocab{{{"table", "leg", "a", 1}, {"table", "table_leg", "a", 2}, {"table", "tbl_leg", "b", 3}}};
  const CanonicalMap map = apply_adjudications(
      vocab, {decision(Scope::part_level, "table", "leg", "tbl_leg", Verdict::accept),
              decision(Scope::part_level, "table", "tbl_leg", "table_leg", Verdict::accept)});
  for (const char* l : {"leg", "tbl_leg", "table_leg"}) EXPECT_EQ(map.resolve_part("table", l), "table_leg");
  EXPECT_EQ(map.merged_counts().at({"table", "table_leg"}), 6);
  EXPECT_EQ(map.merged_counts().size(), 1u);
}

TEST(Ontology, CanonicalTieBreaksLexicographically) {
  EXPECT_TRUE(more_canonical("abcd", "abc"));
  EXPECT_TRUE(more_canonical("abc", "abd"));
  EXPECT_FALSE(more_canonical("abd", "abc"));
  Vocabulary vocab{{{"x", "rim", "a", 1}, {"x", "lip", "b", 1}}};
  const CanonicalMap map = apply_adjudications(vocab, {decision(Scope::part_level, "x", "rim", "lip", Verdict::accept)});
  EXPECT_EQ(map.resolve_part("x", "rim"), "lip");
}

TEST(Ontology, RejectsKeepLabelsDistinct) {
  Vocabulary vocab{{{"car", "front", "a", 1}, {"car", "rear", "a", 1}}};
  const CanonicalMap map = apply_adjudications(vocab, {decision(Scope::part_level, "car", "front", "rear", Verdict::reject)});
  EXPECT_TRUE(map.log().empty());
  EXPECT_EQ(map.merged_counts().size(), 2u);
}

TEST(Ontology, IndependentOfDecisionOrder) {
  const Vocabulary vocab = fixture_vocab();
  auto decisions = fixture_decisions();
  for (const auto& d : std::vector<Adjudication>(decisions)) {
    Adjudication flipped = d;
    std::swap(flipped.pair.a, flipped.pair.b);
    decisions.push_back(flipped);
  }
  const CanonicalMap reference = apply_adjudications(vocab, decisions);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::shuffle(decisions.begin(), decisions.end(), rng);
    expect_same_map(reference, apply_adjudications(vocab, decisions), all_labels(vocab));
  }
}

TEST(Ontology, RandomMergesMatchComponentOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 9);
    Vocabulary vocab;
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) {
      names.push_back(std::string(1 + rng() % 4, static_cast<char>('a' + i)));
      vocab.entries.push_back({"obj", names.back(), "s", static_cast<std::int64_t>(rng() % 10)});
    }
    std::vector<Adjudication> ds;
    for (int e = 0; e < n; ++e) {
      const int i = static_cast<int>(rng() % n), j = static_cast<int>(rng() % n);
      if (i == j) continue;
      const bool accept = rng() % 2;
      ds.push_back(decision(Scope::part_level, "obj", names[i], names[j], accept ? Verdict::accept : Verdict::reject));
    }
    std::set<std::pair<int, int>> seen;
    std::vector<Adjudication> unique;
    for (const auto& d : ds) {
      const auto key = std::minmax(d.pair.a, d.pair.b);
      if (seen.emplace(key.first[0], key.second[0]).second) unique.push_back(d);
    }
    // Oracle: label components over the de-duplicated list (first verdict wins).
    std::vector<int> comp(static_cast<std::size_t>(n));
    std::iota(comp.begin(), comp.end(), 0);
    for (const auto& d : unique) {
      if (d.verdict != Verdict::accept) continue;
      const int i = d.pair.a[0] - 'a', j = d.pair.b[0] - 'a';
      const int from = comp[static_cast<std::size_t>(j)], to = comp[static_cast<std::size_t>(i)];
      for (auto& c : comp)
        if (c == from) c = to;
    }
    const CanonicalMap map = apply_adjudications(vocab, unique);
    for (int i = 0; i < n; ++i) {
      std::string best = names[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j)
        if (comp[static_cast<std::size_t>(j)] == comp[static_cast<std::size_t>(i)] &&
            more_canonical(names[static_cast<std::size_t>(j)], best))
          best = names[static_cast<std::size_t>(j)];
      EXPECT_EQ(map.resolve_part("obj", names[static_cast<std::size_t>(i)]), best);
    }
    EXPECT_EQ(map.total_count(), vocab.total_count());
  }
}

TEST(Ontology, ContradictoryDecisionsAreListed) {
  const Vocabulary vocab = fixture_vocab();
  auto decisions = fixture_decisions();
  decisions.push_back(decision(Scope::part_level, "car", "car_rear_bumper", "car_front_bumper", Verdict::accept));
  decisions.push_back(decision(Scope::class_level, "", "laptop", "laptop_computer", Verdict::reject));
  try {
    apply_adjudications(vocab, decisions);
    FAIL() << "expected a conflict";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::conflict);
    const std::string what = e.what();
    EXPECT_NE(what.find("car_front_bumper|car_rear_bumper"), std::string::npos) << what;
    EXPECT_NE(what.find("laptop|laptop_computer"), std::string::npos) << what;
  }
}

TEST(Ontology, UnknownLabelsInDecisionsAreRejected) {
  const Vocabulary vocab = fixture_vocab();
  try {
    apply_adjudications(vocab, {decision(Scope::part_level, "car", "wheel", "tyre", Verdict::accept)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::not_found);
    EXPECT_NE(std::string(e.what()).find("tyre"), std::string::npos);
  }
  EXPECT_THROW(apply_adjudications(vocab, {decision(Scope::class_level, "", "car", "truck", Verdict::reject)}), Error);
}

TEST(Ontology, DuplicateVocabularyEntriesAreRejected) {
  Vocabulary vocab{{{"car", "wheel", "a", 1}, {"car", "wheel", "a", 2}}};
  EXPECT_THROW(vocab.validate(), Error);
  vocab.entries[1].source = "b";
  EXPECT_NO_THROW(vocab.validate());
}

LabelEmbeddings random_embeddings(const std::vector<std::string>& labels, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  LabelEmbeddings e;
  Vector base(16);
  for (auto& x : base) x = g(rng);
  for (const auto& l : labels) {
    Vector v(16);
    for (auto& x : v) x = g(rng);
    // Mix toward a shared direction so some pairs clear the threshold.
    const double mix = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    e[l] = unit(Vector(mix * 3.0 * base + v));
  }
  return e;
}

TEST(Ontology, ProposalsMatchNaiveScan) {
  const Vocabulary vocab = fixture_vocab();
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const LabelEmbeddings emb = random_embeddings(all_labels(vocab), rng);
    const double theta = 0.5 + 0.05 * (trial % 8);
    const auto pairs = propose_pairs(vocab, emb, theta);
    std::vector<std::tuple<Scope, std::string, std::string, std::string>> naive;
    std::set<std::string> classes;
    std::map<std::string, std::set<std::string>> parts;
    for (const auto& e : vocab.entries) {
      classes.insert(e.object_class);
      parts[e.object_class].insert(e.label);
    }
    auto scan = [&](Scope s, const std::string& cls, const std::set<std::string>& names) {
      for (const auto& a : names)
        for (const auto& b : names)
          if (a < b && emb.at(a).dot(emb.at(b)) >= theta) naive.emplace_back(s, cls, a, b);
    };
    scan(Scope::class_level, "", classes);
    for (const auto& [cls, names] : parts) scan(Scope::part_level, cls, names);
    std::vector<std::tuple<Scope, std::string, std::string, std::string>> got;
    for (const auto& p : pairs) {
      got.emplace_back(p.scope, p.object_class, p.a, p.b);
      EXPECT_GE(p.sim, theta);
      EXPECT_LE(p.sim, 1.0 + 1e-12);
    }
    for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_GE(pairs[i - 1].sim, pairs[i].sim);
    std::sort(got.begin(), got.end());
    std::sort(naive.begin(), naive.end());
    EXPECT_EQ(got, naive);
  }
}

TEST(Ontology, ProposalEdgeCases) {
  Vocabulary vocab{{{"c", "x", "a", 1}, {"c", "y", "a", 1}}};
  LabelEmbeddings e{{"c", unit(Vector::Unit(3, 2))}, {"x", unit(Vector::Unit(3, 0))}, {"y", unit(Vector::Unit(3, 0))}};
  auto pairs = propose_pairs(vocab, e);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_NEAR(pairs[0].sim, 1.0, 1e-12);
  e["y"] = Vector::Unit(3, 1);
  EXPECT_TRUE(propose_pairs(vocab, e).empty());
  e.erase("y");
  EXPECT_THROW(propose_pairs(vocab, e), Error);
  EXPECT_THROW(propose_pairs(vocab, e, 1.5), Error);
}

TEST(Ontology, ClassMergeGroupsPartProposals) {
  Vocabulary vocab{{{"laptop", "lid", "a", 1}, {"laptop_computer", "screen", "b", 1}}};
  LabelEmbeddings e{{"laptop", unit(Vector::Unit(3, 2))},
                    {"laptop_computer", unit(Vector::Unit(3, 2))},
                    {"lid", unit(Vector::Unit(3, 0))},
                    {"screen", unit(Vector(Vector::Unit(3, 0) + 0.1 * Vector::Unit(3, 1)))}};
  CanonicalMap none;
  EXPECT_EQ(propose_pairs(vocab, e, 0.85, none).size(), 1u);  // the class pair only
  const CanonicalMap classes =
      apply_adjudications(vocab, {decision(Scope::class_level, "", "laptop", "laptop_computer", Verdict::accept)});
  const auto pairs = propose_pairs(vocab, e, 0.85, classes);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1].scope, Scope::part_level);
  EXPECT_EQ(pairs[1].object_class, "laptop_computer");
}

TEST(Ontology, RecordedAdjudicatorReplaysVerdicts) {
  const auto decisions = fixture_decisions();
  RecordedAdjudicator judge(decisions);
  std::vector<CandidatePair> pairs{{Scope::class_level, "", "laptop", "laptop_computer", 0.95},
                                   {Scope::part_level, "car", "wheel", "tyre", 0.9}};
  const auto out = adjudicate(pairs, judge);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].verdict, Verdict::accept);
  EXPECT_DOUBLE_EQ(out[0].pair.sim, 0.95);
}

TEST(Ontology, CanonicalizeMergesSegments) {
  const CanonicalMap map = apply_adjudications(fixture_vocab(), fixture_decisions());
  const Segmentation seg{{"footboard", {3, 4}}, {"bed_footboard", {1}}, {"headboard", {0}}};
  const Segmentation out = canonicalize(seg, map);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].label, "bed_footboard");
  EXPECT_EQ(out[0].points, (PointSet{1, 3, 4}));
}

TEST(OntologyFiles, DecisionFileChecksumsAreVerified) {
  const std::string text = read_text(kFixtures / "decisions.jsonl");
  const std::string first = text.substr(0, text.find('\n'));
  EXPECT_NO_THROW(open_record(first, 0));
  std::string tampered = first;
  tampered.replace(tampered.find("0.944"), 5, "0.945");
  try {
    open_record(tampered, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::schema);
    EXPECT_NE(std::string(e.what()).find("record 3"), std::string::npos);
  }
}

TEST(OntologyFiles, DecisionsRoundTrip) {
  const auto decisions = fixture_decisions();
  std::vector<json> records;
  for (const auto& d : decisions) records.push_back(adjudication_to_json(d));
  const fs::path out = fs::temp_directory_path() / "alignparts_decisions_roundtrip.jsonl";
  write_records(out, records);
  EXPECT_EQ(read_text(out), read_text(kFixtures / "decisions.jsonl"));
  fs::remove(out);
}

TEST(OntologyFiles, VocabularyRejectsUnknownKeys) {
  json j = vocabulary_to_json(fixture_vocab());
  EXPECT_EQ(vocabulary_from_json(j, "v").entries.size(), fixture_vocab().entries.size());
  j["entries"][0]["colour"] = "red";
  EXPECT_THROW(vocabulary_from_json(j, "v"), Error);
}

}  // namespace
}  // namespace alignparts
