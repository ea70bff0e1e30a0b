// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "support.hpp"

namespace {

using namespace tsdiffuse;

TEST(SynthGrid, LinearHasHundredNonZeroValues) {
  const auto g = synth_param_grid(SynthKind::linear);
  ASSERT_EQ(g.size(), 100u);
  EXPECT_EQ(g.front(), -1.0);
  EXPECT_EQ(g.back(), 1.0);
  for (double m : g) EXPECT_NE(m, 0.0);
}

TEST(SynthGrid, CurvedKindsKeepOuterEightyTwo) {
  for (SynthKind k : {SynthKind::quadratic, SynthKind::cubic, SynthKind::sinusoidal}) {
    const auto g = synth_param_grid(k);
    ASSERT_EQ(g.size(), 82u);
    const double r = k == SynthKind::sinusoidal ? std::numbers::pi : 1.0;
    // 1-based indices 1..41 and 61..101 of 101 points: the 41st is -0.2r,
    // the 61st is +0.2r, nothing strictly between.
    EXPECT_NEAR(g[40], -0.2 * r, 1e-12);
    EXPECT_NEAR(g[41], 0.2 * r, 1e-12);
    for (double m : g) EXPECT_GE(std::abs(m), 0.2 * r - 1e-12);
  }
  const auto s = synth_param_grid(SynthKind::sinusoidal);
  EXPECT_EQ(s.front(), -std::numbers::pi);
  EXPECT_EQ(s.back(), std::numbers::pi);
}

TEST(SynthSeries, CountAndShapes) {
  const auto all = gen_synthetic();
  ASSERT_EQ(all.size(), 346u);
  std::map<SynthKind, int> per_kind;
  for (const auto& s : all) {
    ++per_kind[s.spec.kind];
    ASSERT_EQ(s.series.size(), 100u);
    for (double v : s.series.values) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(per_kind[SynthKind::linear], 100);
  EXPECT_EQ(per_kind[SynthKind::quadratic], 82);
  EXPECT_EQ(per_kind[SynthKind::cubic], 82);
  EXPECT_EQ(per_kind[SynthKind::sinusoidal], 82);
}

TEST(SynthSeries, SteepestLineHitsUnitEndpoints) {
  const auto s = synth_series({SynthKind::linear, 1.0, 99});
  EXPECT_EQ(s.values.front(), -1.0);
  EXPECT_EQ(s.values.back(), 1.0);
}

TEST(SynthSeries, CubicMatchesPointwiseEvaluation) {
  const auto s = synth_series({SynthKind::cubic, 1.0, 81});
  for (std::size_t i = 0; i < 100; ++i) {
    const double u = -1.0 + 2.0 * static_cast<double>(i) / 99.0;
    EXPECT_NEAR(s.values[i], u * u * u, 1e-15);
  }
}

TEST(Resample, TwoPointsToThree) {
  EXPECT_EQ(resample_linear(std::vector<double>{0, 1}, 3), (std::vector<double>{0, 0.5, 1}));
}

TEST(Resample, ConstantStaysConstant) {
  for (std::size_t L : {2u, 7u, 100u})
    for (double v : resample_linear(std::vector<double>(5, 2.5), L)) EXPECT_EQ(v, 2.5);
}

TEST(Resample, RoundTripRecoversOriginalGridPoints) {
  std::mt19937_64 g(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = tsd_test::random_vec(g, 12, -10, 10);
    const auto up = resample_linear(x, 100);
    EXPECT_EQ(up.front(), x.front());
    EXPECT_EQ(up.back(), x.back());
    const auto back = resample_linear(up, 12);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(back[i], x[i], 1e-9);
  }
}

TEST(Resample, EndpointsExactForAnyLengths) {
  std::mt19937_64 g(2);
  std::uniform_int_distribution<std::size_t> len(2, 300);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = tsd_test::random_vec(g, len(g), -1e3, 1e3);
    const auto y = resample_linear(x, len(g));
    ASSERT_EQ(y.front(), x.front());
    ASSERT_EQ(y.back(), x.back());
  }
}

TEST(Resample, TooShortRejected) {
  EXPECT_THROW(resample_linear(std::vector<double>{1.0}, 10), ShapeError);
}

TEST(Window, FullWindowsOnly) {
  const std::vector<double> v(250, 1.0);
  std::vector<std::uint8_t> ok(250, 1);
  EXPECT_EQ(window_series(v, ok, 100, 100).size(), 2u);
  ok[150] = 0;
  EXPECT_EQ(window_series(v, ok, 100, 100).size(), 1u);
  EXPECT_TRUE(window_series(std::vector<double>(99, 0.0), std::vector<std::uint8_t>(99, 1), 100, 100).empty());
}

TEST(Window, NeverIncludesInvalidPoint) {
  std::mt19937_64 g(3);
  std::bernoulli_distribution bad(0.002);
  std::vector<double> v(5000);
  std::vector<std::uint8_t> ok(5000);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<double>(i);
    ok[i] = bad(g) ? 0 : 1;
  }
  for (std::size_t stride : {1u, 7u, 100u})
    for (const auto& w : window_series(v, ok, 100, stride)) {
      ASSERT_EQ(w.size(), 100u);
      const auto start = static_cast<std::size_t>(w.front());
      EXPECT_EQ(start % stride, 0u);
      for (std::size_t i = 0; i < 100; ++i) EXPECT_TRUE(ok[start + i]);
    }
}

TEST(Normalize, MinMaxExample) {
  const auto s = normalize(std::vector<double>{2, 4, 6});
  EXPECT_EQ(s.values, (std::vector<double>{-1, 0, 1}));
  ASSERT_TRUE(s.denorm);
  EXPECT_EQ(s.denorm->offset, 4.0);
  EXPECT_EQ(s.denorm->scale, 2.0);
  EXPECT_FALSE(s.denorm->degenerate);
}

TEST(Normalize, ConstantIsDegenerate) {
  const auto s = normalize(std::vector<double>{5, 5});
  EXPECT_EQ(s.values, (std::vector<double>{0, 0}));
  EXPECT_TRUE(s.denorm->degenerate);
  EXPECT_EQ(denormalize(s), (std::vector<double>{5, 5}));
}

TEST(Normalize, RoundTripAndRange) {
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = tsd_test::random_vec(g, 100, -1e4, 1e4);
    const auto s = normalize(x);
    for (double v : s.values) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
    const auto back = denormalize(s);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-9);
  }
}

TEST(Normalize, NonFiniteRejected) {
  EXPECT_THROW(normalize(std::vector<double>{1.0, std::nan("")}), NumericError);
}

TEST(TemplateCaption, RisingLineSaysIncreasing) {
  EXPECT_NE(template_caption({SynthKind::linear, 0.5, 0})[0].find("increas"), std::string::npos);
  EXPECT_NE(template_caption({SynthKind::linear, -0.5, 0})[0].find("decreas"), std::string::npos);
}

TEST(TemplateCaption, FullCycleSineMentionsWave) {
  const auto c = template_caption({SynthKind::sinusoidal, std::numbers::pi, 81});
  EXPECT_TRUE(c[4].find("wave") != std::string::npos || c[4].find("cycle") != std::string::npos);
}

TEST(TemplateCaption, KindsDifferAndTextIsDeterministic) {
  std::set<std::string> shorts;
  for (SynthKind k : kAllSynthKinds) shorts.insert(template_caption({k, 0.9, 0})[0]);
  EXPECT_EQ(shorts.size(), 4u);
  for (const auto& s : gen_synthetic())
    for (const auto& text : template_caption(s.spec)) ASSERT_FALSE(text.empty());
  EXPECT_EQ(template_caption({SynthKind::cubic, -0.4, 3}), template_caption({SynthKind::cubic, -0.4, 3}));
}

TEST(DescribeSeries, FollowsTrend) {
  std::vector<double> up(100), down(100);
  for (std::size_t i = 0; i < 100; ++i) {
    up[i] = static_cast<double>(i);
    down[i] = -static_cast<double>(i);
  }
  const auto cu = describe_series(up), cd = describe_series(down);
  EXPECT_NE(cu[0], cd[0]);
  for (const auto& t : cu) EXPECT_FALSE(t.empty());
}

struct MockClient : CaptionClient {
  std::string reply;
  std::string last_prompt, last_svg;
  std::string submit(std::string_view svg, std::string_view prompt) override {
    last_svg = svg;
    last_prompt = prompt;
    return reply;
  }
};

TEST(ExternalCaptioner, ParsesFiveLabeledDescriptions) {
  MockClient c;
  c.reply =
      "**Short:** rises then falls\n- Medium: climbs to a peak, then drops\nLong description: a longer one\n"
      "Creative: a mountain hike\nResembles: a tent\n";
  const auto caps = annotate_external(std::vector<double>{0, 1, 0}, c);
  EXPECT_EQ(caps[0], "rises then falls");
  EXPECT_EQ(caps[1], "climbs to a peak, then drops");
  EXPECT_EQ(caps[2], "a longer one");
  EXPECT_EQ(caps[3], "a mountain hike");
  EXPECT_EQ(caps[4], "a tent");
  EXPECT_EQ(c.last_prompt, kCaptionPrompt);
  EXPECT_NE(c.last_svg.find("<svg"), std::string::npos);
}

TEST(ExternalCaptioner, MissingTypeIsNamed) {
  MockClient c;
  c.reply = "Short: a\nMedium: b\nLong: c\nResembles: d\n";
  try {
    annotate_external(std::vector<double>{0, 1}, c);
    FAIL() << "expected a parse error";
  } catch (const CaptionError& e) {
    EXPECT_NE(std::string(e.what()).find("creative"), std::string::npos);
  }
}

TEST(ExternalCaptioner, DefaultPromptIsTheInstruction) {
  EXPECT_EQ(kCaptionPrompt,
            "Describe this time series with a short, medium, and long description. Make sure to describe the overall "
            "trends and changes in direction of the line. Also, a creative description and a description of what it "
            "resembles.");
}

std::vector<PairRecord> fake_truce(std::size_t n_series) {
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < n_series; ++i)
    for (int c = 0; c < 3; ++c)
      out.push_back({"truce-" + std::to_string(i) + "/c" + std::to_string(c), Source::truce, DescType::truce, "t",
                     std::vector<double>(100, 0.0)});
  return out;
}

std::set<std::string> series_ids(const std::vector<PairRecord>& rs) {
  std::set<std::string> s;
  for (const auto& r : rs) s.insert(r.series_id());
  return s;
}

TEST(Split, TruceProportions) {
  const auto recs = fake_truce(2460);
  const auto s = split_grouped(recs, 0.05, 1);
  EXPECT_EQ(series_ids(s.test).size(), 123u);
  EXPECT_EQ(s.test.size(), 369u);
  EXPECT_EQ(s.train.size(), 2337u * 3);
}

TEST(Split, SyntheticProportions) {
  const auto recs = synthetic_records();
  ASSERT_EQ(recs.size(), 1730u);
  const auto s = split_grouped(recs, 0.05, 9);
  EXPECT_EQ(series_ids(s.test).size(), 17u);
  EXPECT_EQ(s.test.size(), 85u);
  EXPECT_EQ(s.train.size(), 1645u);
}

TEST(Split, PartitionForAnySeed) {
  const auto recs = synthetic_records();
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto s = split_grouped(recs, 0.2, seed);
    const auto a = series_ids(s.train), b = series_ids(s.test);
    for (const auto& id : b) ASSERT_FALSE(a.count(id)) << id;
    ASSERT_EQ(s.train.size() + s.test.size(), recs.size());
    ASSERT_EQ(a.size() + b.size(), 346u);
  }
  EXPECT_NE(series_ids(split_grouped(recs, 0.05, 1).test), series_ids(split_grouped(recs, 0.05, 2).test));
}

TEST(Split, NeedsTwoGroups) {
  const auto one = fake_truce(1);
  EXPECT_THROW(split_grouped(one, 0.5, 1), ConfigError);
  EXPECT_THROW(split_grouped(fake_truce(4), 1.0, 1), ConfigError);
}

TEST(Records, InvariantsHold) {
  for (const auto& r : synthetic_records()) {
    ASSERT_NO_THROW(r.check(100));
    EXPECT_EQ(r.id.substr(r.id.rfind('/') + 1), std::string(to_string(r.desc_type)));
  }
  PairRecord bad{"x/short", Source::truce, DescType::short_, "a", std::vector<double>(100, 0.0)};
  EXPECT_THROW(bad.check(100), FormatError);
  bad = {"x/truce", Source::stock, DescType::truce, "a", std::vector<double>(100, 0.0)};
  EXPECT_THROW(bad.check(100), FormatError);
  bad = {"x/short", Source::stock, DescType::short_, "", std::vector<double>(100, 0.0)};
  EXPECT_THROW(bad.check(100), FormatError);
  bad = {"x/short", Source::stock, DescType::short_, "a", std::vector<double>(99, 0.0)};
  EXPECT_THROW(bad.check(100), FormatError);
}

TEST(Jsonl, RoundTripIsExact) {
  const auto dir = tsd_test::scratch_dir("jsonl_roundtrip");
  auto recs = synthetic_records();
  std::mt19937_64 g(5);
  std::shuffle(recs.begin(), recs.end(), g);
  write_corpus(dir / "synthetic_train.jsonl", recs);
  const auto back = read_corpus(dir / "synthetic_train.jsonl", 100);
  ASSERT_EQ(back.size(), recs.size());
  std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_EQ(back[i].text, recs[i].text);
    EXPECT_EQ(back[i].series, recs[i].series);
    EXPECT_EQ(back[i].source, recs[i].source);
    EXPECT_EQ(back[i].desc_type, recs[i].desc_type);
  }
}

TEST(Jsonl, FieldOrderIsFixed) {
  const PairRecord r{"s/short", Source::stock, DescType::short_, "up", {0.5, -1.0}};
  EXPECT_EQ(record_to_json(r),
            R"({"id":"s/short","source":"stock","desc_type":"short","text":"up","series":[0.5,-1.0]})");
}

TEST(Jsonl, SchemaErrorsNameFileAndLine) {
  const auto dir = tsd_test::scratch_dir("jsonl_errors");
  const auto good = record_to_json(synthetic_records().front());
  auto expect_line = [&](const std::string& second, const std::string& needle) {
    {
      std::ofstream(dir / "c.jsonl") << good << "\n" << second << "\n";
    }
    try {
      read_corpus(dir / "c.jsonl", 100);
      ADD_FAILURE() << "accepted: " << second;
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("c.jsonl:2:"), std::string::npos) << msg;
      EXPECT_NE(msg.find(needle), std::string::npos) << msg;
    }
  };
  expect_line("{not json", "parse");
  expect_line(R"({"id":"a/short","source":"moon","desc_type":"short","text":"x","series":[]})", "moon");
  expect_line(R"({"id":"a/short","source":"stock","desc_type":"short","text":"x","series":[1,2]})", "expected 100");
  expect_line(R"({"id":"a/short","source":"stock","desc_type":"short","text":"x"})", "series");
  std::string extra = good;
  extra.insert(1, R"("extra":1,)");
  expect_line(extra, "extra");
}

TEST(Ingest, StockWindowsSkipGapsAndKeepFraction) {
  const auto dir = tsd_test::scratch_dir("stock_ingest");
  {
    std::ofstream f(dir / "ACME.csv");
    f << "timestamp,value\n";
    for (int i = 0; i < 1000; ++i) {
      f << "2020-01-01T" << i << ",";
      if (i != 450) f << 100.0 + std::sin(i * 0.1) * 5;
      f << "\n";
    }
  }
  ForgeConfig cfg;
  cfg.stock_keep_fraction = 1.0;
  Rng rng(1);
  TemplateCaptioner cap;
  const auto all = stock_records(dir, cfg, 100, rng, cap);
  EXPECT_EQ(all.size(), 9u * 5);  // 10 windows, the one holding index 450 dropped
  for (const auto& r : all) {
    EXPECT_EQ(r.id.find("stock-ACME-000400"), std::string::npos);
    ASSERT_NO_THROW(r.check(100));
    for (double v : r.series) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
  cfg.stock_keep_fraction = 0.3;
  Rng rng2(1);
  EXPECT_EQ(stock_records(dir, cfg, 100, rng2, cap).size(), 3u * 5);  // ceil(9 * 0.3)
}

TEST(Ingest, UcrFilesResampledAndCapped) {
  const auto dir = tsd_test::scratch_dir("ucr_ingest");
  std::filesystem::create_directories(dir / "Wave");
  {
    std::ofstream f(dir / "Wave" / "Wave_TRAIN.tsv");
    for (int r = 0; r < 12; ++r) {
      f << (r % 2 + 1);
      for (int i = 0; i < 40; ++i) f << "\t" << std::cos(0.2 * i + r);
      f << "\n";
    }
  }
  {
    std::ofstream f(dir / "Wave" / "Wave_TEST.tsv");
    f << "1\t0\t1\n";
  }
  ForgeConfig cfg;
  cfg.ucr_per_dataset = 5;
  TemplateCaptioner cap;
  const auto recs = ucr_records(dir, cfg, 100, 3, cap);
  EXPECT_EQ(recs.size(), 25u);
  EXPECT_EQ(recs.front().id.rfind("ucr-Wave-", 0), 0u);
  for (const auto& r : recs) EXPECT_NO_THROW(r.check(100));
  const auto again = ucr_records(dir, cfg, 100, 3, cap);
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(recs[i].id, again[i].id);
}

TEST(Ingest, TruceJsonl) {
  const auto dir = tsd_test::scratch_dir("truce_ingest");
  {
    std::ofstream f(dir / "truce.jsonl");
    f << R"({"id":"7","series":[1,2,3,4,5,6,7,8,9,10,11,12],"captions":["rises","goes up","steady climb"]})" << "\n";
    f << R"({"series":[3,3,3],"captions":["flat"]})" << "\n";
  }
  const auto recs = truce_records(dir / "truce.jsonl", 100);
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(recs[0].id, "truce-7/c0");
  EXPECT_EQ(recs[3].id, "truce-00002/c0");
  EXPECT_EQ(recs[0].series.front(), -1.0);
  EXPECT_EQ(recs[0].series.back(), 1.0);
  for (const auto& r : recs) EXPECT_NO_THROW(r.check(100));
  {
    std::ofstream f(dir / "bad.jsonl");
    f << R"({"series":[1,2],"captions":[]})" << "\n";
  }
  EXPECT_THROW(truce_records(dir / "bad.jsonl", 100), FormatError);
}

}  // namespace
