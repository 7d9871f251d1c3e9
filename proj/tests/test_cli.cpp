#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "cbscore/cli.hpp"
#include "golden.hpp"

using namespace cbscore;
namespace fs = std::filesystem;

namespace {

const std::string kRoot = CBSCORE_SOURCE_DIR;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cbscore_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

std::string without_timestamp(const std::string& text) {
  return std::regex_replace(text, std::regex(R"(\s*"generated_at": "[^"]*",?)"), "");
}

/// Balanced-tag check: every opened element is closed in order, attributes
/// are quoted, and only the five predefined entities appear.
bool well_formed_xml(const std::string& s) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = s.find('<', i)) != std::string::npos) {
    const auto end = s.find('>', i);
    if (end == std::string::npos) return false;
    std::string tag = s.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return false;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.back() == '/';
    const auto name = tag.substr(0, tag.find_first_of(" /"));
    if (!self_closing) stack.push_back(name);
  }
  const std::regex bad_amp(R"(&(?!(amp|lt|gt|quot|apos);))");
  return stack.empty() && !std::regex_search(s, bad_amp);
}

}  // namespace

TEST(CliMeasure, GoldenTableReproducesExpectedScore) {
  const auto dir = fresh_dir("golden");
  const auto r = run({"measure", "--pack", golden::kDir + "/pack", "--backend", "table:" + golden::kDir + "/lm_a.json",
                      "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(dir / "cb_report.json"));
  EXPECT_NEAR(report.at("cb_score").get<double>(), golden::expectations().at("lm_a").at("cb_score").get<double>(), 1e-9);
  const auto& prov = report.at("provenance");
  EXPECT_EQ(prov.at("backend_model_ids")[0], "golden-table-2021");
  EXPECT_EQ(prov.at("tool_version"), CBSCORE_VERSION);
  EXPECT_FALSE(prov.at("config_hash").get<std::string>().empty());
  EXPECT_FALSE(prov.at("pack_hashes")[0].get<std::string>().empty());
  for (const char* f : {"prob_table.json", "prob_table.csv", "cell_variance.csv"}) EXPECT_TRUE(fs::exists(dir / f));
  EXPECT_NE(r.out.find("cb_score: 1.02996815606512"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("top cells by variance"), std::string::npos);
  fs::remove_all(dir);
}

TEST(CliMeasure, MockRunsAreByteIdentical) {
  const auto a = fresh_dir("det_a");
  const auto b = fresh_dir("det_b");
  for (const auto& d : {a, b}) {
    const auto r = run({"measure", "--pack", kRoot + "/data/packs/en", "--backend", "mock", "--seed", "7", "--out-dir",
                        d.string(), "--parallelism", d == a ? "1" : "8"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"prob_table.json", "cb_report.json"}) {
    EXPECT_EQ(without_timestamp(slurp(a / f)), without_timestamp(slurp(b / f))) << f;
  }
  for (const char* f : {"prob_table.csv", "cell_variance.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CliMeasure, MissingPackExitsOneWithoutOutput) {
  const auto dir = fresh_dir("missing");
  const auto r = run({"measure", "--pack", kRoot + "/no/such/pack", "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("pack directory not found"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(CliMeasure, ExitCodes) {
  const auto dir = fresh_dir("codes");
  const auto pack = golden::kDir + "/pack";
  EXPECT_EQ(run({"measure", "--pack", pack, "--backend", "table:/nope.json", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(run({"measure", "--pack", pack, "--backend", "carrier-pigeon", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(run({"measure", "--pack", pack, "--backend", "http:http://127.0.0.1:1", "--retries", "0", "--out-dir",
                 dir.string()})
                .code,
            2);
  // The golden fixture does not model the English pack's queries.
  EXPECT_EQ(run({"measure", "--pack", kRoot + "/data/packs/en", "--backend", "table:" + golden::kDir + "/lm_a.json",
                 "--out-dir", dir.string()})
                .code,
            2);
  EXPECT_EQ(run({"measure"}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(CliMeasure, StrictTokenizationFails) {
  const auto dir = fresh_dir("strict");
  fs::create_directories(dir / "pack");
  fs::copy_file(golden::kDir + "/pack/templates.txt", dir / "pack/templates.txt");
  std::ofstream(dir / "pack/lexicon.json")
      << R"({"language":"en","targets":["Korea","Japan","Atlantis"],"attributes":["nurse"]})";
  const std::string backend = "table:" + golden::kDir + "/lm_a.json";
  const auto strict = run({"measure", "--pack", (dir / "pack").string(), "--backend", backend, "--strict-tokenization",
                           "--out-dir", (dir / "out").string()});
  EXPECT_EQ(strict.code, 1);
  EXPECT_NE(strict.err.find("Atlantis"), std::string::npos);
  fs::remove_all(dir);
}

TEST(CliCompare, SameTableTwiceGivesZeroMatrix) {
  const auto dir = fresh_dir("cmp_same");
  ASSERT_EQ(run({"measure", "--pack", golden::kDir + "/pack", "--backend", "table:" + golden::kDir + "/lm_a.json",
                 "--out-dir", (dir / "a").string()})
                .code,
            0);
  const auto t = (dir / "a/prob_table.json").string();
  const auto r = run({"compare", t, t, "--labels", "en", "en-again", "--out-dir", (dir / "cmp").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(slurp(dir / "cmp/jsd_matrix.json"));
  for (const auto& row : doc.at("matrix")) {
    for (const auto& v : row) EXPECT_EQ(v.get<double>(), 0.0);
  }
  const auto svg = slurp(dir / "cmp/profiles.svg");
  EXPECT_TRUE(well_formed_xml(svg));
  std::regex bar(R"re(<rect class="bar" data-series="([^"]*)" data-category="([^"]*)"[^>]*height="([0-9.]+)")re");
  std::map<std::string, std::vector<std::string>> heights;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar); it != std::sregex_iterator(); ++it) {
    heights[(*it)[2]].push_back((*it)[3]);
  }
  ASSERT_EQ(heights.size(), 4u);
  for (const auto& [target, hs] : heights) {
    ASSERT_EQ(hs.size(), 2u) << target;
    EXPECT_EQ(hs[0], hs[1]) << target;
  }
  fs::remove_all(dir);
}

TEST(CliCompare, GoldenPairMatchesExpectations) {
  const auto dir = fresh_dir("cmp_golden");
  for (const char* m : {"lm_a", "lm_b", "lm_uniform"}) {
    ASSERT_EQ(run({"measure", "--pack", golden::kDir + "/pack", "--backend",
                   "table:" + golden::kDir + "/" + m + ".json", "--out-dir", (dir / m).string()})
                  .code,
              0);
  }
  const auto r = run({"compare", (dir / "lm_a/prob_table.json").string(), (dir / "lm_b/prob_table.json").string(),
                      (dir / "lm_uniform/prob_table.json").string(), "--out-dir", (dir / "cmp").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = nlohmann::json::parse(slurp(dir / "cmp/jsd_matrix.json"));
  const auto& m = doc.at("matrix");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_NEAR(m[0][1].get<double>(), golden::expectations().at("jsd_matrix")[0][1].get<double>(), 1e-9);
  EXPECT_EQ(m[0][1], m[1][0]);
  const auto svg = slurp(dir / "cmp/profiles.svg");
  EXPECT_TRUE(well_formed_xml(svg));
  std::size_t bars = 0;
  for (auto p = svg.find("class=\"bar\""); p != std::string::npos; p = svg.find("class=\"bar\"", p + 1)) ++bars;
  EXPECT_EQ(bars, 12u);
  EXPECT_TRUE(fs::exists(dir / "cmp/jsd_matrix.csv"));
  fs::remove_all(dir);
}

TEST(CliCompare, DifferentTargetOrderExitsOne) {
  const auto dir = fresh_dir("cmp_order");
  ASSERT_EQ(run({"measure", "--pack", golden::kDir + "/pack", "--backend", "table:" + golden::kDir + "/lm_a.json",
                 "--out-dir", (dir / "a").string()})
                .code,
            0);
  auto doc = nlohmann::json::parse(slurp(dir / "a/prob_table.json"));
  auto& targets = doc.at("targets");
  std::swap(targets[0], targets[1]);
  std::ofstream(dir / "swapped.json") << doc.dump();
  const auto r = run({"compare", (dir / "a/prob_table.json").string(), (dir / "swapped.json").string(), "--out-dir",
                      (dir / "cmp").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("target order differs at position 0"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "cmp"));
  EXPECT_EQ(run({"compare", (dir / "a/prob_table.json").string()}).code, 1);
  fs::remove_all(dir);
}

TEST(CliAlign, ToyCorpusGivesOrthogonalMatrix) {
  const auto dir = fresh_dir("align_toy");
  const auto s = kRoot + "/samples/align/";
  const auto r = run({"align", "--source", s + "de.txt", "--target", s + "en.txt", "--alignment", s + "de-en.pharaoh",
                      "--backend", "mock", "--seed", "1", "--mock-dim", "6", "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = alignment_from_json(nlohmann::json::parse(slurp(dir / "alignment.json")));
  EXPECT_EQ(a.dim(), 6);
  EXPECT_EQ(a.anchors, 14u);
  EXPECT_LE(orthogonality_defect(a.W), 1e-8);
  EXPECT_NE(r.out.find("k: 14"), std::string::npos);
  fs::remove_all(dir);
}

TEST(CliAlign, IdentityFixtureGivesIdentity) {
  const auto dir = fresh_dir("align_id");
  fs::create_directories(dir);
  const auto s = kRoot + "/samples/align/";
  const auto r = run({"align", "--source", s + "en.txt", "--target", s + "en.txt", "--alignment", s + "de-en.pharaoh",
                      "--backend", "mock", "--mock-dim", "6", "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto a = alignment_from_json(nlohmann::json::parse(slurp(dir / "alignment.json")));
  EXPECT_LE((a.W - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-8);
  fs::remove_all(dir);
}

TEST(CliAlign, InputErrorsExitOne) {
  const auto dir = fresh_dir("align_err");
  fs::create_directories(dir);
  const auto s = kRoot + "/samples/align/";
  std::ofstream(dir / "empty.pharaoh") << "\n\n\n";
  EXPECT_EQ(run({"align", "--source", s + "de.txt", "--target", s + "en.txt", "--alignment",
                 (dir / "empty.pharaoh").string(), "--out-dir", (dir / "o1").string()})
                .code,
            1);
  std::ofstream(dir / "short.pharaoh") << "0-0\n";
  EXPECT_EQ(run({"align", "--source", s + "de.txt", "--target", s + "en.txt", "--alignment",
                 (dir / "short.pharaoh").string(), "--out-dir", (dir / "o2").string()})
                .code,
            1);
  EXPECT_FALSE(fs::exists(dir / "o1"));
  EXPECT_FALSE(fs::exists(dir / "o2"));
  fs::remove_all(dir);
}
